#include "featio/records.hpp"

#include "common/byte_io.hpp"
#include "common/error.hpp"
#include "common/kv_text.hpp"
#include "common/sha256.hpp"

#include <cstring>
#include <set>

namespace bimors::featio {

namespace fs = std::filesystem;

namespace {

std::string rec_label(const FeatureRecord& r, std::size_t index) {
    return "record " + std::to_string(index) + " ('" + r.image_id + "')";
}

void write_record(ByteWriter& w, const FeatureRecord& r) {
    w.str(r.image_id);
    w.u32(r.class_id);
    w.u32(static_cast<std::uint32_t>(r.visual_tokens.rows));
    w.u32(static_cast<std::uint32_t>(r.visual_tokens.cols));
    w.f32s(r.visual_tokens.values);
    w.u32(static_cast<std::uint32_t>(r.global_embed.size()));
    w.f32s(r.global_embed);
    w.str(r.caption_text);
    w.u32(static_cast<std::uint32_t>(r.caption_token_embeds.rows));
    w.u32(static_cast<std::uint32_t>(r.caption_token_embeds.cols));
    w.f32s(r.caption_token_embeds.values);
}

FeatureRecord read_record(ByteReader& r) {
    FeatureRecord rec;
    rec.image_id = r.str();
    rec.class_id = r.u32();
    rec.visual_tokens.rows = r.u32();
    rec.visual_tokens.cols = r.u32();
    rec.visual_tokens.values.resize(rec.visual_tokens.rows * rec.visual_tokens.cols);
    r.f32s(rec.visual_tokens.values);
    rec.global_embed.resize(r.u32());
    r.f32s(rec.global_embed);
    rec.caption_text = r.str();
    rec.caption_token_embeds.rows = r.u32();
    rec.caption_token_embeds.cols = r.u32();
    rec.caption_token_embeds.values.resize(rec.caption_token_embeds.rows * rec.caption_token_embeds.cols);
    r.f32s(rec.caption_token_embeds.values);
    return rec;
}

// Walks one record without materializing it, checking dims as it goes.
std::uint32_t scan_record(ByteReader& r, const DatasetManifest& m, std::size_t index) {
    auto bad = [&](const std::string& field, const std::string& detail) {
        fail(ErrorCode::validation, "record " + std::to_string(index) + ": field " + field + " " + detail);
    };
    r.skip(r.u32());
    const std::uint32_t class_id = r.u32();
    if (class_id >= m.class_count()) bad("class_id", std::to_string(class_id) + " >= class count " + std::to_string(m.class_count()));
    const std::uint32_t np = r.u32(), dv = r.u32();
    if (np < 1) bad("visual_tokens", "has no rows");
    if (dv != m.d_vis) bad("visual_tokens", "width " + std::to_string(dv) + " != d_vis " + std::to_string(m.d_vis));
    r.skip(std::size_t{np} * dv * sizeof(float));
    const std::uint32_t dc = r.u32();
    if (dc != m.d_clip) bad("global_embed", "length " + std::to_string(dc) + " != d_clip " + std::to_string(m.d_clip));
    r.skip(std::size_t{dc} * sizeof(float));
    r.skip(r.u32());
    const std::uint32_t t = r.u32(), dcap = r.u32();
    if (t < 1) bad("caption_token_embeds", "has no rows");
    if (dcap != m.d_cap) bad("caption_token_embeds", "width " + std::to_string(dcap) + " != d_cap " + std::to_string(m.d_cap));
    r.skip(std::size_t{t} * dcap * sizeof(float));
    return class_id;
}

} // namespace

void validate_manifest(const DatasetManifest& m) {
    if (m.class_names.empty()) fail(ErrorCode::validation, "manifest: class_names is empty");
    std::set<std::string> seen;
    for (const auto& n : m.class_names)
        if (!seen.insert(n).second) fail(ErrorCode::validation, "manifest: duplicate class name '" + n + "'");
    if (m.class_token_ids.size() != m.class_names.size())
        fail(ErrorCode::validation, "manifest: token id lists for " + std::to_string(m.class_token_ids.size()) +
                                        " classes, expected " + std::to_string(m.class_names.size()));
    for (std::size_t i = 0; i < m.class_token_ids.size(); ++i)
        if (m.class_token_ids[i].empty())
            fail(ErrorCode::validation, "manifest: class '" + m.class_names[i] + "' has no token ids");
    if (m.d_vis == 0 || m.d_clip == 0 || m.d_cap == 0 || m.context_length == 0)
        fail(ErrorCode::validation, "manifest: dimensions must be positive");
    for (auto c : m.shared_class_ids)
        if (c >= m.class_count()) fail(ErrorCode::validation, "manifest: shared class id " + std::to_string(c) + " out of range");
}

void validate_record(const DatasetManifest& m, const FeatureRecord& r, std::size_t index) {
    auto bad = [&](const std::string& field, const std::string& detail) {
        fail(ErrorCode::validation, rec_label(r, index) + ": field " + field + " " + detail);
    };
    if (r.class_id >= m.class_count()) bad("class_id", std::to_string(r.class_id) + " >= class count " + std::to_string(m.class_count()));
    const auto& v = r.visual_tokens;
    if (v.rows < 1) bad("visual_tokens", "has no rows");
    if (v.cols != m.d_vis) bad("visual_tokens", "width " + std::to_string(v.cols) + " != d_vis " + std::to_string(m.d_vis));
    if (v.values.size() != v.rows * v.cols) bad("visual_tokens", "holds " + std::to_string(v.values.size()) + " values for its shape");
    if (r.global_embed.size() != m.d_clip)
        bad("global_embed", "length " + std::to_string(r.global_embed.size()) + " != d_clip " + std::to_string(m.d_clip));
    const auto& c = r.caption_token_embeds;
    if (c.rows < 1) bad("caption_token_embeds", "has no rows");
    if (c.cols != m.d_cap) bad("caption_token_embeds", "width " + std::to_string(c.cols) + " != d_cap " + std::to_string(m.d_cap));
    if (c.values.size() != c.rows * c.cols) bad("caption_token_embeds", "holds " + std::to_string(c.values.size()) + " values for its shape");
}

std::vector<std::uint8_t> encode_records(std::span<const FeatureRecord> records) {
    ByteWriter w;
    w.bytes(std::string_view(kBlobMagic, 4));
    w.u32(kBlobVersion);
    w.u32(static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) write_record(w, r);
    return w.take();
}

void write_manifest(const DatasetManifest& m, const fs::path& file) {
    KvDocument doc;
    doc.set("kind", std::string("bimors.dataset"));
    doc.set("version", std::int64_t{1});
    doc.set("dataset_name", m.dataset_name);
    doc.set("d_vis", std::int64_t{m.d_vis});
    doc.set("d_clip", std::int64_t{m.d_clip});
    doc.set("d_cap", std::int64_t{m.d_cap});
    doc.set("context_length", std::int64_t{m.context_length});
    doc.set("class_count", static_cast<std::int64_t>(m.class_count()));
    for (std::size_t i = 0; i < m.class_count(); ++i) {
        const std::string p = "class." + std::to_string(i);
        doc.set(p + ".name", m.class_names[i]);
        doc.set_ints(p + ".tokens", std::vector<std::int64_t>(m.class_token_ids[i].begin(), m.class_token_ids[i].end()));
    }
    if (!m.shared_class_ids.empty())
        doc.set_ints("shared_class_ids", std::vector<std::int64_t>(m.shared_class_ids.begin(), m.shared_class_ids.end()));
    doc.set("record_count", static_cast<std::int64_t>(m.record_count));
    doc.set("blob", std::string(kBlobFile));
    doc.set("blob_sha256", m.blob_sha256);
    for (const auto& [k, v] : m.metadata) doc.set("meta." + k, v);
    doc.save(file);
}

DatasetManifest read_manifest(const fs::path& file) {
    if (!fs::exists(file)) fail(ErrorCode::io, "dataset manifest not found: " + file.string());
    const KvDocument doc = KvDocument::load(file);
    if (doc.find("kind") != std::optional<std::string>("bimors.dataset"))
        fail(ErrorCode::format, file.string() + " is not a dataset manifest");
    if (doc.get_int("version") != 1) fail(ErrorCode::version, "unsupported manifest version " + doc.get("version"));
    DatasetManifest m;
    m.dataset_name = doc.get("dataset_name");
    m.d_vis = static_cast<std::uint32_t>(doc.get_int("d_vis"));
    m.d_clip = static_cast<std::uint32_t>(doc.get_int("d_clip"));
    m.d_cap = static_cast<std::uint32_t>(doc.get_int("d_cap"));
    m.context_length = static_cast<std::uint32_t>(doc.get_int("context_length"));
    const auto classes = doc.get_int("class_count");
    for (std::int64_t i = 0; i < classes; ++i) {
        const std::string p = "class." + std::to_string(i);
        m.class_names.push_back(doc.get(p + ".name"));
        std::vector<std::uint32_t> ids;
        for (auto id : doc.get_ints(p + ".tokens")) {
            if (id < 0) fail(ErrorCode::validation, p + ".tokens holds a negative id");
            ids.push_back(static_cast<std::uint32_t>(id));
        }
        m.class_token_ids.push_back(std::move(ids));
    }
    if (doc.has("shared_class_ids"))
        for (auto id : doc.get_ints("shared_class_ids")) m.shared_class_ids.push_back(static_cast<std::uint32_t>(id));
    m.record_count = doc.get_u64("record_count");
    m.blob_sha256 = doc.get("blob_sha256");
    for (const auto& [k, v] : doc.entries())
        if (k.rfind("meta.", 0) == 0) m.metadata.emplace_back(k.substr(5), v);
    validate_manifest(m);
    return m;
}

DatasetManifest write_dataset(const DatasetManifest& manifest, std::span<const FeatureRecord> records, const fs::path& dir) {
    validate_manifest(manifest);
    for (std::size_t i = 0; i < records.size(); ++i) validate_record(manifest, records[i], i);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorCode::io, "cannot create " + dir.string() + ": " + ec.message());
    const auto blob = encode_records(records);
    DatasetManifest out = manifest;
    out.record_count = records.size();
    out.blob_sha256 = sha256_hex(blob);
    write_file_bytes((dir / kBlobFile).string(), blob);
    write_manifest(out, dir / kManifestFile);
    return out;
}

Dataset Dataset::open(const fs::path& dir) {
    Dataset ds;
    ds.dir_ = dir;
    ds.manifest_ = read_manifest(dir / kManifestFile);
    const fs::path blob_path = dir / kBlobFile;
    if (!fs::exists(blob_path)) fail(ErrorCode::io, "record blob not found: " + blob_path.string());
    ds.blob_ = read_file_bytes(blob_path.string());

    ByteReader r(ds.blob_, blob_path.string());
    if (ds.blob_.size() < 4 || std::memcmp(ds.blob_.data(), kBlobMagic, 4) != 0)
        fail(ErrorCode::format, blob_path.string() + ": bad magic (expected BMRS)");
    r.skip(4);
    const std::uint32_t version = r.u32();
    if (version != kBlobVersion) fail(ErrorCode::version, blob_path.string() + ": unsupported version " + std::to_string(version));
    const std::uint32_t count = r.u32();
    if (count != ds.manifest_.record_count)
        fail(ErrorCode::validation, "blob holds " + std::to_string(count) + " records, manifest declares " +
                                        std::to_string(ds.manifest_.record_count));
    ds.offsets_.reserve(count);
    ds.class_ids_.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        ds.offsets_.push_back(r.position());
        ds.class_ids_.push_back(scan_record(r, ds.manifest_, i));
    }
    if (r.remaining() != 0)
        fail(ErrorCode::format, blob_path.string() + ": " + std::to_string(r.remaining()) + " trailing bytes after last record");
    const std::string digest = sha256_hex(ds.blob_);
    if (digest != ds.manifest_.blob_sha256)
        fail(ErrorCode::checksum, blob_path.string() + ": SHA-256 " + digest + " does not match manifest " + ds.manifest_.blob_sha256);
    return ds;
}

std::uint32_t Dataset::class_of(std::size_t index) const {
    if (index >= size()) fail(ErrorCode::index, "record index " + std::to_string(index) + " out of range");
    return class_ids_[index];
}

FeatureRecord Dataset::record(std::size_t index) const {
    if (index >= size()) fail(ErrorCode::index, "record index " + std::to_string(index) + " out of range");
    ByteReader r(blob_, (dir_ / kBlobFile).string());
    r.seek(offsets_[index]);
    return read_record(r);
}

} // namespace bimors::featio
