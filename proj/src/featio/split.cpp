#include "featio/split.hpp"

#include "common/error.hpp"
#include "common/kv_text.hpp"
#include "common/rng.hpp"

#include <algorithm>
#include <numeric>
#include <set>

namespace bimors::featio {

namespace {

std::vector<std::uint64_t> sample_shots(const Dataset& dataset, const std::vector<std::uint32_t>& classes,
                                        std::uint64_t seed, std::uint32_t shots) {
    std::vector<std::vector<std::uint64_t>> by_class(dataset.manifest().class_count());
    for (std::size_t i = 0; i < dataset.size(); ++i) by_class[dataset.class_of(i)].push_back(i);
    Rng rng(seed);
    std::vector<std::uint64_t> out;
    for (auto c : classes) {
        auto pool = by_class[c];
        shuffle(std::span<std::uint64_t>(pool), rng);
        pool.resize(std::min<std::size_t>(shots, pool.size()));
        std::sort(pool.begin(), pool.end());
        out.insert(out.end(), pool.begin(), pool.end());
    }
    return out;
}

std::string join_ids(const std::vector<std::uint32_t>& ids) {
    std::string s;
    for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? "," : "") + std::to_string(ids[i]);
    return s;
}

} // namespace

const char* split_mode_name(SplitMode mode) {
    switch (mode) {
    case SplitMode::b2n: return "B2N";
    case SplitMode::cd: return "CD";
    case SplitMode::ssmt: return "SSMT";
    }
    return "?";
}

SplitMode parse_split_mode(const std::string& text) {
    std::string t = text;
    std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
    if (t == "B2N") return SplitMode::b2n;
    if (t == "CD") return SplitMode::cd;
    if (t == "SSMT") return SplitMode::ssmt;
    fail(ErrorCode::invalid_argument, "unknown split mode '" + text + "' (expected B2N, CD or SSMT)");
}

SplitSpec make_b2n_split(const Dataset& dataset, std::uint64_t seed, std::uint32_t shots) {
    const auto& m = dataset.manifest();
    const std::size_t C = m.class_count();
    if (C < 2) fail(ErrorCode::split, "base-to-new split needs at least 2 classes, '" + m.dataset_name + "' has " + std::to_string(C));
    if (shots < 1) fail(ErrorCode::split, "shots per class must be at least 1");
    std::vector<std::uint32_t> order(C);
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return m.class_names[a] < m.class_names[b]; });
    const std::size_t n_base = (C + 1) / 2;
    SplitSpec s;
    s.mode = SplitMode::b2n;
    s.base_class_ids.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_base));
    s.new_class_ids.assign(order.begin() + static_cast<std::ptrdiff_t>(n_base), order.end());
    std::sort(s.base_class_ids.begin(), s.base_class_ids.end());
    std::sort(s.new_class_ids.begin(), s.new_class_ids.end());
    s.shots = shots;
    s.seed = seed;
    s.source_dataset = m.dataset_name;
    s.target_dataset = m.dataset_name;
    s.train_record_ids = sample_shots(dataset, s.base_class_ids, seed, shots);
    return s;
}

SplitSpec make_transfer_split(const Dataset& source, SplitMode mode, std::uint64_t seed, std::uint32_t shots,
                              const std::string& target_dataset) {
    if (mode == SplitMode::b2n) fail(ErrorCode::split, "make_transfer_split called with B2N mode");
    if (shots < 1) fail(ErrorCode::split, "shots per class must be at least 1");
    const auto& m = source.manifest();
    SplitSpec s;
    s.mode = mode;
    if (!m.shared_class_ids.empty()) {
        s.base_class_ids = m.shared_class_ids;
        std::sort(s.base_class_ids.begin(), s.base_class_ids.end());
    } else {
        s.base_class_ids.resize(m.class_count());
        std::iota(s.base_class_ids.begin(), s.base_class_ids.end(), 0u);
    }
    s.shots = shots;
    s.seed = seed;
    s.source_dataset = m.dataset_name;
    s.target_dataset = target_dataset;
    s.train_record_ids = sample_shots(source, s.base_class_ids, seed, shots);
    return s;
}

void check_split(const SplitSpec& s, const DatasetManifest& m) {
    const std::size_t C = m.class_count();
    std::set<std::uint32_t> base(s.base_class_ids.begin(), s.base_class_ids.end());
    std::set<std::uint32_t> fresh(s.new_class_ids.begin(), s.new_class_ids.end());
    if (base.empty()) fail(ErrorCode::split, "split has an empty base class set");
    for (auto c : base)
        if (c >= C) fail(ErrorCode::split, "split base class " + std::to_string(c) + " out of range");
    for (auto c : fresh) {
        if (c >= C) fail(ErrorCode::split, "split new class " + std::to_string(c) + " out of range");
        if (base.count(c)) fail(ErrorCode::split, "class " + std::to_string(c) + " is in both base and new sets");
    }
    if (s.mode == SplitMode::b2n && base.size() + fresh.size() != C)
        fail(ErrorCode::split, "B2N base and new sets do not cover all " + std::to_string(C) + " classes");
    if (s.shots < 1) fail(ErrorCode::split, "shots per class must be at least 1");
}

void save_split(const SplitSpec& s, const std::filesystem::path& file) {
    KvDocument doc;
    doc.set("kind", std::string("bimors.split"));
    doc.set("version", std::int64_t{1});
    doc.set("mode", std::string(split_mode_name(s.mode)));
    doc.set("seed", std::to_string(s.seed));
    doc.set("shots", std::int64_t{s.shots});
    doc.set("source_dataset", s.source_dataset);
    doc.set("target_dataset", s.target_dataset);
    doc.set_ints("base_class_ids", std::vector<std::int64_t>(s.base_class_ids.begin(), s.base_class_ids.end()));
    doc.set_ints("new_class_ids", std::vector<std::int64_t>(s.new_class_ids.begin(), s.new_class_ids.end()));
    doc.set_ints("train_record_ids", std::vector<std::int64_t>(s.train_record_ids.begin(), s.train_record_ids.end()));
    doc.set("summary", "base={" + join_ids(s.base_class_ids) + "} new={" + join_ids(s.new_class_ids) + "}");
    doc.save(file);
}

SplitSpec load_split(const std::filesystem::path& file) {
    const KvDocument doc = KvDocument::load(file);
    if (doc.find("kind") != std::optional<std::string>("bimors.split"))
        fail(ErrorCode::format, file.string() + " is not a split file");
    if (doc.get_int("version") != 1) fail(ErrorCode::version, "unsupported split version " + doc.get("version"));
    SplitSpec s;
    s.mode = parse_split_mode(doc.get("mode"));
    s.seed = doc.get_u64("seed");
    s.shots = static_cast<std::uint32_t>(doc.get_int("shots"));
    s.source_dataset = doc.get("source_dataset");
    s.target_dataset = doc.get("target_dataset");
    for (auto v : doc.get_ints("base_class_ids")) s.base_class_ids.push_back(static_cast<std::uint32_t>(v));
    for (auto v : doc.get_ints("new_class_ids")) s.new_class_ids.push_back(static_cast<std::uint32_t>(v));
    for (auto v : doc.get_ints("train_record_ids")) s.train_record_ids.push_back(static_cast<std::uint64_t>(v));
    return s;
}

} // namespace bimors::featio
