#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace bimors::featio {

inline constexpr char kBlobMagic[4] = {'B', 'M', 'R', 'S'};
inline constexpr std::uint32_t kBlobVersion = 1;
inline constexpr const char* kManifestFile = "manifest.txt";
inline constexpr const char* kBlobFile = "records.bmrs";

// Row-major f32 matrix as stored on disk.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> values;

    bool operator==(const Matrix&) const = default;
};

// Precomputed frozen-backbone outputs for one image.
struct FeatureRecord {
    std::string image_id;
    std::uint32_t class_id = 0;
    Matrix visual_tokens;             // [N_p, d_vis], penultimate-layer token grid
    std::vector<float> global_embed;  // [d_clip], unnormalized
    std::string caption_text;
    Matrix caption_token_embeds;      // [T, d_cap]

    bool operator==(const FeatureRecord&) const = default;
};

struct DatasetManifest {
    std::string dataset_name;
    std::vector<std::string> class_names;
    // Text-encoder token ids for each class name, produced at export time.
    std::vector<std::vector<std::uint32_t>> class_token_ids;
    std::uint32_t d_vis = 768;
    std::uint32_t d_clip = 512;
    std::uint32_t d_cap = 768;
    std::uint32_t context_length = 77;
    std::uint64_t record_count = 0;
    std::string blob_sha256;
    // Shared label subset for single-source multi-target targets; empty
    // means the dataset does not declare one.
    std::vector<std::uint32_t> shared_class_ids;
    // Free-form provenance (decoding parameters, backbone ids, ...).
    std::vector<std::pair<std::string, std::string>> metadata;

    std::size_t class_count() const { return class_names.size(); }
    bool operator==(const DatasetManifest&) const = default;
};

void validate_manifest(const DatasetManifest& manifest);
// Throws ErrorCode::validation naming the record and the offending field.
void validate_record(const DatasetManifest& manifest, const FeatureRecord& record, std::size_t index);

std::vector<std::uint8_t> encode_records(std::span<const FeatureRecord> records);

// Writes <dir>/manifest.txt and <dir>/records.bmrs. Returns the manifest as
// written (record count and checksum filled in).
DatasetManifest write_dataset(const DatasetManifest& manifest, std::span<const FeatureRecord> records,
                              const std::filesystem::path& dir);

// Read-only view over an on-disk dataset. Opening validates magic, version,
// structure, per-record dimensions and the blob checksum; records are then
// decoded on demand. Safe to share across threads after construction.
class Dataset {
public:
    static Dataset open(const std::filesystem::path& dir);

    const DatasetManifest& manifest() const { return manifest_; }
    const std::filesystem::path& path() const { return dir_; }
    std::size_t size() const { return offsets_.size(); }
    std::uint32_t class_of(std::size_t index) const;
    FeatureRecord record(std::size_t index) const;

private:
    std::filesystem::path dir_;
    DatasetManifest manifest_;
    std::vector<std::uint8_t> blob_;
    std::vector<std::size_t> offsets_;
    std::vector<std::uint32_t> class_ids_;
};

DatasetManifest read_manifest(const std::filesystem::path& file);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& file);

} // namespace bimors::featio
