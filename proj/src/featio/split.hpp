#pragma once

#include "featio/records.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace bimors::featio {

enum class SplitMode { b2n, cd, ssmt };

const char* split_mode_name(SplitMode mode);
SplitMode parse_split_mode(const std::string& text);

struct SplitSpec {
    SplitMode mode = SplitMode::b2n;
    // B2N: disjoint halves. CD/SSMT: base holds the source label space, new is empty.
    std::vector<std::uint32_t> base_class_ids;
    std::vector<std::uint32_t> new_class_ids;
    std::uint32_t shots = 16;
    std::uint64_t seed = 0;
    std::string source_dataset;
    std::string target_dataset;
    // Sampled few-shot training pool, grouped by class in ascending class id,
    // ascending record index inside each class.
    std::vector<std::uint64_t> train_record_ids;

    bool operator==(const SplitSpec&) const = default;
};

// First ceil(C/2) classes in byte-wise name order form the base set. Shots
// are drawn per base class with a single Rng(seed): the record indices of
// each class (ascending) are Fisher-Yates shuffled and the first
// min(shots, available) kept.
SplitSpec make_b2n_split(const Dataset& dataset, std::uint64_t seed, std::uint32_t shots);

// Source-side split for cross-dataset and single-source multi-target runs:
// the label space is the dataset's declared shared subset when present,
// otherwise every class.
SplitSpec make_transfer_split(const Dataset& source, SplitMode mode, std::uint64_t seed, std::uint32_t shots,
                              const std::string& target_dataset);

void check_split(const SplitSpec& split, const DatasetManifest& manifest);

void save_split(const SplitSpec& split, const std::filesystem::path& file);
SplitSpec load_split(const std::filesystem::path& file);

} // namespace bimors::featio
