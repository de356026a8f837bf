#pragma once

#include "featio/records.hpp"
#include "featio/split.hpp"
#include "promptgen/prompt_head.hpp"
#include "textenc/text_encoder.hpp"
#include "train/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace bimors::eval {

// 100 * correct / total.
double top1_accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> labels);

// 2bn / (b + n), 0 when both are 0.
double harmonic_mean(double base, double novel);

double mean(std::span<const double> values);

// Argmax label-space position for each record; ties go to the lowest index.
// With head == nullptr the template context replaces the generated one.
std::vector<std::size_t> predict(std::span<const featio::FeatureRecord> records, const promptgen::PromptHead* head,
                                 const textenc::TextEncoderWeights& weights, const train::LabelSpace& labels,
                                 double temperature, promptgen::ContextMode mode);

// Accuracy of `head` on the given records of `dataset`, restricted to `labels`.
double evaluate_records(const featio::Dataset& dataset, std::span<const std::uint64_t> record_ids,
                        const promptgen::PromptHead* head, const textenc::TextEncoderWeights& weights,
                        const train::LabelSpace& labels, double temperature, promptgen::ContextMode mode);

struct B2NTestSets {
    std::vector<std::uint64_t> base; // base-class records outside the training pool
    std::vector<std::uint64_t> novel; // every new-class record
};

B2NTestSets b2n_test_sets(const featio::Dataset& dataset, const featio::SplitSpec& split);

struct SeedResult {
    std::uint64_t seed = 0;
    double base_acc = 0.0;
    double new_acc = 0.0;
    double h = 0.0;
    double target_acc = 0.0;

    bool operator==(const SeedResult&) const = default;
};

struct DatasetRow {
    std::string dataset;
    std::vector<SeedResult> seeds;
    // Arithmetic means over seeds; for B2N h is the mean of per-seed H.
    SeedResult mean;

    bool operator==(const DatasetRow&) const = default;
};

struct EvalReport {
    featio::SplitMode regime = featio::SplitMode::b2n;
    std::string label;
    std::vector<std::uint64_t> seeds;
    std::vector<DatasetRow> rows;
    // Mean over rows of each per-dataset metric.
    SeedResult average;
    std::uint64_t trainable_params = 0;
    std::uint64_t active_params = 0;

    bool operator==(const EvalReport&) const = default;
};

// Base-test records against base prompts, new-test records against new prompts.
SeedResult eval_b2n(const featio::Dataset& dataset, const featio::SplitSpec& split, const promptgen::PromptHead* head,
                    const textenc::TextEncoderWeights& weights, double temperature);

// CD classifies over the target's full class list, SSMT over the shared
// subset its manifest declares.
double eval_transfer(const featio::Dataset& target, featio::SplitMode regime, const promptgen::PromptHead* head,
                     const textenc::TextEncoderWeights& weights, double temperature);

// Fills row means and the report average.
void finalize(EvalReport& report);
// Convenience wrappers: one row per dataset/target, heads indexed by seed.
EvalReport report_b2n(const featio::Dataset& dataset, const std::vector<featio::SplitSpec>& splits,
                      const std::vector<const promptgen::PromptHead*>& heads, std::span<const std::uint64_t> seeds,
                      const textenc::TextEncoderWeights& weights, double temperature, const std::string& label);
EvalReport report_transfer(std::span<const featio::Dataset* const> targets, featio::SplitMode regime,
                           const std::vector<const promptgen::PromptHead*>& heads, std::span<const std::uint64_t> seeds,
                           const textenc::TextEncoderWeights& weights, double temperature, const std::string& label);

std::string format_table(const EvalReport& report);
KvDocument report_to_kv(const EvalReport& report);
// report_<regime>_<dataset>_seed<s1-s2-...>; multi-dataset reports use the
// first dataset name followed by "+<n>".
std::string report_basename(const EvalReport& report);
// Writes <basename>.txt and <basename>.kv into dir and returns both paths.
std::vector<std::filesystem::path> write_report(const EvalReport& report, const std::filesystem::path& dir);

struct AblationRow {
    promptgen::ContextMode mode = promptgen::ContextMode::full;
    std::string caption_source;
    EvalReport report;
    std::vector<double> final_loss; // per seed
    std::uint64_t allocated_params = 0;
    std::uint64_t active_params = 0;
    std::vector<std::string> inactive; // parameters with no gradient under the mode
};

struct AblationSuite {
    std::vector<AblationRow> modes;    // no_ca, visual_only, text_only, full
    std::vector<AblationRow> captions; // default vs alternate captions, full mode; empty without an alternate export
};

// Trains every mode per seed on `split` and evaluates it under the split's
// regime (B2N, or in-domain over the label space for CD/SSMT). When
// `alternate_captions` is given (same records, other caption embeddings)
// the full mode is also trained on it.
AblationSuite run_ablation_suite(const featio::Dataset& dataset, const featio::SplitSpec& split,
                                 const train::TrainConfig& config, std::span<const std::uint64_t> seeds,
                                 const textenc::TextEncoderWeights& weights, const featio::Dataset* alternate_captions);

std::string format_ablation(const AblationSuite& suite);
KvDocument ablation_to_kv(const AblationSuite& suite);

} // namespace bimors::eval
