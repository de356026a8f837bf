#pragma once

#include "common/kv_text.hpp"
#include "featio/records.hpp"
#include "featio/split.hpp"
#include "promptgen/prompt_head.hpp"
#include "textenc/text_encoder.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace bimors::train {

struct TrainConfig {
    std::uint32_t epochs = 10;
    std::uint32_t batch_size = 4;
    double lr = 2e-4;
    double warmup_lr = 1e-5;
    std::uint32_t warmup_epochs = 1;
    double temperature = 0.01;
    std::uint32_t shots = 16;
    std::uint64_t seed = 1;
    promptgen::ContextMode mode = promptgen::ContextMode::full;
    double momentum = 0.0;
    double weight_decay = 0.0;
    std::uint32_t heads = 4;
    std::uint32_t m = 4;

    bool operator==(const TrainConfig&) const = default;
};

void validate_config(const TrainConfig& config);
// Unknown keys are rejected so a typo in a config file does not go unnoticed.
TrainConfig config_from_kv(const KvDocument& doc, TrainConfig base = {});
KvDocument config_to_kv(const TrainConfig& config);

double lr_at(std::uint32_t epoch, const TrainConfig& config);

// Classes a classifier chooses between, with their prompt token ids.
struct LabelSpace {
    std::vector<std::uint32_t> class_ids;
    std::vector<std::vector<std::uint32_t>> tokens;

    std::size_t size() const { return class_ids.size(); }
    // Position of `class_id`, or size() when absent.
    std::size_t index_of(std::uint32_t class_id) const;
};

LabelSpace make_label_space(const featio::DatasetManifest& manifest, std::span<const std::uint32_t> class_ids);

// Per-class encoder outputs for one shared context, stacked as [C, E].
// Class prompts are encoded in parallel into fixed slots.
Tensor class_embeddings(const Tensor& context, const LabelSpace& labels, const textenc::TextEncoderWeights& weights);

// cos(global_embed, class embedding) / tau for every class, [1, C].
Tensor class_logits(const Tensor& context, std::span<const float> global_embed, const LabelSpace& labels,
                    const textenc::TextEncoderWeights& weights, double temperature);
Tensor logits_from_embeddings(const Tensor& class_embeds, std::span<const float> global_embed, double temperature);

// Mean cross-entropy over the batch. Labels are dataset class ids; one
// outside the label space is a protocol error.
Tensor loss_batch(std::span<const featio::FeatureRecord> records, const promptgen::PromptHead& head,
                  const textenc::TextEncoderWeights& weights, const LabelSpace& labels, double temperature,
                  promptgen::ContextMode mode);

struct SgdOptions {
    double lr = 0.0;
    double momentum = 0.0;
    double weight_decay = 0.0;
};

// Velocity buffers, keyed by parameter position. Empty until first use.
struct SgdState {
    std::vector<std::vector<float>> velocity;
};

// w <- w - lr * (g + wd * w), through a momentum buffer when momentum > 0.
// Every parameter must carry a gradient; all gradients are cleared after.
void sgd_step(std::span<const std::pair<std::string, Tensor*>> params, const SgdOptions& options, SgdState* state = nullptr);
void sgd_step(promptgen::PromptHead& head, const SgdOptions& options, SgdState* state = nullptr);

struct LogEntry {
    std::uint64_t step = 0;
    std::uint32_t epoch = 0;
    double lr = 0.0;
    double loss = 0.0;

    bool operator==(const LogEntry&) const = default;
};

struct TrainState {
    promptgen::PromptHead head;
    std::uint64_t step = 0;
    std::vector<LogEntry> log;
    std::uint64_t rng_state = 0;
};

// Fresh head for `config` against the encoder and dataset dimensions, query
// tokens initialized from the template words.
promptgen::PromptHead initial_head(const TrainConfig& config, const featio::DatasetManifest& manifest,
                                   const textenc::TextEncoderWeights& weights);

using ProgressFn = std::function<void(const LogEntry&)>;

// Visits the split's training pool in a freshly shuffled order every epoch,
// taking batches of batch_size (last one may be short). Parameters outside
// the mode's gradient path get zero gradients, so they stay at init.
TrainState train(const featio::Dataset& dataset, const featio::SplitSpec& split, const TrainConfig& config,
                 const textenc::TextEncoderWeights& weights, const ProgressFn& progress = {});

// Step, epoch, lr and loss, tab-separated, one line per step.
std::string format_log(std::span<const LogEntry> log);
void write_log(std::span<const LogEntry> log, const std::filesystem::path& file);

// Whether each head parameter receives a nonzero gradient under `mode` on
// the given record.
std::vector<std::pair<std::string, bool>> gradient_activity(const promptgen::PromptHead& head,
                                                            const featio::FeatureRecord& record,
                                                            const textenc::TextEncoderWeights& weights,
                                                            const LabelSpace& labels, double temperature,
                                                            promptgen::ContextMode mode);

} // namespace bimors::train
