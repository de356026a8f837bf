#include "train/trainer.hpp"

#include "common/error.hpp"
#include "common/parallel.hpp"
#include "common/rng.hpp"
#include "tensor/ops.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace bimors::train {

using featio::FeatureRecord;
using promptgen::ContextMode;
using promptgen::PromptHead;

void validate_config(const TrainConfig& c) {
    auto positive = [](const char* name, double v) {
        if (!(v > 0.0) || !std::isfinite(v))
            fail(ErrorCode::validation, std::string("train config: ") + name + " must be positive, got " + format_float(v));
    };
    positive("lr", c.lr);
    positive("warmup_lr", c.warmup_lr);
    positive("temperature", c.temperature);
    if (c.epochs < 1) fail(ErrorCode::validation, "train config: epochs must be at least 1");
    if (c.batch_size < 1) fail(ErrorCode::validation, "train config: batch_size must be at least 1");
    if (c.shots < 1) fail(ErrorCode::validation, "train config: shots must be at least 1");
    if (c.warmup_epochs > c.epochs) fail(ErrorCode::validation, "train config: warmup_epochs exceeds epochs");
    if (c.momentum < 0.0 || c.momentum >= 1.0) fail(ErrorCode::validation, "train config: momentum must be in [0, 1)");
    if (c.weight_decay < 0.0) fail(ErrorCode::validation, "train config: weight_decay must be nonnegative");
    if (c.heads < 1 || c.m < 1) fail(ErrorCode::validation, "train config: heads and m must be at least 1");
}

TrainConfig config_from_kv(const KvDocument& doc, TrainConfig c) {
    auto u32 = [&](const std::string& key) {
        const auto v = doc.get_int(key);
        if (v < 0 || v > 0xFFFFFFFFLL) fail(ErrorCode::validation, "config key '" + key + "' out of range");
        return static_cast<std::uint32_t>(v);
    };
    for (const auto& [key, value] : doc.entries()) {
        if (key == "epochs") c.epochs = u32(key);
        else if (key == "batch_size") c.batch_size = u32(key);
        else if (key == "lr") c.lr = doc.get_double(key);
        else if (key == "warmup_lr") c.warmup_lr = doc.get_double(key);
        else if (key == "warmup_epochs") c.warmup_epochs = u32(key);
        else if (key == "temperature") c.temperature = doc.get_double(key);
        else if (key == "shots") c.shots = u32(key);
        else if (key == "seed") c.seed = doc.get_u64(key);
        else if (key == "mode") c.mode = promptgen::parse_context_mode(value);
        else if (key == "momentum") c.momentum = doc.get_double(key);
        else if (key == "weight_decay") c.weight_decay = doc.get_double(key);
        else if (key == "heads") c.heads = u32(key);
        else if (key == "m") c.m = u32(key);
        else fail(ErrorCode::validation, "unknown train config key '" + key + "'");
    }
    validate_config(c);
    return c;
}

KvDocument config_to_kv(const TrainConfig& c) {
    KvDocument doc;
    doc.set("epochs", std::int64_t{c.epochs});
    doc.set("batch_size", std::int64_t{c.batch_size});
    doc.set("lr", c.lr);
    doc.set("warmup_lr", c.warmup_lr);
    doc.set("warmup_epochs", std::int64_t{c.warmup_epochs});
    doc.set("temperature", c.temperature);
    doc.set("shots", std::int64_t{c.shots});
    doc.set("seed", std::to_string(c.seed));
    doc.set("mode", std::string(promptgen::context_mode_name(c.mode)));
    doc.set("momentum", c.momentum);
    doc.set("weight_decay", c.weight_decay);
    doc.set("heads", std::int64_t{c.heads});
    doc.set("m", std::int64_t{c.m});
    return doc;
}

double lr_at(std::uint32_t epoch, const TrainConfig& c) {
    if (epoch < c.warmup_epochs) return c.warmup_lr;
    if (c.epochs <= c.warmup_epochs) return c.lr;
    const double progress = static_cast<double>(epoch - c.warmup_epochs) / static_cast<double>(c.epochs - c.warmup_epochs);
    return c.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::size_t LabelSpace::index_of(std::uint32_t class_id) const {
    for (std::size_t i = 0; i < class_ids.size(); ++i)
        if (class_ids[i] == class_id) return i;
    return class_ids.size();
}

LabelSpace make_label_space(const featio::DatasetManifest& manifest, std::span<const std::uint32_t> class_ids) {
    if (class_ids.empty()) fail(ErrorCode::protocol, "label space of '" + manifest.dataset_name + "' is empty");
    LabelSpace ls;
    std::set<std::uint32_t> seen;
    for (auto id : class_ids) {
        if (id >= manifest.class_count())
            fail(ErrorCode::index, "class id " + std::to_string(id) + " outside '" + manifest.dataset_name + "'");
        if (!seen.insert(id).second) fail(ErrorCode::protocol, "class id " + std::to_string(id) + " listed twice");
        ls.class_ids.push_back(id);
        ls.tokens.push_back(manifest.class_token_ids[id]);
    }
    return ls;
}

Tensor class_embeddings(const Tensor& context, const LabelSpace& labels, const textenc::TextEncoderWeights& weights) {
    std::vector<Tensor> rows(labels.size());
    parallel_for(labels.size(), [&](std::size_t y) {
        rows[y] = textenc::encode(textenc::assemble_prompt(labels.tokens[y], context, weights), weights);
    });
    return concat_rows(rows);
}

Tensor logits_from_embeddings(const Tensor& class_embeds, std::span<const float> global_embed, double temperature) {
    if (class_embeds.rank() != 2 || class_embeds.dim(1) != global_embed.size())
        fail(ErrorCode::shape, "class_logits: global embedding of length " + std::to_string(global_embed.size()) +
                                   " against class embeddings " + shape_str(class_embeds.shape()));
    const Tensor g = l2_normalize_rows(Tensor::constant({1, global_embed.size()}, {global_embed.begin(), global_embed.end()}));
    return scale(matmul(g, transpose(l2_normalize_rows(class_embeds))), static_cast<float>(1.0 / temperature));
}

Tensor class_logits(const Tensor& context, std::span<const float> global_embed, const LabelSpace& labels,
                    const textenc::TextEncoderWeights& weights, double temperature) {
    return logits_from_embeddings(class_embeddings(context, labels, weights), global_embed, temperature);
}

Tensor loss_batch(std::span<const FeatureRecord> records, const PromptHead& head, const textenc::TextEncoderWeights& weights,
                  const LabelSpace& labels, double temperature, ContextMode mode) {
    if (records.empty()) fail(ErrorCode::invalid_argument, "loss_batch: empty batch");
    std::vector<std::size_t> targets;
    for (const auto& r : records) {
        const std::size_t t = labels.index_of(r.class_id);
        if (t == labels.size())
            fail(ErrorCode::protocol, "record '" + r.image_id + "' has class " + std::to_string(r.class_id) +
                                          ", outside the training label space");
        targets.push_back(t);
    }
    std::vector<Tensor> rows(records.size());
    parallel_for(records.size(), [&](std::size_t i) {
        const Tensor context = promptgen::generate_context(records[i], head, mode);
        rows[i] = class_logits(context, records[i].global_embed, labels, weights, temperature);
    });
    return cross_entropy(concat_rows(rows), targets);
}

void sgd_step(std::span<const std::pair<std::string, Tensor*>> params, const SgdOptions& o, SgdState* state) {
    for (const auto& [name, t] : params)
        if (!t->has_grad()) fail(ErrorCode::contract, "sgd_step: parameter '" + name + "' has no gradient");
    const bool use_momentum = o.momentum > 0.0;
    if (use_momentum && !state) fail(ErrorCode::contract, "sgd_step: momentum needs an SgdState");
    if (use_momentum && state->velocity.empty()) {
        for (const auto& [name, t] : params) state->velocity.emplace_back(t->numel(), 0.0f);
    }
    const float lr = static_cast<float>(o.lr);
    const float wd = static_cast<float>(o.weight_decay);
    const float mu = static_cast<float>(o.momentum);
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& t = *params[p].second;
        auto w = t.mutable_data();
        const auto g = t.grad();
        for (std::size_t i = 0; i < w.size(); ++i) {
            float step = g[i];
            if (wd != 0.0f) step += wd * w[i];
            if (use_momentum) {
                float& v = state->velocity[p][i];
                v = mu * v + step;
                step = v;
            }
            w[i] -= lr * step;
        }
        t.clear_grad();
    }
}

void sgd_step(PromptHead& head, const SgdOptions& options, SgdState* state) {
    const auto params = head.parameters();
    sgd_step(std::span<const std::pair<std::string, Tensor*>>(params), options, state);
}

PromptHead initial_head(const TrainConfig& config, const featio::DatasetManifest& manifest,
                        const textenc::TextEncoderWeights& weights) {
    if (manifest.d_clip != weights.config.embed_out_dim)
        fail(ErrorCode::validation, "dataset '" + manifest.dataset_name + "' has d_clip " + std::to_string(manifest.d_clip) +
                                        " but the text encoder projects to " + std::to_string(weights.config.embed_out_dim));
    promptgen::HeadConfig hc;
    hc.d_vis = manifest.d_vis;
    hc.d_cap = manifest.d_cap;
    hc.d = weights.config.width;
    hc.heads = config.heads;
    hc.m = config.m;
    const auto ids = promptgen::template_ids_for(weights.config, hc.m);
    PromptHead head = promptgen::init_head(hc, promptgen::init_query_tokens(weights, ids), config.seed);
    head.mode = config.mode;
    return head;
}

TrainState train(const featio::Dataset& dataset, const featio::SplitSpec& split, const TrainConfig& config,
                 const textenc::TextEncoderWeights& weights, const ProgressFn& progress) {
    validate_config(config);
    featio::check_split(split, dataset.manifest());
    if (split.train_record_ids.empty()) fail(ErrorCode::split, "train: the split's training pool is empty");
    const LabelSpace labels = make_label_space(dataset.manifest(), split.base_class_ids);

    std::vector<FeatureRecord> pool;
    pool.reserve(split.train_record_ids.size());
    for (auto id : split.train_record_ids) pool.push_back(dataset.record(id));

    TrainState state;
    state.head = initial_head(config, dataset.manifest(), weights);
    Rng order_rng(config.seed ^ 0xD1B54A32D192ED03ULL);
    SgdState sgd;
    std::vector<std::size_t> order(pool.size());
    std::vector<FeatureRecord> batch;
    for (std::uint32_t epoch = 0; epoch < config.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        shuffle(std::span<std::size_t>(order), order_rng);
        const double lr = lr_at(epoch, config);
        for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
            const std::size_t end = std::min(order.size(), begin + config.batch_size);
            batch.clear();
            for (std::size_t i = begin; i < end; ++i) batch.push_back(pool[order[i]]);
            const Tensor loss = loss_batch(batch, state.head, weights, labels, config.temperature, config.mode);
            const double value = loss.item();
            if (!std::isfinite(value))
                fail(ErrorCode::internal, "train: non-finite loss at step " + std::to_string(state.step));
            backward(loss);
            for (auto& [name, t] : state.head.parameters())
                if (!t->has_grad()) t->zero_grad();
            sgd_step(state.head, {lr, config.momentum, config.weight_decay}, &sgd);
            LogEntry entry{state.step, epoch, lr, value};
            state.log.push_back(entry);
            ++state.step;
            if (progress) progress(entry);
        }
    }
    state.rng_state = order_rng.state();
    return state;
}

std::string format_log(std::span<const LogEntry> log) {
    std::ostringstream out;
    for (const auto& e : log)
        out << e.step << '\t' << e.epoch << '\t' << format_float(e.lr) << '\t' << format_float(e.loss) << '\n';
    return out.str();
}

void write_log(std::span<const LogEntry> log, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) fail(ErrorCode::io, "cannot write " + file.string());
    out << format_log(log);
    if (!out) fail(ErrorCode::io, "failed writing " + file.string());
}

std::vector<std::pair<std::string, bool>> gradient_activity(const PromptHead& head, const FeatureRecord& record,
                                                            const textenc::TextEncoderWeights& weights,
                                                            const LabelSpace& labels, double temperature, ContextMode mode) {
    PromptHead probe = head.clone();
    backward(loss_batch(std::span<const FeatureRecord>(&record, 1), probe, weights, labels, temperature, mode));
    std::vector<std::pair<std::string, bool>> out;
    for (const auto& [name, t] : probe.parameters()) {
        bool active = false;
        if (t->has_grad())
            for (float g : t->grad()) active = active || g != 0.0f;
        out.emplace_back(name, active);
    }
    return out;
}

} // namespace bimors::train
