#include "bimors/bimors.h"

#include "check/gradcheck.hpp"
#include "textenc/parity.hpp"
#include "common/error.hpp"
#include "common/parallel.hpp"
#include "common/sha256.hpp"
#include "eval/harness.hpp"
#include "featio/records.hpp"
#include "featio/split.hpp"
#include "promptgen/prompt_head.hpp"
#include "synth/synthetic.hpp"
#include "train/trainer.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <new>
#include <string>

using namespace bimors;

struct bimors_encoder {
    textenc::TextEncoderWeights weights;
};

struct bimors_dataset {
    featio::Dataset dataset;
};

struct bimors_split {
    featio::SplitSpec spec;
};

struct bimors_head {
    promptgen::PromptHead head;
};

struct bimors_train_log {
    std::vector<train::LogEntry> entries;
};

struct bimors_report {
    std::string text;
    std::string kv_text;
    KvDocument kv;
    std::string basename;
};

namespace {

thread_local std::string g_last_error;

template <typename Fn>
int guarded(Fn&& fn) noexcept {
    try {
        fn();
        return BIMORS_OK;
    } catch (const Error& e) {
        g_last_error = e.what();
        return static_cast<int>(e.code());
    } catch (const std::filesystem::filesystem_error& e) {
        g_last_error = e.what();
        return BIMORS_E_IO;
    } catch (const std::bad_alloc&) {
        g_last_error = "out of memory";
        return BIMORS_E_INTERNAL;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return BIMORS_E_INTERNAL;
    } catch (...) {
        g_last_error = "unknown exception";
        return BIMORS_E_INTERNAL;
    }
}

template <typename T>
void require(const T* p, const char* what) {
    if (!p) fail(ErrorCode::invalid_argument, std::string(what) + " is NULL");
}

featio::SplitMode to_mode(int regime) {
    switch (regime) {
    case BIMORS_B2N: return featio::SplitMode::b2n;
    case BIMORS_CD: return featio::SplitMode::cd;
    case BIMORS_SSMT: return featio::SplitMode::ssmt;
    }
    fail(ErrorCode::invalid_argument, "unknown regime " + std::to_string(regime));
}

int from_mode(featio::SplitMode mode) {
    switch (mode) {
    case featio::SplitMode::b2n: return BIMORS_B2N;
    case featio::SplitMode::cd: return BIMORS_CD;
    case featio::SplitMode::ssmt: return BIMORS_SSMT;
    }
    return -1;
}

promptgen::ContextMode to_context(int mode) {
    if (mode < BIMORS_MODE_FULL || mode > BIMORS_MODE_NO_CA) fail(ErrorCode::invalid_argument, "unknown mode " + std::to_string(mode));
    return static_cast<promptgen::ContextMode>(mode);
}

train::TrainConfig to_config(const bimors_train_config& c) {
    train::TrainConfig t;
    t.epochs = c.epochs;
    t.batch_size = c.batch_size;
    t.lr = c.lr;
    t.warmup_lr = c.warmup_lr;
    t.warmup_epochs = c.warmup_epochs;
    t.temperature = c.temperature;
    t.shots = c.shots;
    t.seed = c.seed;
    t.mode = to_context(c.mode);
    t.momentum = c.momentum;
    t.weight_decay = c.weight_decay;
    t.heads = c.heads;
    t.m = c.m;
    return t;
}

bimors_train_config from_config(const train::TrainConfig& t) {
    bimors_train_config c;
    c.epochs = t.epochs;
    c.batch_size = t.batch_size;
    c.lr = t.lr;
    c.warmup_lr = t.warmup_lr;
    c.warmup_epochs = t.warmup_epochs;
    c.temperature = t.temperature;
    c.shots = t.shots;
    c.seed = t.seed;
    c.mode = static_cast<int>(t.mode);
    c.momentum = t.momentum;
    c.weight_decay = t.weight_decay;
    c.heads = t.heads;
    c.m = t.m;
    return c;
}

bimors_report* make_report(std::string text, KvDocument kv, std::string basename) {
    auto* r = new bimors_report;
    r->text = std::move(text);
    r->kv_text = kv.str();
    r->kv = std::move(kv);
    r->basename = std::move(basename);
    return r;
}

std::vector<const promptgen::PromptHead*> unwrap_heads(const bimors_head* const* heads, std::size_t n) {
    require(heads, "heads");
    std::vector<const promptgen::PromptHead*> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(heads[i] ? &heads[i]->head : nullptr);
    return out;
}

std::string seed_suffix(const uint64_t* seeds, std::size_t n) {
    std::string s = "_seed";
    for (std::size_t i = 0; i < n; ++i) s += (i ? "-" : "") + std::to_string(seeds[i]);
    return s;
}

} // namespace

extern "C" {

const char* bimors_version(void) { return "0.1.0"; }

const char* bimors_status_name(int status) { return error_code_name(static_cast<ErrorCode>(status)); }

const char* bimors_last_error(void) { return g_last_error.c_str(); }

void bimors_set_threads(unsigned threads) { set_thread_count(threads); }

unsigned bimors_threads(void) { return static_cast<unsigned>(thread_count()); }

int bimors_sha256_file(const char* path, char* out) {
    return guarded([&] {
        require(path, "path");
        require(out, "out");
        const std::string h = sha256_file(path);
        std::memcpy(out, h.c_str(), h.size() + 1);
    });
}

int bimors_encoder_load(const char* weights_path, const char* config_path, bimors_encoder** out) {
    return guarded([&] {
        require(weights_path, "weights_path");
        require(config_path, "config_path");
        require(out, "out");
        *out = nullptr;
        const auto cfg = textenc::load_config(config_path);
        *out = new bimors_encoder{textenc::load_weights(weights_path, cfg)};
    });
}

int bimors_encoder_save(const bimors_encoder* encoder, const char* weights_path, const char* config_path) {
    return guarded([&] {
        require(encoder, "encoder");
        require(weights_path, "weights_path");
        require(config_path, "config_path");
        textenc::save_weights(encoder->weights, weights_path);
        textenc::save_config(encoder->weights.config, config_path);
    });
}

int bimors_encoder_random(const bimors_encoder_dims* dims, uint64_t seed, bimors_encoder** out) {
    return guarded([&] {
        require(dims, "dims");
        require(out, "out");
        *out = nullptr;
        if (dims->vocab_size < 8) fail(ErrorCode::validation, "random encoder needs a vocabulary of at least 8");
        auto cfg = synth::tiny_encoder_config(dims->width, dims->layers, dims->heads, dims->vocab_size, dims->context_length);
        if (dims->embed_out_dim) cfg.embed_out_dim = dims->embed_out_dim;
        textenc::validate_config(cfg);
        *out = new bimors_encoder{synth::random_text_encoder(cfg, seed)};
    });
}

int bimors_encoder_dims_of(const bimors_encoder* encoder, bimors_encoder_dims* out) {
    return guarded([&] {
        require(encoder, "encoder");
        require(out, "out");
        const auto& c = encoder->weights.config;
        out->vocab_size = static_cast<uint32_t>(c.vocab_size);
        out->context_length = static_cast<uint32_t>(c.context_length);
        out->width = static_cast<uint32_t>(c.width);
        out->heads = static_cast<uint32_t>(c.heads);
        out->layers = static_cast<uint32_t>(c.layers);
        out->embed_out_dim = static_cast<uint32_t>(c.embed_out_dim);
    });
}

void bimors_encoder_free(bimors_encoder* encoder) { delete encoder; }

int bimors_dataset_open(const char* dir, bimors_dataset** out) {
    return guarded([&] {
        require(dir, "dir");
        require(out, "out");
        *out = nullptr;
        *out = new bimors_dataset{featio::Dataset::open(dir)};
    });
}

int bimors_dataset_info_of(const bimors_dataset* dataset, bimors_dataset_info* out) {
    return guarded([&] {
        require(dataset, "dataset");
        require(out, "out");
        const auto& m = dataset->dataset.manifest();
        out->name = m.dataset_name.c_str();
        out->records = dataset->dataset.size();
        out->classes = static_cast<uint32_t>(m.class_count());
        out->shared_classes = static_cast<uint32_t>(m.shared_class_ids.size());
        out->d_vis = m.d_vis;
        out->d_clip = m.d_clip;
        out->d_cap = m.d_cap;
        out->blob_sha256 = m.blob_sha256.c_str();
    });
}

void bimors_dataset_free(bimors_dataset* dataset) { delete dataset; }

void bimors_synthetic_spec_default(bimors_synthetic_spec* spec) {
    if (!spec) return;
    static const synth::SyntheticSpec d;
    spec->name = "synthetic";
    spec->classes = static_cast<uint32_t>(d.classes);
    spec->records_per_class = static_cast<uint32_t>(d.records_per_class);
    spec->visual_tokens = static_cast<uint32_t>(d.visual_tokens);
    spec->caption_tokens = static_cast<uint32_t>(d.caption_tokens);
    spec->d_vis = static_cast<uint32_t>(d.d_vis);
    spec->d_cap = static_cast<uint32_t>(d.d_cap);
    spec->class_tokens = static_cast<uint32_t>(d.class_tokens);
    spec->feature_noise = d.feature_noise;
    spec->embed_noise = d.embed_noise;
    spec->world_seed = d.world_seed;
    spec->sample_seed = d.sample_seed;
    spec->domain_shift = d.domain_shift;
    spec->alternate_captions = 0;
    spec->shared_class_ids = nullptr;
    spec->shared_count = 0;
}

int bimors_synthetic_write(const bimors_encoder* encoder, const bimors_synthetic_spec* spec, const char* out_dir) {
    return guarded([&] {
        require(encoder, "encoder");
        require(spec, "spec");
        require(out_dir, "out_dir");
        synth::SyntheticSpec s;
        if (spec->name) s.name = spec->name;
        s.classes = spec->classes;
        s.records_per_class = spec->records_per_class;
        s.visual_tokens = spec->visual_tokens;
        s.caption_tokens = spec->caption_tokens;
        s.d_vis = spec->d_vis;
        s.d_cap = spec->d_cap;
        s.class_tokens = spec->class_tokens;
        s.feature_noise = spec->feature_noise;
        s.embed_noise = spec->embed_noise;
        s.world_seed = spec->world_seed;
        s.sample_seed = spec->sample_seed;
        s.domain_shift = spec->domain_shift;
        s.alternate_captions = spec->alternate_captions != 0;
        if (spec->shared_count) {
            require(spec->shared_class_ids, "shared_class_ids");
            s.shared_class_ids.assign(spec->shared_class_ids, spec->shared_class_ids + spec->shared_count);
        }
        const auto data = synth::make_synthetic(s, encoder->weights);
        featio::write_dataset(data.manifest, data.records, out_dir);
    });
}

int bimors_split_make(const bimors_dataset* dataset, int regime, uint64_t seed, uint32_t shots, const char* target_name,
                      bimors_split** out) {
    return guarded([&] {
        require(dataset, "dataset");
        require(out, "out");
        *out = nullptr;
        const auto mode = to_mode(regime);
        const auto& ds = dataset->dataset;
        featio::SplitSpec s = mode == featio::SplitMode::b2n
                                  ? featio::make_b2n_split(ds, seed, shots)
                                  : featio::make_transfer_split(ds, mode, seed, shots,
                                                                target_name ? target_name : ds.manifest().dataset_name);
        *out = new bimors_split{std::move(s)};
    });
}

int bimors_split_load(const char* path, bimors_split** out) {
    return guarded([&] {
        require(path, "path");
        require(out, "out");
        *out = nullptr;
        *out = new bimors_split{featio::load_split(path)};
    });
}

int bimors_split_save(const bimors_split* split, const char* path) {
    return guarded([&] {
        require(split, "split");
        require(path, "path");
        featio::save_split(split->spec, path);
    });
}

int bimors_split_regime(const bimors_split* split) { return split ? from_mode(split->spec.mode) : -1; }

uint64_t bimors_split_seed(const bimors_split* split) { return split ? split->spec.seed : 0; }

size_t bimors_split_train_size(const bimors_split* split) { return split ? split->spec.train_record_ids.size() : 0; }

void bimors_split_free(bimors_split* split) { delete split; }

void bimors_train_config_default(bimors_train_config* config) {
    if (config) *config = from_config(train::TrainConfig{});
}

int bimors_train_config_load(const char* path, bimors_train_config* config) {
    return guarded([&] {
        require(path, "path");
        require(config, "config");
        *config = from_config(train::config_from_kv(KvDocument::load(path), to_config(*config)));
    });
}

int bimors_train_config_save(const bimors_train_config* config, const char* path) {
    return guarded([&] {
        require(config, "config");
        require(path, "path");
        train::config_to_kv(to_config(*config)).save(path);
    });
}

int bimors_train_config_validate(const bimors_train_config* config) {
    return guarded([&] {
        require(config, "config");
        train::validate_config(to_config(*config));
    });
}

const char* bimors_mode_name(int mode) {
    if (mode < BIMORS_MODE_FULL || mode > BIMORS_MODE_NO_CA) return "?";
    return promptgen::context_mode_name(static_cast<promptgen::ContextMode>(mode));
}

int bimors_mode_parse(const char* text, int* mode) {
    return guarded([&] {
        require(text, "text");
        require(mode, "mode");
        *mode = static_cast<int>(promptgen::parse_context_mode(text));
    });
}

int bimors_train(const bimors_dataset* dataset, const bimors_split* split, const bimors_train_config* config,
                 const bimors_encoder* encoder, bimors_progress_fn progress, void* user, bimors_head** head,
                 bimors_train_log** log) {
    return guarded([&] {
        require(dataset, "dataset");
        require(split, "split");
        require(config, "config");
        require(encoder, "encoder");
        require(head, "head");
        *head = nullptr;
        if (log) *log = nullptr;
        train::ProgressFn fn;
        if (progress)
            fn = [&](const train::LogEntry& e) {
                const bimors_log_entry c{e.step, e.epoch, e.lr, e.loss};
                progress(&c, user);
            };
        auto state = train::train(dataset->dataset, split->spec, to_config(*config), encoder->weights, fn);
        *head = new bimors_head{std::move(state.head)};
        if (log) *log = new bimors_train_log{std::move(state.log)};
    });
}

size_t bimors_train_log_size(const bimors_train_log* log) { return log ? log->entries.size() : 0; }

int bimors_train_log_entry(const bimors_train_log* log, size_t index, bimors_log_entry* out) {
    return guarded([&] {
        require(log, "log");
        require(out, "out");
        if (index >= log->entries.size()) fail(ErrorCode::index, "log entry " + std::to_string(index) + " out of range");
        const auto& e = log->entries[index];
        *out = bimors_log_entry{e.step, e.epoch, e.lr, e.loss};
    });
}

int bimors_train_log_save(const bimors_train_log* log, const char* path) {
    return guarded([&] {
        require(log, "log");
        require(path, "path");
        train::write_log(log->entries, path);
    });
}

void bimors_train_log_free(bimors_train_log* log) { delete log; }

int bimors_head_save(const bimors_head* head, const char* path) {
    return guarded([&] {
        require(head, "head");
        require(path, "path");
        promptgen::save_head(head->head, path);
    });
}

int bimors_head_load(const char* path, bimors_head** out) {
    return guarded([&] {
        require(path, "path");
        require(out, "out");
        *out = nullptr;
        *out = new bimors_head{promptgen::load_head(path)};
    });
}

int bimors_head_mode(const bimors_head* head) { return head ? static_cast<int>(head->head.mode) : -1; }

uint64_t bimors_head_param_count(const bimors_head* head) { return head ? promptgen::parameter_count(head->head) : 0; }

void bimors_head_free(bimors_head* head) { delete head; }

int bimors_param_count(uint32_t d_vis, uint32_t d_cap, uint32_t d, uint32_t heads, uint32_t m, uint64_t* out) {
    return guarded([&] {
        require(out, "out");
        if (heads == 0 || d == 0 || d % heads != 0)
            fail(ErrorCode::validation, "d " + std::to_string(d) + " not divisible by heads " + std::to_string(heads));
        *out = promptgen::parameter_count_formula(promptgen::HeadConfig{d_vis, d_cap, d, heads, m});
    });
}

int bimors_eval_b2n(const bimors_dataset* dataset, const bimors_split* const* splits, const bimors_head* const* heads,
                    const uint64_t* seeds, size_t seed_count, const bimors_encoder* encoder, double temperature,
                    const char* label, bimors_report** out) {
    return guarded([&] {
        require(dataset, "dataset");
        require(splits, "splits");
        require(seeds, "seeds");
        require(encoder, "encoder");
        require(out, "out");
        *out = nullptr;
        std::vector<featio::SplitSpec> specs;
        for (std::size_t i = 0; i < seed_count; ++i) {
            require(splits[i], "split");
            specs.push_back(splits[i]->spec);
        }
        const auto report = eval::report_b2n(dataset->dataset, specs, unwrap_heads(heads, seed_count),
                                             std::span<const std::uint64_t>(seeds, seed_count), encoder->weights,
                                             temperature, label ? label : "");
        *out = make_report(eval::format_table(report), eval::report_to_kv(report), eval::report_basename(report));
    });
}

int bimors_eval_transfer(const bimors_dataset* const* targets, size_t target_count, int regime,
                         const bimors_head* const* heads, const uint64_t* seeds, size_t seed_count,
                         const bimors_encoder* encoder, double temperature, const char* label, bimors_report** out) {
    return guarded([&] {
        require(targets, "targets");
        require(seeds, "seeds");
        require(encoder, "encoder");
        require(out, "out");
        *out = nullptr;
        const auto mode = to_mode(regime);
        if (mode == featio::SplitMode::b2n) fail(ErrorCode::protocol, "transfer evaluation takes CD or SSMT");
        std::vector<const featio::Dataset*> ts;
        for (std::size_t i = 0; i < target_count; ++i) {
            require(targets[i], "target");
            ts.push_back(&targets[i]->dataset);
        }
        const auto report = eval::report_transfer(ts, mode, unwrap_heads(heads, seed_count),
                                                  std::span<const std::uint64_t>(seeds, seed_count), encoder->weights,
                                                  temperature, label ? label : "");
        *out = make_report(eval::format_table(report), eval::report_to_kv(report), eval::report_basename(report));
    });
}

int bimors_ablate(const bimors_dataset* dataset, const bimors_split* split, const bimors_train_config* config,
                  const uint64_t* seeds, size_t seed_count, const bimors_encoder* encoder, const bimors_dataset* alternate,
                  bimors_report** out) {
    return guarded([&] {
        require(dataset, "dataset");
        require(split, "split");
        require(config, "config");
        require(seeds, "seeds");
        require(encoder, "encoder");
        require(out, "out");
        *out = nullptr;
        const auto suite = eval::run_ablation_suite(dataset->dataset, split->spec, to_config(*config),
                                                    std::span<const std::uint64_t>(seeds, seed_count), encoder->weights,
                                                    alternate ? &alternate->dataset : nullptr);
        const std::string base = "ablation_" + std::string(featio::split_mode_name(split->spec.mode)) + "_" +
                                 dataset->dataset.manifest().dataset_name + seed_suffix(seeds, seed_count);
        *out = make_report(eval::format_ablation(suite), eval::ablation_to_kv(suite), base);
    });
}

int bimors_gradcheck(double tolerance, const char* corrupt_op, bimors_report** out, int* passed) {
    return guarded([&] {
        require(out, "out");
        *out = nullptr;
        check::GradcheckOptions o;
        if (tolerance >= 0.0) o.tolerance = tolerance;
        if (corrupt_op) o.corrupt_op = corrupt_op;
        const auto r = check::run_gradcheck(o);
        KvDocument kv;
        kv.set("kind", std::string("bimors.gradcheck"));
        kv.set("passed", std::int64_t{r.passed()});
        kv.set("seconds", r.seconds);
        for (const auto& row : r.rows) {
            kv.set("error." + row.name, row.worst_error);
            kv.set("tolerance." + row.name, row.tolerance);
        }
        std::string failing;
        for (const auto& f : r.failing()) failing += (failing.empty() ? "" : ",") + f;
        kv.set("failing", failing);
        if (passed) *passed = r.passed() ? 1 : 0;
        *out = make_report(check::format_gradcheck(r), std::move(kv), "gradcheck");
    });
}

int bimors_reference_write(const bimors_encoder* encoder, size_t count, uint64_t seed, const char* path) {
    return guarded([&] {
        require(encoder, "encoder");
        require(path, "path");
        if (count == 0) fail(ErrorCode::invalid_argument, "bimors_reference_write: count must be positive");
        textenc::save_references(textenc::make_references(encoder->weights, count, seed), path);
    });
}

int bimors_parity(const bimors_encoder* encoder, const char* reference_path, double threshold, bimors_report** out,
                  int* passed) {
    return guarded([&] {
        require(encoder, "encoder");
        require(reference_path, "reference_path");
        require(out, "out");
        *out = nullptr;
        const auto r = textenc::check_parity(textenc::load_references(reference_path), encoder->weights, threshold);
        KvDocument kv;
        kv.set("kind", std::string("bimors.parity"));
        kv.set("passed", std::int64_t{r.passed()});
        kv.set("threshold", r.threshold);
        kv.set("count", static_cast<std::int64_t>(r.cosine.size()));
        kv.set("worst_cosine", r.worst());
        for (std::size_t i = 0; i < r.cosine.size(); ++i) kv.set("cosine." + std::to_string(i), r.cosine[i]);
        if (passed) *passed = r.passed() ? 1 : 0;
        *out = make_report(textenc::format_parity(r), std::move(kv), "parity");
    });
}

const char* bimors_report_text(const bimors_report* report) { return report ? report->text.c_str() : ""; }

const char* bimors_report_kv(const bimors_report* report) { return report ? report->kv_text.c_str() : ""; }

const char* bimors_report_basename(const bimors_report* report) { return report ? report->basename.c_str() : ""; }

int bimors_report_value(const bimors_report* report, const char* key, double* out) {
    return guarded([&] {
        require(report, "report");
        require(key, "key");
        require(out, "out");
        if (!report->kv.has(key)) fail(ErrorCode::index, std::string("report has no key '") + key + "'");
        *out = report->kv.get_double(key);
    });
}

int bimors_report_write(const bimors_report* report, const char* dir) {
    return guarded([&] {
        require(report, "report");
        require(dir, "dir");
        const std::filesystem::path d(dir);
        std::filesystem::create_directories(d);
        const auto txt = d / (report->basename + ".txt");
        std::ofstream out(txt, std::ios::binary);
        out << report->text;
        if (!out) fail(ErrorCode::io, "cannot write " + txt.string());
        out.close();
        report->kv.save(d / (report->basename + ".kv"));
    });
}

void bimors_report_free(bimors_report* report) { delete report; }

} // extern "C"
