// bimors: command-line driver over the C API.
//
// Exit codes: 0 success, 1 failed check or runtime error, 2 usage or
// configuration error.

#include "bimors/bimors.h"

#include "CLI11.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <algorithm>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace fs = std::filesystem;

namespace {

constexpr int kExitCheck = 1;
constexpr int kExitUsage = 2;

struct CliError {
    int exit_code;
    std::string message;
};

void check(int status, const std::string& what, int exit_code = kExitCheck) {
    if (status == BIMORS_OK) return;
    throw CliError{exit_code, what + ": " + bimors_last_error() + " [" + bimors_status_name(status) + "]"};
}

template <typename T, void (*Free)(T*)>
struct Deleter {
    void operator()(T* p) const { Free(p); }
};
using Encoder = std::unique_ptr<bimors_encoder, Deleter<bimors_encoder, bimors_encoder_free>>;
using Dataset = std::unique_ptr<bimors_dataset, Deleter<bimors_dataset, bimors_dataset_free>>;
using Split = std::unique_ptr<bimors_split, Deleter<bimors_split, bimors_split_free>>;
using Head = std::unique_ptr<bimors_head, Deleter<bimors_head, bimors_head_free>>;
using Log = std::unique_ptr<bimors_train_log, Deleter<bimors_train_log, bimors_train_log_free>>;
using Report = std::unique_ptr<bimors_report, Deleter<bimors_report, bimors_report_free>>;

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

std::string join(const std::vector<std::string>& parts, const char* sep = ",") {
    std::string s;
    for (std::size_t i = 0; i < parts.size(); ++i) s += (i ? sep : "") + parts[i];
    return s;
}

std::string join_u64(const std::vector<std::uint64_t>& v) {
    std::vector<std::string> s;
    for (auto x : v) s.push_back(std::to_string(x));
    return join(s);
}

std::string sha256_of(const fs::path& p) {
    char hex[65];
    check(bimors_sha256_file(p.string().c_str(), hex), "hashing " + p.string());
    return hex;
}

// What a command read, what it wrote, and how long it took.
class RunManifest {
public:
    RunManifest(std::string command, int argc, char** argv) : command_(std::move(command)), start_(Clock::now()) {
        for (int i = 0; i < argc; ++i) argv_.push_back(argv[i]);
    }

    void flag(const std::string& name, const std::string& value) { flags_.emplace_back(name, value); }
    void config(const bimors_train_config& c, const std::string& file) {
        config_file_ = file;
        config_ = c;
    }
    void input(const std::string& name, const fs::path& path, const std::string& sha) { inputs_.push_back({name, path, sha}); }
    void seeds(const std::vector<std::uint64_t>& s) { seeds_ = s; }
    void artifact(const fs::path& path) { artifacts_.push_back(path); }

    fs::path write(const fs::path& dir) const {
        const fs::path file = dir / "run_manifest.txt";
        const double seconds = std::chrono::duration<double>(Clock::now() - start_).count();
        std::ostringstream out;
        out << "kind=bimors.run\n";
        out << "command=" << command_ << "\n";
        out << "argv=" << join(argv_, " ") << "\n";
        for (const auto& [k, v] : flags_) out << "flag." << k << "=" << v << "\n";
        if (config_) {
            out << "config_file=" << config_file_ << "\n";
            const auto& c = *config_;
            out << "config.epochs=" << c.epochs << "\nconfig.batch_size=" << c.batch_size << "\nconfig.lr=" << format_double(c.lr)
                << "\nconfig.warmup_lr=" << format_double(c.warmup_lr) << "\nconfig.warmup_epochs=" << c.warmup_epochs
                << "\nconfig.temperature=" << format_double(c.temperature) << "\nconfig.shots=" << c.shots
                << "\nconfig.mode=" << bimors_mode_name(c.mode) << "\nconfig.momentum=" << format_double(c.momentum)
                << "\nconfig.weight_decay=" << format_double(c.weight_decay) << "\nconfig.heads=" << c.heads
                << "\nconfig.m=" << c.m << "\n";
        }
        for (const auto& in : inputs_) {
            out << "input." << in.name << "=" << in.path.string() << "\n";
            if (!in.sha.empty()) out << "input." << in.name << ".sha256=" << in.sha << "\n";
        }
        if (!seeds_.empty()) out << "seeds=" << join_u64(seeds_) << "\n";
        out << "out_dir=" << dir.string() << "\n";
        out << "artifact_count=" << artifacts_.size() << "\n";
        for (const auto& a : artifacts_) out << "artifact." << fs::relative(a, dir).string() << "=" << sha256_of(a) << "\n";
        out << "threads=" << bimors_threads() << "\n";
        out << "wall_clock_seconds=" << format_double(seconds) << "\n";
        std::ofstream f(file, std::ios::binary);
        f << out.str();
        if (!f) throw CliError{kExitCheck, "cannot write " + file.string()};
        return file;
    }

private:
    using Clock = std::chrono::steady_clock;
    struct Input {
        std::string name;
        fs::path path;
        std::string sha;
    };
    std::string command_;
    Clock::time_point start_;
    std::vector<std::string> argv_;
    std::vector<std::pair<std::string, std::string>> flags_;
    std::string config_file_;
    std::optional<bimors_train_config> config_;
    std::vector<Input> inputs_;
    std::vector<std::uint64_t> seeds_;
    std::vector<fs::path> artifacts_;
};

// Options shared by the commands.
struct Options {
    std::vector<std::string> datasets;
    std::vector<std::string> targets;
    std::string encoder;
    std::string encoder_config;
    std::string out = "bimors_out";
    std::string config_file;
    std::string regime = "b2n";
    std::vector<std::uint64_t> seeds{1};
    std::vector<std::string> checkpoints;
    std::vector<std::string> splits;
    std::string alternate;
    std::string label;
    std::uint32_t shots = 16;
    std::optional<double> temperature;

    // train config flags; a --config file is applied on top
    std::optional<std::uint32_t> epochs, batch_size, warmup_epochs, heads, m;
    std::optional<double> lr, warmup_lr, momentum, weight_decay;
    std::string mode;

    // gradcheck
    std::optional<double> tolerance;
    std::string corrupt_op;

    // param-count
    std::uint32_t d_vis = 768, d_cap = 768, d = 512, pc_heads = 4, pc_m = 4;
    std::string checkpoint;

    // make-synthetic
    std::uint32_t classes = 5, records_per_class = 20, visual_tokens = 4, caption_tokens = 3, syn_d_vis = 12, syn_d_cap = 12,
                  class_tokens = 2;
    float feature_noise = 0.3f, embed_noise = 0.1f, domain_shift = 0.0f;
    std::uint64_t world_seed = 1, sample_seed = 1, encoder_seed = 1;
    bool alternate_captions = false;
    std::vector<std::uint32_t> shared;
    std::string name = "synthetic";
    std::uint32_t references = 0;

    // parity
    std::string reference;
    double threshold = 0.999;
    std::uint32_t width = 16, layers = 1, enc_heads = 2, vocab = 64, context_length = 16;
};

int parse_regime(const std::string& s) {
    if (s == "b2n" || s == "B2N") return BIMORS_B2N;
    if (s == "cd" || s == "CD") return BIMORS_CD;
    if (s == "ssmt" || s == "SSMT") return BIMORS_SSMT;
    throw CliError{kExitUsage, "--regime must be b2n, cd or ssmt, got '" + s + "'"};
}

std::string config_path_for(const Options& o) {
    if (!o.encoder_config.empty()) return o.encoder_config;
    return fs::path(o.encoder).replace_extension(".cfg").string();
}

Encoder load_encoder(const Options& o, RunManifest& run) {
    if (o.encoder.empty()) throw CliError{kExitUsage, "--encoder is required"};
    const std::string cfg = config_path_for(o);
    bimors_encoder* e = nullptr;
    check(bimors_encoder_load(o.encoder.c_str(), cfg.c_str(), &e), "loading encoder " + o.encoder);
    run.input("encoder", o.encoder, sha256_of(o.encoder));
    run.input("encoder_config", cfg, sha256_of(cfg));
    return Encoder(e);
}

Dataset open_dataset(const std::string& dir, const std::string& role, RunManifest& run) {
    bimors_dataset* d = nullptr;
    check(bimors_dataset_open(dir.c_str(), &d), "opening " + role + " " + dir);
    bimors_dataset_info info;
    check(bimors_dataset_info_of(d, &info), "reading " + dir);
    run.input(role, dir, info.blob_sha256);
    return Dataset(d);
}

const std::string& single_dataset(const Options& o) {
    if (o.datasets.empty()) throw CliError{kExitUsage, "--dataset is required"};
    return o.datasets.front();
}

// Flags first, then the --config file on top.
bimors_train_config resolve_config(const Options& o, RunManifest& run) {
    bimors_train_config c;
    bimors_train_config_default(&c);
    c.shots = o.shots;
    if (o.epochs) c.epochs = *o.epochs;
    if (o.batch_size) c.batch_size = *o.batch_size;
    if (o.warmup_epochs) c.warmup_epochs = *o.warmup_epochs;
    if (o.heads) c.heads = *o.heads;
    if (o.m) c.m = *o.m;
    if (o.lr) c.lr = *o.lr;
    if (o.warmup_lr) c.warmup_lr = *o.warmup_lr;
    if (o.momentum) c.momentum = *o.momentum;
    if (o.weight_decay) c.weight_decay = *o.weight_decay;
    if (o.temperature) c.temperature = *o.temperature;
    if (!o.mode.empty()) check(bimors_mode_parse(o.mode.c_str(), &c.mode), "--mode", kExitUsage);
    if (!o.config_file.empty()) {
        check(bimors_train_config_load(o.config_file.c_str(), &c), "--config " + o.config_file, kExitUsage);
        run.input("config", o.config_file, sha256_of(o.config_file));
    }
    check(bimors_train_config_validate(&c), "train config", kExitUsage);
    run.config(c, o.config_file);
    return c;
}

double temperature_of(const Options& o) {
    if (o.temperature) return *o.temperature;
    bimors_train_config c;
    bimors_train_config_default(&c);
    return c.temperature;
}

fs::path prepare_out(const Options& o) {
    std::error_code ec;
    fs::create_directories(o.out, ec);
    if (ec) throw CliError{kExitCheck, "cannot create output directory " + o.out + ": " + ec.message()};
    return fs::path(o.out);
}

void write_report(const bimors_report* r, const fs::path& dir, RunManifest& run) {
    check(bimors_report_write(r, dir.string().c_str()), "writing report");
    const std::string base = bimors_report_basename(r);
    run.artifact(dir / (base + ".txt"));
    run.artifact(dir / (base + ".kv"));
}

void finish(RunManifest& run, const fs::path& dir) {
    const auto file = run.write(dir);
    std::cout << "run manifest: " << file.string() << "\n";
}

std::string seed_tag(std::uint64_t s) { return "seed" + std::to_string(s); }

// ---- commands ----

int cmd_ingest_validate(const Options& o, RunManifest& run) {
    if (o.datasets.empty()) throw CliError{kExitUsage, "--dataset is required"};
    for (const auto& dir : o.datasets) {
        auto ds = open_dataset(dir, "dataset", run);
        bimors_dataset_info info;
        check(bimors_dataset_info_of(ds.get(), &info), "reading " + dir);
        std::cout << dir << ": ok  name=" << info.name << " records=" << info.records << " classes=" << info.classes
                  << " shared=" << info.shared_classes << " d_vis=" << info.d_vis << " d_cap=" << info.d_cap
                  << " d_clip=" << info.d_clip << " sha256=" << info.blob_sha256 << "\n";
    }
    return 0;
}

int cmd_train(const Options& o, RunManifest& run) {
    const auto& src = single_dataset(o);
    const int regime = parse_regime(o.regime);
    auto cfg = resolve_config(o, run);
    auto enc = load_encoder(o, run);
    auto ds = open_dataset(src, "dataset", run);
    std::vector<Dataset> targets;
    for (const auto& t : o.targets) targets.push_back(open_dataset(t, "target", run));
    const fs::path out = prepare_out(o);
    run.seeds(o.seeds);

    std::string target_name;
    if (!targets.empty()) {
        bimors_dataset_info info;
        check(bimors_dataset_info_of(targets.front().get(), &info), "target");
        target_name = info.name;
    }

    std::vector<Split> splits;
    std::vector<Head> heads;
    for (auto seed : o.seeds) {
        bimors_split* s = nullptr;
        check(bimors_split_make(ds.get(), regime, seed, cfg.shots, target_name.empty() ? nullptr : target_name.c_str(), &s),
              "making split");
        splits.emplace_back(s);
        const fs::path split_file = out / ("split_" + seed_tag(seed) + ".txt");
        check(bimors_split_save(s, split_file.string().c_str()), "saving split");
        run.artifact(split_file);

        bimors_train_config c = cfg;
        c.seed = seed;
        bimors_head* h = nullptr;
        bimors_train_log* l = nullptr;
        struct Progress {
            std::uint64_t seed;
        } progress{seed};
        auto on_step = [](const bimors_log_entry* e, void* user) {
            const auto* p = static_cast<const Progress*>(user);
            if (e->step % 50 == 0)
                std::fprintf(stderr, "seed %llu step %llu epoch %u lr %.3g loss %.5f\n",
                             static_cast<unsigned long long>(p->seed), static_cast<unsigned long long>(e->step), e->epoch,
                             e->lr, e->loss);
        };
        check(bimors_train(ds.get(), s, &c, enc.get(), on_step, &progress, &h, &l), "training seed " + std::to_string(seed));
        heads.emplace_back(h);
        Log log(l);
        const fs::path head_file = out / ("head_" + seed_tag(seed) + ".bmtw");
        const fs::path log_file = out / ("train_log_" + seed_tag(seed) + ".tsv");
        check(bimors_head_save(h, head_file.string().c_str()), "saving checkpoint");
        check(bimors_train_log_save(l, log_file.string().c_str()), "saving log");
        run.artifact(head_file);
        run.artifact(log_file);
        bimors_log_entry last;
        check(bimors_train_log_entry(l, bimors_train_log_size(l) - 1, &last), "log");
        std::cout << "seed " << seed << ": " << bimors_train_log_size(l) << " steps, final loss " << format_double(last.loss)
                  << ", checkpoint " << head_file.string() << "\n";
    }
    const fs::path cfg_file = out / "train_config.kv";
    check(bimors_train_config_save(&cfg, cfg_file.string().c_str()), "saving config");
    run.artifact(cfg_file);

    std::vector<const bimors_head*> hp;
    for (auto& h : heads) hp.push_back(h.get());
    Report report;
    const std::string label = o.label.empty() ? bimors_mode_name(cfg.mode) : o.label;
    if (regime == BIMORS_B2N) {
        std::vector<const bimors_split*> sp;
        for (auto& s : splits) sp.push_back(s.get());
        bimors_report* r = nullptr;
        check(bimors_eval_b2n(ds.get(), sp.data(), hp.data(), o.seeds.data(), o.seeds.size(), enc.get(), cfg.temperature,
                              label.c_str(), &r),
              "evaluating");
        report.reset(r);
    } else {
        std::vector<const bimors_dataset*> tp;
        for (auto& t : targets) tp.push_back(t.get());
        if (tp.empty()) tp.push_back(ds.get());
        bimors_report* r = nullptr;
        check(bimors_eval_transfer(tp.data(), tp.size(), regime, hp.data(), o.seeds.data(), o.seeds.size(), enc.get(),
                                   cfg.temperature, label.c_str(), &r),
              "evaluating");
        report.reset(r);
    }
    std::cout << bimors_report_text(report.get());
    write_report(report.get(), out, run);
    finish(run, out);
    return 0;
}

std::vector<Head> load_heads(const Options& o, RunManifest& run) {
    if (o.checkpoints.empty()) throw CliError{kExitUsage, "--checkpoint is required"};
    std::vector<Head> heads;
    for (const auto& c : o.checkpoints) {
        bimors_head* h = nullptr;
        check(bimors_head_load(c.c_str(), &h), "loading checkpoint " + c);
        heads.emplace_back(h);
        run.input("checkpoint." + std::to_string(heads.size() - 1), c, sha256_of(c));
    }
    return heads;
}

std::vector<std::uint64_t> seeds_for(const Options& o, std::size_t n, bool seeds_given) {
    if (seeds_given) {
        if (o.seeds.size() != n)
            throw CliError{kExitUsage, std::to_string(o.seeds.size()) + " seeds for " + std::to_string(n) + " checkpoints"};
        return o.seeds;
    }
    std::vector<std::uint64_t> s;
    for (std::size_t i = 0; i < n; ++i) s.push_back(i + 1);
    return s;
}

int cmd_eval_b2n(const Options& o, RunManifest& run) {
    const auto& src = single_dataset(o);
    if (o.splits.empty()) throw CliError{kExitUsage, "--split is required"};
    auto enc = load_encoder(o, run);
    auto ds = open_dataset(src, "dataset", run);
    auto heads = load_heads(o, run);
    if (o.splits.size() != heads.size())
        throw CliError{kExitUsage, std::to_string(o.splits.size()) + " splits for " + std::to_string(heads.size()) + " checkpoints"};
    std::vector<Split> splits;
    std::vector<std::uint64_t> seeds;
    for (const auto& f : o.splits) {
        bimors_split* s = nullptr;
        check(bimors_split_load(f.c_str(), &s), "loading split " + f);
        splits.emplace_back(s);
        seeds.push_back(bimors_split_seed(s));
        run.input("split." + std::to_string(splits.size() - 1), f, sha256_of(f));
    }
    run.seeds(seeds);
    const fs::path out = prepare_out(o);
    std::vector<const bimors_split*> sp;
    std::vector<const bimors_head*> hp;
    for (auto& s : splits) sp.push_back(s.get());
    for (auto& h : heads) hp.push_back(h.get());
    bimors_report* r = nullptr;
    const std::string label = o.label.empty() ? "bimors" : o.label;
    check(bimors_eval_b2n(ds.get(), sp.data(), hp.data(), seeds.data(), seeds.size(), enc.get(), temperature_of(o),
                          label.c_str(), &r),
          "B2N evaluation");
    Report report(r);
    std::cout << bimors_report_text(r);
    write_report(r, out, run);
    finish(run, out);
    return 0;
}

int cmd_eval_transfer(const Options& o, RunManifest& run, int regime, bool seeds_given) {
    if (o.targets.empty()) throw CliError{kExitUsage, "--target is required"};
    auto enc = load_encoder(o, run);
    std::vector<Dataset> targets;
    for (const auto& t : o.targets) targets.push_back(open_dataset(t, "target", run));
    auto heads = load_heads(o, run);
    const auto seeds = seeds_for(o, heads.size(), seeds_given);
    run.seeds(seeds);
    const fs::path out = prepare_out(o);
    std::vector<const bimors_dataset*> tp;
    std::vector<const bimors_head*> hp;
    for (auto& t : targets) tp.push_back(t.get());
    for (auto& h : heads) hp.push_back(h.get());
    bimors_report* r = nullptr;
    const std::string label = o.label.empty() ? "bimors" : o.label;
    check(bimors_eval_transfer(tp.data(), tp.size(), regime, hp.data(), seeds.data(), seeds.size(), enc.get(),
                               temperature_of(o), label.c_str(), &r),
          std::string(regime == BIMORS_CD ? "CD" : "SSMT") + " evaluation");
    Report report(r);
    std::cout << bimors_report_text(r);
    write_report(r, out, run);
    finish(run, out);
    return 0;
}

int cmd_zero_shot(const Options& o, RunManifest& run) {
    const int regime = parse_regime(o.regime);
    auto enc = load_encoder(o, run);
    bimors_report* r = nullptr;
    const std::vector<const bimors_head*> none(o.seeds.size(), nullptr);
    run.seeds(o.seeds);
    if (regime == BIMORS_B2N) {
        auto ds = open_dataset(single_dataset(o), "dataset", run);
        std::vector<Split> splits;
        std::vector<const bimors_split*> sp;
        for (auto seed : o.seeds) {
            bimors_split* s = nullptr;
            check(bimors_split_make(ds.get(), BIMORS_B2N, seed, o.shots, nullptr, &s), "making split");
            splits.emplace_back(s);
            sp.push_back(s);
        }
        check(bimors_eval_b2n(ds.get(), sp.data(), none.data(), o.seeds.data(), o.seeds.size(), enc.get(), temperature_of(o),
                              "zero-shot", &r),
              "zero-shot B2N");
    } else {
        std::vector<Dataset> targets;
        for (const auto& t : o.targets.empty() ? o.datasets : o.targets) targets.push_back(open_dataset(t, "target", run));
        if (targets.empty()) throw CliError{kExitUsage, "--target (or --dataset) is required"};
        std::vector<const bimors_dataset*> tp;
        for (auto& t : targets) tp.push_back(t.get());
        check(bimors_eval_transfer(tp.data(), tp.size(), regime, none.data(), o.seeds.data(), o.seeds.size(), enc.get(),
                                   temperature_of(o), "zero-shot", &r),
              "zero-shot transfer");
    }
    Report report(r);
    const fs::path dir = prepare_out(o);
    std::cout << bimors_report_text(r);
    write_report(r, dir, run);
    finish(run, dir);
    return 0;
}

int cmd_ablate(const Options& o, RunManifest& run) {
    const auto& src = single_dataset(o);
    const int regime = parse_regime(o.regime);
    auto cfg = resolve_config(o, run);
    auto enc = load_encoder(o, run);
    auto ds = open_dataset(src, "dataset", run);
    Dataset alt;
    if (!o.alternate.empty()) alt = open_dataset(o.alternate, "alternate_captions", run);
    run.seeds(o.seeds);
    const fs::path out = prepare_out(o);
    // one split shared by every mode, drawn with the first seed
    bimors_split* s = nullptr;
    check(bimors_split_make(ds.get(), regime, o.seeds.front(), cfg.shots, nullptr, &s), "making split");
    Split split(s);
    const fs::path split_file = out / "ablation_split.txt";
    check(bimors_split_save(s, split_file.string().c_str()), "saving split");
    run.artifact(split_file);
    bimors_report* r = nullptr;
    check(bimors_ablate(ds.get(), s, &cfg, o.seeds.data(), o.seeds.size(), enc.get(), alt.get(), &r), "ablation");
    Report report(r);
    std::cout << bimors_report_text(r);
    write_report(r, out, run);
    finish(run, out);
    return 0;
}

int cmd_gradcheck(const Options& o, RunManifest& run, bool write_out) {
    bimors_report* r = nullptr;
    int passed = 0;
    check(bimors_gradcheck(o.tolerance ? *o.tolerance : -1.0, o.corrupt_op.empty() ? nullptr : o.corrupt_op.c_str(), &r, &passed),
          "gradcheck");
    Report report(r);
    std::cout << bimors_report_text(r);
    if (!passed) {
        const std::string kv = bimors_report_kv(r);
        const auto at = kv.find("\nfailing=");
        if (at != std::string::npos) std::cerr << "failing ops: " << kv.substr(at + 9, kv.find('\n', at + 1) - at - 9) << "\n";
    }
    if (write_out) {
        const fs::path out = prepare_out(o);
        write_report(r, out, run);
        finish(run, out);
    }
    return passed ? 0 : kExitCheck;
}

int cmd_param_count(const Options& o) {
    std::uint64_t n = 0;
    const std::uint32_t d_vis = o.d_vis, d_cap = o.d_cap, d = o.d, h = o.pc_heads, m = o.pc_m;
    if (!o.checkpoint.empty()) {
        bimors_head* head = nullptr;
        check(bimors_head_load(o.checkpoint.c_str(), &head), "loading checkpoint " + o.checkpoint);
        Head owned(head);
        std::cout << "checkpoint " << o.checkpoint << ": " << bimors_head_param_count(head) << " trainable parameters\n";
        return 0;
    }
    check(bimors_param_count(d_vis, d_cap, d, h, m, &n), "param-count", kExitUsage);
    const std::uint64_t proj = (std::uint64_t{d_vis} * d + d) + (std::uint64_t{d_cap} * d + d);
    const std::uint64_t attn = 4ull * d * d;
    const std::uint64_t ffn = 2ull * d + std::uint64_t{d} * d + d;
    const std::uint64_t query = std::uint64_t{m} * d;
    std::cout << "prompt head d_vis=" << d_vis << " d_cap=" << d_cap << " d=" << d << " heads=" << h << " m=" << m << "\n"
              << "  projections P_v + P_t : " << proj << "\n"
              << "  attention W_Q,K,V,O   : " << attn << "\n"
              << "  LayerNorm+Linear FFN  : " << ffn << "\n"
              << "  query tokens Q'       : " << query << "\n"
              << "  total trainable       : " << n << "\n";
    if (d_vis == 768 && d_cap == 768 && d == 512 && m == 4)
        std::cout << "headline figure quoted for this method: 1M; this layout allocates " << format_double(n / 1e6)
                  << "M (the two 768->512 projections alone hold " << proj << ")\n";
    return 0;
}

int cmd_make_synthetic(const Options& o, RunManifest& run) {
    if (o.out.empty()) throw CliError{kExitUsage, "--out is required"};
    Encoder enc;
    const fs::path out = prepare_out(o);
    if (!o.encoder.empty()) {
        enc = load_encoder(o, run);
    } else {
        bimors_encoder_dims dims{o.vocab, o.context_length, o.width, o.enc_heads, o.layers, 0};
        bimors_encoder* e = nullptr;
        check(bimors_encoder_random(&dims, o.encoder_seed, &e), "building encoder", kExitUsage);
        enc.reset(e);
        const fs::path w = out / "encoder.bmtw", c = out / "encoder.cfg";
        check(bimors_encoder_save(e, w.string().c_str(), c.string().c_str()), "saving encoder");
        run.artifact(w);
        run.artifact(c);
        if (o.references > 0) {
            const fs::path ref = out / "reference.bmtw";
            check(bimors_reference_write(e, o.references, o.encoder_seed, ref.string().c_str()), "writing references");
            run.artifact(ref);
        }
    }
    bimors_synthetic_spec spec;
    bimors_synthetic_spec_default(&spec);
    spec.name = o.name.c_str();
    spec.classes = o.classes;
    spec.records_per_class = o.records_per_class;
    spec.visual_tokens = o.visual_tokens;
    spec.caption_tokens = o.caption_tokens;
    spec.d_vis = o.syn_d_vis;
    spec.d_cap = o.syn_d_cap;
    spec.class_tokens = o.class_tokens;
    spec.feature_noise = o.feature_noise;
    spec.embed_noise = o.embed_noise;
    spec.world_seed = o.world_seed;
    spec.sample_seed = o.sample_seed;
    spec.domain_shift = o.domain_shift;
    spec.alternate_captions = o.alternate_captions;
    spec.shared_class_ids = o.shared.empty() ? nullptr : o.shared.data();
    spec.shared_count = o.shared.size();
    const fs::path data_dir = out / o.name;
    check(bimors_synthetic_write(enc.get(), &spec, data_dir.string().c_str()), "writing synthetic dataset");
    run.artifact(data_dir / "manifest.txt");
    run.artifact(data_dir / "records.bmrs");
    std::cout << "wrote " << data_dir.string() << "\n";
    finish(run, out);
    return 0;
}

int cmd_parity(const Options& o, RunManifest& run) {
    if (o.reference.empty()) throw CliError{kExitUsage, "--reference is required"};
    auto enc = load_encoder(o, run);
    run.input("reference", o.reference, sha256_of(o.reference));
    bimors_report* r = nullptr;
    int passed = 0;
    check(bimors_parity(enc.get(), o.reference.c_str(), o.threshold, &r, &passed), "parity");
    Report report(r);
    std::cout << bimors_report_text(r);
    const fs::path out = prepare_out(o);
    write_report(r, out, run);
    finish(run, out);
    return passed ? 0 : kExitCheck;
}

unsigned default_threads() {
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : std::min(hw, 8u);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"bimors: bi-modal prompt learning over frozen encoder features"};
    app.require_subcommand(1);
    app.fallthrough();
    Options o;
    unsigned threads = default_threads();
    app.add_option("--threads", threads, "Worker threads (env BIMORS_THREADS)")->envname("BIMORS_THREADS")->check(CLI::Range(1u, 1024u));

    auto add_encoder = [&](CLI::App* c) {
        c->add_option("--encoder", o.encoder, "Text encoder weights (BMTW container)");
        c->add_option("--encoder-config", o.encoder_config, "Encoder config file (default: weights path with .cfg)");
    };
    auto add_out = [&](CLI::App* c) { c->add_option("--out", o.out, "Output directory")->capture_default_str(); };
    auto add_train_flags = [&](CLI::App* c) {
        c->add_option("--config", o.config_file, "key=value train config, applied over the flags");
        c->add_option("--epochs", o.epochs);
        c->add_option("--batch-size", o.batch_size);
        c->add_option("--lr", o.lr);
        c->add_option("--warmup-lr", o.warmup_lr);
        c->add_option("--warmup-epochs", o.warmup_epochs);
        c->add_option("--momentum", o.momentum);
        c->add_option("--weight-decay", o.weight_decay);
        c->add_option("--heads", o.heads, "Attention heads of the prompt head");
        c->add_option("--m", o.m, "Number of context tokens");
        c->add_option("--mode", o.mode, "full, visual_only, text_only or no_ca");
    };
    auto add_seeds = [&](CLI::App* c) { return c->add_option("--seed", o.seeds, "Seeds, comma separated")->delimiter(','); };

    auto* ingest = app.add_subcommand("ingest-validate", "Validate dataset directories");
    ingest->add_option("--dataset", o.datasets, "Dataset directory")->delimiter(',');

    auto* train = app.add_subcommand("train", "Train one head per seed and report");
    train->add_option("--dataset", o.datasets, "Source dataset directory");
    train->add_option("--target", o.targets, "Target datasets for CD/SSMT reports")->delimiter(',');
    train->add_option("--regime", o.regime, "b2n, cd or ssmt")->capture_default_str();
    train->add_option("--shots", o.shots)->capture_default_str();
    train->add_option("--temperature", o.temperature);
    train->add_option("--label", o.label);
    add_seeds(train);
    add_encoder(train);
    add_out(train);
    add_train_flags(train);

    auto* eval_b2n = app.add_subcommand("eval-b2n", "Base-to-new evaluation of trained heads");
    eval_b2n->add_option("--dataset", o.datasets);
    eval_b2n->add_option("--checkpoint", o.checkpoints, "Head checkpoints, one per seed")->delimiter(',');
    eval_b2n->add_option("--split", o.splits, "Split files matching the checkpoints")->delimiter(',');
    eval_b2n->add_option("--temperature", o.temperature);
    eval_b2n->add_option("--label", o.label);
    add_encoder(eval_b2n);
    add_out(eval_b2n);

    CLI::Option* cd_seed = nullptr;
    CLI::Option* ssmt_seed = nullptr;
    auto* eval_cd = app.add_subcommand("eval-cd", "Cross-dataset evaluation");
    auto* eval_ssmt = app.add_subcommand("eval-ssmt", "Single-source multi-target evaluation");
    for (auto* c : {eval_cd, eval_ssmt}) {
        c->add_option("--target", o.targets, "Target dataset directories")->delimiter(',');
        c->add_option("--checkpoint", o.checkpoints, "Head checkpoints, one per seed")->delimiter(',');
        c->add_option("--temperature", o.temperature);
        c->add_option("--label", o.label);
        (c == eval_cd ? cd_seed : ssmt_seed) = add_seeds(c);
        add_encoder(c);
        add_out(c);
    }

    auto* ablate = app.add_subcommand("ablate", "Train and evaluate every context mode");
    ablate->add_option("--dataset", o.datasets);
    ablate->add_option("--alternate-captions", o.alternate, "Same records with another caption export");
    ablate->add_option("--regime", o.regime)->capture_default_str();
    ablate->add_option("--shots", o.shots)->capture_default_str();
    ablate->add_option("--temperature", o.temperature);
    add_seeds(ablate);
    add_encoder(ablate);
    add_out(ablate);
    add_train_flags(ablate);

    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
    gradcheck->add_option("--tolerance", o.tolerance, "Override every tolerance");
    gradcheck->add_option("--corrupt-op", o.corrupt_op, "Test hook: break the backward of one op")->group("");
    auto* gc_out = gradcheck->add_option("--out", o.out, "Also write the report here");

    auto* params = app.add_subcommand("param-count", "Trainable parameter audit");
    params->add_option("--d-vis", o.d_vis)->capture_default_str();
    params->add_option("--d-cap", o.d_cap)->capture_default_str();
    params->add_option("--d", o.d)->capture_default_str();
    params->add_option("--heads", o.pc_heads)->capture_default_str();
    params->add_option("--m", o.pc_m)->capture_default_str();
    params->add_option("--checkpoint", o.checkpoint, "Count a saved head instead");

    auto* zero = app.add_subcommand("zero-shot", "Template-prompt baseline");
    zero->add_option("--dataset", o.datasets);
    zero->add_option("--target", o.targets)->delimiter(',');
    zero->add_option("--regime", o.regime)->capture_default_str();
    zero->add_option("--shots", o.shots, "Shots excluded from the B2N base test set")->capture_default_str();
    zero->add_option("--temperature", o.temperature);
    add_seeds(zero);
    add_encoder(zero);
    add_out(zero);

    auto* synth = app.add_subcommand("make-synthetic", "Write a synthetic dataset (and a random encoder)");
    synth->add_option("--out", o.out, "Output directory")->capture_default_str();
    synth->add_option("--name", o.name)->capture_default_str();
    synth->add_option("--classes", o.classes)->capture_default_str();
    synth->add_option("--records-per-class", o.records_per_class)->capture_default_str();
    synth->add_option("--visual-tokens", o.visual_tokens)->capture_default_str();
    synth->add_option("--caption-tokens", o.caption_tokens)->capture_default_str();
    synth->add_option("--d-vis", o.syn_d_vis)->capture_default_str();
    synth->add_option("--d-cap", o.syn_d_cap)->capture_default_str();
    synth->add_option("--class-tokens", o.class_tokens)->capture_default_str();
    synth->add_option("--feature-noise", o.feature_noise)->capture_default_str();
    synth->add_option("--embed-noise", o.embed_noise)->capture_default_str();
    synth->add_option("--domain-shift", o.domain_shift)->capture_default_str();
    synth->add_option("--world-seed", o.world_seed)->capture_default_str();
    synth->add_option("--sample-seed", o.sample_seed)->capture_default_str();
    synth->add_flag("--alternate-captions", o.alternate_captions);
    synth->add_option("--shared-classes", o.shared, "Shared class ids for SSMT targets")->delimiter(',');
    synth->add_option("--encoder-seed", o.encoder_seed)->capture_default_str();
    synth->add_option("--width", o.width)->capture_default_str();
    synth->add_option("--layers", o.layers)->capture_default_str();
    synth->add_option("--encoder-heads", o.enc_heads)->capture_default_str();
    synth->add_option("--vocab", o.vocab)->capture_default_str();
    synth->add_option("--context-length", o.context_length)->capture_default_str();
    synth->add_option("--references", o.references, "Also write this many reference prompts for the generated encoder");
    add_encoder(synth);

    auto* parity = app.add_subcommand("parity", "Text encoder against exported reference embeddings");
    parity->add_option("--reference", o.reference, "Reference prompt container (BMTW)");
    parity->add_option("--threshold", o.threshold, "Minimum cosine per prompt")->capture_default_str();
    add_encoder(parity);
    add_out(parity);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return kExitUsage;
    }

    bimors_set_threads(threads);
    CLI::App* cmd = app.get_subcommands().front();
    RunManifest run(cmd->get_name(), argc, argv);
    for (const auto* opt : cmd->get_options()) {
        if (opt->count() == 0 || opt->get_lnames().empty() || opt->get_lnames().front() == "help") continue;
        run.flag(opt->get_lnames().front(), join(opt->results()));
    }
    if (app.get_option("--threads")->count()) run.flag("threads", std::to_string(threads));

    try {
        const std::string name = cmd->get_name();
        if (name == "ingest-validate") return cmd_ingest_validate(o, run);
        if (name == "train") return cmd_train(o, run);
        if (name == "eval-b2n") return cmd_eval_b2n(o, run);
        if (name == "eval-cd") return cmd_eval_transfer(o, run, BIMORS_CD, cd_seed->count() > 0);
        if (name == "eval-ssmt") return cmd_eval_transfer(o, run, BIMORS_SSMT, ssmt_seed->count() > 0);
        if (name == "ablate") return cmd_ablate(o, run);
        if (name == "gradcheck") return cmd_gradcheck(o, run, gc_out->count() > 0);
        if (name == "param-count") return cmd_param_count(o);
        if (name == "zero-shot") return cmd_zero_shot(o, run);
        if (name == "make-synthetic") return cmd_make_synthetic(o, run);
        if (name == "parity") return cmd_parity(o, run);
        std::cerr << app.help();
        return kExitUsage;
    } catch (const CliError& e) {
        std::cerr << "error: " << e.message << "\n";
        return e.exit_code;
    }
}
