#include "eval/harness.hpp"

#include "common/error.hpp"
#include "common/parallel.hpp"
#include "tensor/ops.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace bimors::eval {

namespace fs = std::filesystem;
using featio::Dataset;
using featio::FeatureRecord;
using featio::SplitMode;
using featio::SplitSpec;
using promptgen::ContextMode;
using promptgen::PromptHead;

double top1_accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> labels) {
    if (predictions.empty()) fail(ErrorCode::invalid_argument, "top1_accuracy: no predictions");
    if (predictions.size() != labels.size())
        fail(ErrorCode::invalid_argument, "top1_accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                                              std::to_string(labels.size()) + " labels");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
    return 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
}

double harmonic_mean(double base, double novel) {
    if (!(base >= 0.0) || !(novel >= 0.0))
        fail(ErrorCode::invalid_argument, "harmonic_mean: accuracies must be nonnegative, got " + format_float(base) + " and " +
                                              format_float(novel));
    if (base + novel == 0.0) return 0.0;
    return 2.0 * base * novel / (base + novel);
}

double mean(std::span<const double> values) {
    if (values.empty()) fail(ErrorCode::invalid_argument, "mean of nothing");
    double s = 0.0;
    for (double v : values) s += v;
    return s / static_cast<double>(values.size());
}

namespace {

std::size_t argmax(std::span<const float> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

} // namespace

std::vector<std::size_t> predict(std::span<const FeatureRecord> records, const PromptHead* head,
                                 const textenc::TextEncoderWeights& weights, const train::LabelSpace& labels,
                                 double temperature, ContextMode mode) {
    NoGradGuard no_grad;
    std::vector<std::size_t> out(records.size());
    if (!head) {
        // the template prompt does not depend on the image
        const Tensor embeds = train::class_embeddings(textenc::template_context(weights), labels, weights);
        parallel_for(records.size(), [&](std::size_t i) {
            out[i] = argmax(train::logits_from_embeddings(embeds, records[i].global_embed, temperature).data());
        });
        return out;
    }
    parallel_for(records.size(), [&](std::size_t i) {
        const Tensor context = promptgen::generate_context(records[i], *head, mode);
        out[i] = argmax(train::class_logits(context, records[i].global_embed, labels, weights, temperature).data());
    });
    return out;
}

double evaluate_records(const Dataset& dataset, std::span<const std::uint64_t> record_ids, const PromptHead* head,
                        const textenc::TextEncoderWeights& weights, const train::LabelSpace& labels, double temperature,
                        ContextMode mode) {
    if (record_ids.empty()) fail(ErrorCode::protocol, "no test records in '" + dataset.manifest().dataset_name + "'");
    std::vector<FeatureRecord> records;
    std::vector<std::size_t> truth;
    for (auto id : record_ids) {
        records.push_back(dataset.record(id));
        const std::size_t t = labels.index_of(records.back().class_id);
        if (t == labels.size())
            fail(ErrorCode::protocol, "test record '" + records.back().image_id + "' is outside the evaluated label space");
        truth.push_back(t);
    }
    const auto pred = predict(records, head, weights, labels, temperature, mode);
    return top1_accuracy(pred, truth);
}

B2NTestSets b2n_test_sets(const Dataset& dataset, const SplitSpec& split) {
    const std::set<std::uint32_t> base(split.base_class_ids.begin(), split.base_class_ids.end());
    const std::set<std::uint32_t> novel(split.new_class_ids.begin(), split.new_class_ids.end());
    const std::set<std::uint64_t> train_ids(split.train_record_ids.begin(), split.train_record_ids.end());
    B2NTestSets s;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const auto c = dataset.class_of(i);
        if (base.count(c) && !train_ids.count(i)) s.base.push_back(i);
        else if (novel.count(c)) s.novel.push_back(i);
    }
    return s;
}

SeedResult eval_b2n(const Dataset& dataset, const SplitSpec& split, const PromptHead* head,
                    const textenc::TextEncoderWeights& weights, double temperature) {
    if (split.mode != SplitMode::b2n)
        fail(ErrorCode::protocol, std::string("eval_b2n needs a B2N split, got ") + featio::split_mode_name(split.mode));
    featio::check_split(split, dataset.manifest());
    const auto sets = b2n_test_sets(dataset, split);
    if (sets.base.empty()) fail(ErrorCode::protocol, "B2N evaluation: no base-class test records outside the training pool");
    if (sets.novel.empty()) fail(ErrorCode::protocol, "B2N evaluation: no new-class test records");
    const ContextMode mode = head ? head->mode : ContextMode::full;
    const auto base_labels = train::make_label_space(dataset.manifest(), split.base_class_ids);
    const auto new_labels = train::make_label_space(dataset.manifest(), split.new_class_ids);
    SeedResult r;
    r.seed = split.seed;
    r.base_acc = evaluate_records(dataset, sets.base, head, weights, base_labels, temperature, mode);
    r.new_acc = evaluate_records(dataset, sets.novel, head, weights, new_labels, temperature, mode);
    r.h = harmonic_mean(r.base_acc, r.new_acc);
    return r;
}

double eval_transfer(const Dataset& target, SplitMode regime, const PromptHead* head,
                     const textenc::TextEncoderWeights& weights, double temperature) {
    const auto& m = target.manifest();
    std::vector<std::uint32_t> classes;
    if (regime == SplitMode::cd) {
        for (std::uint32_t c = 0; c < m.class_count(); ++c) classes.push_back(c);
    } else if (regime == SplitMode::ssmt) {
        if (m.shared_class_ids.empty())
            fail(ErrorCode::protocol, "SSMT target '" + m.dataset_name + "' declares no shared classes");
        classes = m.shared_class_ids;
    } else {
        fail(ErrorCode::protocol, "eval_transfer handles CD and SSMT, not B2N");
    }
    const auto labels = train::make_label_space(m, classes);
    std::vector<std::uint64_t> ids;
    for (std::size_t i = 0; i < target.size(); ++i)
        if (labels.index_of(target.class_of(i)) != labels.size()) ids.push_back(i);
    const ContextMode mode = head ? head->mode : ContextMode::full;
    return evaluate_records(target, ids, head, weights, labels, temperature, mode);
}

void finalize(EvalReport& report) {
    auto field_mean = [](const std::vector<SeedResult>& v, double SeedResult::*f) {
        std::vector<double> xs;
        for (const auto& r : v) xs.push_back(r.*f);
        return mean(xs);
    };
    std::vector<SeedResult> row_means;
    for (auto& row : report.rows) {
        if (row.seeds.empty()) fail(ErrorCode::invalid_argument, "report row '" + row.dataset + "' has no results");
        row.mean = SeedResult{};
        for (auto f : {&SeedResult::base_acc, &SeedResult::new_acc, &SeedResult::h, &SeedResult::target_acc})
            row.mean.*f = field_mean(row.seeds, f);
        row_means.push_back(row.mean);
    }
    report.average = SeedResult{};
    if (row_means.empty()) return;
    for (auto f : {&SeedResult::base_acc, &SeedResult::new_acc, &SeedResult::h, &SeedResult::target_acc})
        report.average.*f = field_mean(row_means, f);
}

namespace {

void check_heads(const std::vector<const PromptHead*>& heads, std::span<const std::uint64_t> seeds) {
    if (seeds.empty()) fail(ErrorCode::invalid_argument, "report needs at least one seed");
    if (heads.size() != seeds.size())
        fail(ErrorCode::invalid_argument, std::to_string(heads.size()) + " heads for " + std::to_string(seeds.size()) + " seeds");
}

void set_param_counts(EvalReport& r, const std::vector<const PromptHead*>& heads) {
    if (!heads.empty() && heads.front()) {
        r.trainable_params = promptgen::parameter_count(*heads.front());
        r.active_params = r.trainable_params;
    }
}

} // namespace

EvalReport report_b2n(const Dataset& dataset, const std::vector<SplitSpec>& splits, const std::vector<const PromptHead*>& heads,
                      std::span<const std::uint64_t> seeds, const textenc::TextEncoderWeights& weights, double temperature,
                      const std::string& label) {
    check_heads(heads, seeds);
    if (splits.size() != seeds.size()) fail(ErrorCode::invalid_argument, "one split per seed expected");
    EvalReport r;
    r.regime = SplitMode::b2n;
    r.label = label;
    r.seeds.assign(seeds.begin(), seeds.end());
    DatasetRow row{dataset.manifest().dataset_name, {}, {}};
    for (std::size_t s = 0; s < seeds.size(); ++s) {
        SeedResult res = eval_b2n(dataset, splits[s], heads[s], weights, temperature);
        res.seed = seeds[s];
        row.seeds.push_back(res);
    }
    r.rows.push_back(std::move(row));
    set_param_counts(r, heads);
    finalize(r);
    return r;
}

EvalReport report_transfer(std::span<const Dataset* const> targets, SplitMode regime, const std::vector<const PromptHead*>& heads,
                           std::span<const std::uint64_t> seeds, const textenc::TextEncoderWeights& weights, double temperature,
                           const std::string& label) {
    check_heads(heads, seeds);
    if (targets.empty()) fail(ErrorCode::invalid_argument, "transfer report needs at least one target");
    EvalReport r;
    r.regime = regime;
    r.label = label;
    r.seeds.assign(seeds.begin(), seeds.end());
    for (const Dataset* t : targets) {
        DatasetRow row{t->manifest().dataset_name, {}, {}};
        for (std::size_t s = 0; s < seeds.size(); ++s) {
            SeedResult res;
            res.seed = seeds[s];
            res.target_acc = eval_transfer(*t, regime, heads[s], weights, temperature);
            row.seeds.push_back(res);
        }
        r.rows.push_back(std::move(row));
    }
    set_param_counts(r, heads);
    finalize(r);
    return r;
}

namespace {

std::string fixed2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string pad(const std::string& s, std::size_t width, bool right = false) {
    if (s.size() >= width) return s;
    return right ? std::string(width - s.size(), ' ') + s : s + std::string(width - s.size(), ' ');
}

std::string join_seeds(std::span<const std::uint64_t> seeds, char sep) {
    std::string s;
    for (std::size_t i = 0; i < seeds.size(); ++i) s += (i ? std::string(1, sep) : "") + std::to_string(seeds[i]);
    return s;
}

// Rows of cells, first column left-aligned, the rest right-aligned.
std::string render(const std::vector<std::vector<std::string>>& cells) {
    std::vector<std::size_t> widths;
    for (const auto& row : cells)
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (widths.size() <= c) widths.push_back(0);
            widths[c] = std::max(widths[c], row[c].size());
        }
    std::string out;
    for (const auto& row : cells) {
        std::string line;
        for (std::size_t c = 0; c < row.size(); ++c) line += (c ? "  " : "") + pad(row[c], widths[c], c > 0);
        out += line + "\n";
    }
    return out;
}

std::vector<std::string> metric_cells(SplitMode regime, const SeedResult& r) {
    if (regime == SplitMode::b2n) return {fixed2(r.base_acc), fixed2(r.new_acc), fixed2(r.h)};
    return {fixed2(r.target_acc)};
}

} // namespace

std::string format_table(const EvalReport& report) {
    const bool b2n = report.regime == SplitMode::b2n;
    std::vector<std::vector<std::string>> cells;
    std::vector<std::string> header{"Dataset"};
    for (const char* h : b2n ? std::vector<const char*>{"Base", "New", "H"} : std::vector<const char*>{"Target"}) header.push_back(h);
    cells.push_back(header);
    for (const auto& row : report.rows) {
        auto line = metric_cells(report.regime, row.mean);
        line.insert(line.begin(), row.dataset);
        cells.push_back(line);
    }
    if (report.rows.size() > 1) {
        auto line = metric_cells(report.regime, report.average);
        line.insert(line.begin(), "Average");
        cells.push_back(line);
    }
    std::string out = std::string(featio::split_mode_name(report.regime)) + "  " + report.label + "  seeds " +
                      join_seeds(report.seeds, ',') + "\n" + render(cells);
    if (report.seeds.size() > 1) {
        std::vector<std::vector<std::string>> per_seed;
        for (const auto& row : report.rows)
            for (const auto& s : row.seeds) {
                auto line = metric_cells(report.regime, s);
                line.insert(line.begin(), row.dataset + " seed " + std::to_string(s.seed));
                per_seed.push_back(line);
            }
        out += "per seed:\n" + render(per_seed);
    }
    out += "trainable params: " + std::to_string(report.trainable_params) + "\n";
    return out;
}

KvDocument report_to_kv(const EvalReport& report) {
    KvDocument doc;
    doc.set("kind", std::string("bimors.report"));
    doc.set("regime", std::string(featio::split_mode_name(report.regime)));
    doc.set("label", report.label);
    doc.set("seeds", join_seeds(report.seeds, ','));
    doc.set("trainable_params", static_cast<std::int64_t>(report.trainable_params));
    doc.set("active_params", static_cast<std::int64_t>(report.active_params));
    doc.set("row_count", static_cast<std::int64_t>(report.rows.size()));
    const bool b2n = report.regime == SplitMode::b2n;
    auto put = [&](const std::string& prefix, const SeedResult& r) {
        if (b2n) {
            doc.set(prefix + ".base_acc", r.base_acc);
            doc.set(prefix + ".new_acc", r.new_acc);
            doc.set(prefix + ".h", r.h);
        } else {
            doc.set(prefix + ".target_acc", r.target_acc);
        }
    };
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        const auto& row = report.rows[i];
        const std::string p = "row." + std::to_string(i);
        doc.set(p + ".dataset", row.dataset);
        for (const auto& s : row.seeds) put(p + ".seed." + std::to_string(s.seed), s);
        put(p + ".mean", row.mean);
    }
    put("average", report.average);
    return doc;
}

std::string report_basename(const EvalReport& report) {
    std::string name = "report_" + std::string(featio::split_mode_name(report.regime)) + "_";
    name += report.rows.empty() ? std::string("none") : report.rows.front().dataset;
    if (report.rows.size() > 1) name += "+" + std::to_string(report.rows.size() - 1);
    name += "_seed" + join_seeds(report.seeds, '-');
    for (auto& ch : name)
        if (ch == '/' || ch == '\\' || ch == ' ') ch = '_';
    return name;
}

std::vector<fs::path> write_report(const EvalReport& report, const fs::path& dir) {
    fs::create_directories(dir);
    const std::string base = report_basename(report);
    const fs::path txt = dir / (base + ".txt");
    const fs::path kv = dir / (base + ".kv");
    {
        std::ofstream out(txt, std::ios::binary);
        out << format_table(report);
        if (!out) fail(ErrorCode::io, "cannot write " + txt.string());
    }
    report_to_kv(report).save(kv);
    return {txt, kv};
}

namespace {

// In-domain test pool for CD/SSMT splits: label-space records not used for training.
EvalReport evaluate_in_domain(const Dataset& dataset, const std::vector<SplitSpec>& splits,
                              const std::vector<const PromptHead*>& heads, std::span<const std::uint64_t> seeds,
                              const textenc::TextEncoderWeights& weights, double temperature, const std::string& label) {
    EvalReport r;
    r.regime = splits.front().mode;
    r.label = label;
    r.seeds.assign(seeds.begin(), seeds.end());
    DatasetRow row{dataset.manifest().dataset_name, {}, {}};
    for (std::size_t s = 0; s < seeds.size(); ++s) {
        const auto labels = train::make_label_space(dataset.manifest(), splits[s].base_class_ids);
        const std::set<std::uint64_t> train_ids(splits[s].train_record_ids.begin(), splits[s].train_record_ids.end());
        std::vector<std::uint64_t> ids;
        for (std::size_t i = 0; i < dataset.size(); ++i)
            if (!train_ids.count(i) && labels.index_of(dataset.class_of(i)) != labels.size()) ids.push_back(i);
        SeedResult res;
        res.seed = seeds[s];
        res.target_acc = evaluate_records(dataset, ids, heads[s], weights, labels, temperature, heads[s]->mode);
        row.seeds.push_back(res);
    }
    r.rows.push_back(std::move(row));
    set_param_counts(r, heads);
    finalize(r);
    return r;
}

AblationRow run_mode(const Dataset& dataset, const SplitSpec& split, train::TrainConfig config, ContextMode mode,
                     std::span<const std::uint64_t> seeds, const textenc::TextEncoderWeights& weights,
                     const std::string& caption_source) {
    config.mode = mode;
    AblationRow row;
    row.mode = mode;
    row.caption_source = caption_source;
    std::vector<train::TrainState> states;
    std::vector<SplitSpec> splits;
    for (auto seed : seeds) {
        config.seed = seed;
        SplitSpec s = split;
        states.push_back(train::train(dataset, s, config, weights));
        row.final_loss.push_back(states.back().log.back().loss);
        splits.push_back(std::move(s));
    }
    std::vector<const PromptHead*> heads;
    for (const auto& st : states) heads.push_back(&st.head);
    const std::string label = std::string(promptgen::context_mode_name(mode)) + "/" + caption_source;
    row.report = split.mode == SplitMode::b2n ? report_b2n(dataset, splits, heads, seeds, weights, config.temperature, label)
                                              : evaluate_in_domain(dataset, splits, heads, seeds, weights, config.temperature, label);

    const PromptHead& head = states.front().head;
    const auto labels = train::make_label_space(dataset.manifest(), split.base_class_ids);
    const auto record = dataset.record(split.train_record_ids.front());
    row.allocated_params = promptgen::parameter_count(head);
    const auto params = head.parameters();
    const auto activity = train::gradient_activity(head, record, weights, labels, config.temperature, mode);
    for (std::size_t i = 0; i < activity.size(); ++i) {
        if (activity[i].second) row.active_params += params[i].second->numel();
        else row.inactive.push_back(activity[i].first);
    }
    row.report.trainable_params = row.allocated_params;
    row.report.active_params = row.active_params;
    return row;
}

} // namespace

AblationSuite run_ablation_suite(const Dataset& dataset, const SplitSpec& split, const train::TrainConfig& config,
                                 std::span<const std::uint64_t> seeds, const textenc::TextEncoderWeights& weights,
                                 const Dataset* alternate_captions) {
    if (seeds.empty()) fail(ErrorCode::invalid_argument, "ablation needs at least one seed");
    featio::check_split(split, dataset.manifest());
    if (alternate_captions) {
        const auto& a = alternate_captions->manifest();
        const auto& b = dataset.manifest();
        if (a.class_names != b.class_names || a.record_count != b.record_count || a.d_vis != b.d_vis || a.d_clip != b.d_clip)
            fail(ErrorCode::validation, "alternate caption export '" + a.dataset_name + "' does not match '" + b.dataset_name +
                                            "' (classes, record count and dimensions must agree)");
        for (std::size_t i = 0; i < alternate_captions->size(); ++i)
            if (alternate_captions->class_of(i) != dataset.class_of(i))
                fail(ErrorCode::validation, "alternate caption export disagrees on the class of record " + std::to_string(i));
    }
    AblationSuite suite;
    for (auto mode : {ContextMode::no_ca, ContextMode::visual_only, ContextMode::text_only, ContextMode::full})
        suite.modes.push_back(run_mode(dataset, split, config, mode, seeds, weights, "default"));
    if (alternate_captions) {
        suite.captions.push_back(suite.modes.back());
        suite.captions.push_back(run_mode(*alternate_captions, split, config, ContextMode::full, seeds, weights, "alternate"));
    }
    return suite;
}

namespace {

std::vector<std::string> ablation_cells(const AblationRow& row) {
    const auto& r = row.report;
    std::vector<std::string> line{std::string(promptgen::context_mode_name(row.mode)), row.caption_source};
    for (auto& c : metric_cells(r.regime, r.rows.front().mean)) line.push_back(c);
    line.push_back(fixed2(mean(row.final_loss)));
    line.push_back(std::to_string(row.allocated_params));
    line.push_back(std::to_string(row.active_params));
    std::string inactive;
    for (const auto& n : row.inactive) inactive += (inactive.empty() ? "" : ",") + n;
    line.push_back(inactive.empty() ? "-" : inactive);
    return line;
}

std::vector<std::string> ablation_header(SplitMode regime) {
    std::vector<std::string> h{"Mode", "Captions"};
    if (regime == SplitMode::b2n) h.insert(h.end(), {"Base", "New", "H"});
    else h.push_back("Target");
    h.insert(h.end(), {"Loss", "Params", "Active", "Inactive"});
    return h;
}

} // namespace

std::string format_ablation(const AblationSuite& suite) {
    if (suite.modes.empty()) return "";
    const auto regime = suite.modes.front().report.regime;
    std::vector<std::vector<std::string>> cells{ablation_header(regime)};
    for (const auto& row : suite.modes) cells.push_back(ablation_cells(row));
    std::string out = "context ablation\n" + render(cells);
    if (!suite.captions.empty()) {
        std::vector<std::vector<std::string>> cap{ablation_header(regime)};
        for (const auto& row : suite.captions) cap.push_back(ablation_cells(row));
        out += "caption source\n" + render(cap);
    }
    return out;
}

KvDocument ablation_to_kv(const AblationSuite& suite) {
    KvDocument doc;
    doc.set("kind", std::string("bimors.ablation"));
    auto put_rows = [&](const std::string& group, const std::vector<AblationRow>& rows) {
        doc.set(group + ".count", static_cast<std::int64_t>(rows.size()));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto& row = rows[i];
            const std::string p = group + "." + std::to_string(i);
            doc.set(p + ".mode", std::string(promptgen::context_mode_name(row.mode)));
            doc.set(p + ".captions", row.caption_source);
            doc.set(p + ".allocated_params", static_cast<std::int64_t>(row.allocated_params));
            doc.set(p + ".active_params", static_cast<std::int64_t>(row.active_params));
            std::string inactive;
            for (const auto& n : row.inactive) inactive += (inactive.empty() ? "" : ",") + n;
            doc.set(p + ".inactive", inactive);
            for (std::size_t s = 0; s < row.final_loss.size(); ++s)
                doc.set(p + ".final_loss." + std::to_string(row.report.seeds[s]), row.final_loss[s]);
            const auto kv = report_to_kv(row.report);
            for (const auto& [k, v] : kv.entries())
                if (k != "kind") doc.set(p + ".report." + k, v);
        }
    };
    put_rows("modes", suite.modes);
    put_rows("captions", suite.captions);
    return doc;
}

} // namespace bimors::eval
