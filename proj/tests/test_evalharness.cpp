#include "doctest.h"

#include "eval/harness.hpp"
#include "featio/split.hpp"
#include "support/fixtures.hpp"
#include "synth/synthetic.hpp"
#include "train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

using namespace bimors;
using namespace bimors::eval;
using bimors::test::code_of;
using bimors::test::TempDir;
using featio::SplitMode;
using promptgen::ContextMode;

namespace {

textenc::TextEncoderWeights toy_weights() { return synth::random_text_encoder(synth::tiny_encoder_config(), 3); }

synth::SyntheticData toy_data(const textenc::TextEncoderWeights& w, std::size_t classes, std::size_t per_class,
                              float shift = 0.0f, std::uint64_t sample_seed = 1) {
    synth::SyntheticSpec s;
    s.classes = classes;
    s.records_per_class = per_class;
    s.domain_shift = shift;
    s.sample_seed = sample_seed;
    return synth::make_synthetic(s, w);
}

featio::Dataset store(const synth::SyntheticData& d, const TempDir& dir) {
    featio::write_dataset(d.manifest, d.records, dir.path());
    return featio::Dataset::open(dir.path());
}

train::TrainConfig quick_config(std::uint32_t epochs = 2) {
    train::TrainConfig c;
    c.epochs = epochs;
    c.heads = 2;
    return c;
}

std::vector<std::uint64_t> all_ids(const featio::Dataset& ds) {
    std::vector<std::uint64_t> ids(ds.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    return ids;
}

std::vector<std::uint32_t> all_classes(std::size_t n) {
    std::vector<std::uint32_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<std::uint32_t>(i);
    return ids;
}

} // namespace

TEST_CASE("top-1 accuracy") {
    const std::vector<std::size_t> a{0, 1, 2, 3}, b{0, 1, 2, 0};
    CHECK(top1_accuracy(a, a) == 100.0);
    CHECK(top1_accuracy(std::vector<std::size_t>{0, 1}, std::vector<std::size_t>{1, 0}) == 0.0);
    CHECK(top1_accuracy(a, b) == 75.0);
    CHECK(code_of([] { top1_accuracy({}, {}); }) == ErrorCode::invalid_argument);
    CHECK(code_of([&] { top1_accuracy(a, std::vector<std::size_t>{0}); }) == ErrorCode::invalid_argument);
}

TEST_CASE("harmonic mean against the published pairs") {
    CHECK(std::abs(harmonic_mean(96.10, 66.60) - 78.67) <= 0.01);
    CHECK(std::abs(harmonic_mean(96.40, 70.80) - 81.64) <= 0.01);
    CHECK(std::abs(harmonic_mean(73.30, 67.70) - 70.38) <= 0.01);
    CHECK(harmonic_mean(0, 0) == 0.0);
    CHECK(harmonic_mean(0, 50) == 0.0);
    CHECK(code_of([] { harmonic_mean(-1, 5); }) == ErrorCode::invalid_argument);
    CHECK(code_of([] { harmonic_mean(5, NAN); }) == ErrorCode::invalid_argument);
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        const double b = rng.uniform(0, 100), n = rng.uniform(0, 100);
        const double h = harmonic_mean(b, n);
        CHECK(h <= (b + n) / 2 + 1e-12);
        CHECK(h >= std::min(b, n) - 1e-12);
        CHECK(harmonic_mean(b, b) == doctest::Approx(b));
    }
}

TEST_CASE("report averages are means of per-dataset values") {
    EvalReport r;
    r.regime = SplitMode::b2n;
    r.seeds = {1, 2};
    for (auto [name, h] : std::vector<std::pair<std::string, double>>{{"PatternNet", 78.67}, {"RSICD", 81.64},
                                                                      {"RESISC45", 78.92}, {"MLRSNet", 72.19}}) {
        DatasetRow row{name, {}, {}};
        // two seeds straddling the value
        row.seeds.push_back({1, 90, 60, h - 0.5, 0});
        row.seeds.push_back({2, 92, 62, h + 0.5, 0});
        r.rows.push_back(row);
    }
    finalize(r);
    CHECK(std::abs(r.average.h - 77.85) <= 0.01);
    CHECK(r.rows[1].mean.h == doctest::Approx(81.64));
    CHECK(r.rows[0].mean.base_acc == doctest::Approx(91));
    // H of the averaged accuracies is a different number
    CHECK(std::abs(harmonic_mean(r.average.base_acc, r.average.new_acc) - r.average.h) > 1.0);

    const std::string table = format_table(r);
    CHECK(table.find("Base") != std::string::npos);
    CHECK(table.find("Average") != std::string::npos);
    char avg[16];
    std::snprintf(avg, sizeof avg, "%.2f", r.average.h);
    CHECK(table.find(avg) != std::string::npos);
    CHECK(table.find("RSICD seed 2") != std::string::npos);
    CHECK(report_basename(r) == "report_B2N_PatternNet+3_seed1-2");

    const auto kv = report_to_kv(r);
    CHECK(kv.get("kind") == "bimors.report");
    CHECK(kv.get_double("average.h") == doctest::Approx(77.855));
    CHECK(kv.get_double("row.1.seed.2.h") == doctest::Approx(82.14));
    CHECK(kv.get("row.3.dataset") == "MLRSNet");

    TempDir dir("eval_report");
    const auto files = write_report(r, dir.path());
    REQUIRE(files.size() == 2);
    CHECK(test::read_text(files[0]) == table);
    CHECK(KvDocument::load(files[1]).get_double("average.h") == doctest::Approx(77.855));
}

TEST_CASE("B2N evaluation: zero-shot on mirrored partitions") {
    // classes c, d repeat a, b exactly, so zero-shot sees the same problem twice
    const auto w = toy_weights();
    const auto src = toy_data(w, 2, 100);
    auto m = src.manifest;
    m.class_names = {"a", "b", "c", "d"};
    m.class_token_ids.push_back(m.class_token_ids[0]);
    m.class_token_ids.push_back(m.class_token_ids[1]);
    std::vector<featio::FeatureRecord> recs = src.records;
    for (auto r : src.records) {
        r.class_id += 2;
        r.image_id += "_mirror";
        recs.push_back(r);
    }
    TempDir dir("eval_mirror");
    featio::write_dataset(m, recs, dir.path());
    const auto ds = featio::Dataset::open(dir.path());
    const auto split = featio::make_b2n_split(ds, 1, 4);
    const auto sets = b2n_test_sets(ds, split);
    CHECK(sets.base.size() == 192);
    CHECK(sets.novel.size() == 200);
    const auto r = eval_b2n(ds, split, nullptr, w, 0.01);
    // base-test is the new-test problem minus 8 records
    CHECK(std::abs(r.base_acc - r.new_acc) <= 100.0 * 8 / 200 + 1e-9);
    CHECK(r.h == harmonic_mean(r.base_acc, r.new_acc));
    for (double a : {r.base_acc, r.new_acc}) {
        CHECK(a >= 0);
        CHECK(a <= 100);
    }
}

TEST_CASE("B2N evaluation: label spaces and protocol errors") {
    const auto w = toy_weights();
    const auto data = toy_data(w, 4, 10);
    TempDir dir("eval_b2n");
    const auto ds = store(data, dir);
    const auto split = featio::make_b2n_split(ds, 1, 4);
    const auto state = train::train(ds, split, quick_config(), w);

    const auto new_labels = train::make_label_space(ds.manifest(), split.new_class_ids);
    const auto sets = b2n_test_sets(ds, split);
    std::vector<featio::FeatureRecord> novel;
    for (auto id : sets.novel) novel.push_back(ds.record(id));
    for (auto p : predict(novel, &state.head, w, new_labels, 0.01, ContextMode::full)) CHECK(p < new_labels.size());

    const auto r = eval_b2n(ds, split, &state.head, w, 0.01);
    CHECK(r.h == harmonic_mean(r.base_acc, r.new_acc));
    CHECK(r.seed == 1);

    // a base record fed to the new label space is refused
    const std::vector<std::uint64_t> wrong{sets.base.front()};
    CHECK(code_of([&] { evaluate_records(ds, wrong, &state.head, w, new_labels, 0.01, ContextMode::full); }) ==
          ErrorCode::protocol);

    const auto cd = featio::make_transfer_split(ds, SplitMode::cd, 1, 4, "x");
    CHECK(code_of([&] { eval_b2n(ds, cd, nullptr, w, 0.01); }) == ErrorCode::protocol);
    auto greedy = featio::make_b2n_split(ds, 1, 10);
    CHECK(code_of([&] { eval_b2n(ds, greedy, nullptr, w, 0.01); }) == ErrorCode::protocol);

    const std::vector<featio::SplitSpec> splits{split};
    const std::vector<const promptgen::PromptHead*> heads{&state.head};
    const std::vector<std::uint64_t> seeds{1};
    const auto report = report_b2n(ds, splits, heads, seeds, w, 0.01, "full");
    CHECK(report.rows.size() == 1);
    CHECK(report.rows[0].mean.h == report.rows[0].seeds[0].h);
    CHECK(report.rows[0].mean.base_acc == report.rows[0].seeds[0].base_acc);
    CHECK(report.trainable_params == promptgen::parameter_count(state.head));
    CHECK(format_table(report).find("Average") == std::string::npos);
}

TEST_CASE("transfer evaluation") {
    const auto w = toy_weights();
    const auto data = toy_data(w, 4, 10);
    TempDir dir("eval_cd");
    const auto ds = store(data, dir);
    const auto split = featio::make_transfer_split(ds, SplitMode::cd, 1, 4, ds.manifest().dataset_name);
    const auto state = train::train(ds, split, quick_config(), w);

    // target == source matches plain in-domain accuracy over every record
    const auto labels = train::make_label_space(ds.manifest(), all_classes(4));
    const double in_domain = evaluate_records(ds, all_ids(ds), &state.head, w, labels, 0.01, ContextMode::full);
    CHECK(eval_transfer(ds, SplitMode::cd, &state.head, w, 0.01) == in_domain);

    // relabel classes in reverse order
    auto m = data.manifest;
    std::reverse(m.class_names.begin(), m.class_names.end());
    std::reverse(m.class_token_ids.begin(), m.class_token_ids.end());
    auto recs = data.records;
    for (auto& r : recs) r.class_id = 3 - r.class_id;
    TempDir pdir("eval_perm");
    featio::write_dataset(m, recs, pdir.path());
    const auto permuted = featio::Dataset::open(pdir.path());
    CHECK(eval_transfer(permuted, SplitMode::cd, &state.head, w, 0.01) == doctest::Approx(in_domain));

    CHECK(code_of([&] { eval_transfer(ds, SplitMode::ssmt, &state.head, w, 0.01); }) == ErrorCode::protocol);
    CHECK(code_of([&] { eval_transfer(ds, SplitMode::b2n, &state.head, w, 0.01); }) == ErrorCode::protocol);

    // SSMT restricts to the shared subset
    auto shared = data;
    shared.manifest.shared_class_ids = {1, 3};
    TempDir sdir("eval_ssmt");
    const auto sds = store(shared, sdir);
    const auto sub = train::make_label_space(sds.manifest(), std::vector<std::uint32_t>{1, 3});
    std::vector<std::uint64_t> ids;
    for (std::size_t i = 0; i < sds.size(); ++i)
        if (sds.class_of(i) == 1 || sds.class_of(i) == 3) ids.push_back(i);
    CHECK(eval_transfer(sds, SplitMode::ssmt, &state.head, w, 0.01) ==
          evaluate_records(sds, ids, &state.head, w, sub, 0.01, ContextMode::full));

    const featio::Dataset* targets[] = {&ds, &sds};
    const std::vector<const promptgen::PromptHead*> heads{&state.head};
    const std::vector<std::uint64_t> seeds{1};
    const auto report = report_transfer(targets, SplitMode::cd, heads, seeds, w, 0.01, "cd");
    REQUIRE(report.rows.size() == 2);
    CHECK(report.average.target_acc == doctest::Approx((report.rows[0].mean.target_acc + report.rows[1].mean.target_acc) / 2));
    CHECK(format_table(report).find("Target") != std::string::npos);
}

TEST_CASE("mean-shifted target domain: trained head well above chance") {
    const auto w = toy_weights();
    const auto src = toy_data(w, 5, 20);
    const auto tgt = toy_data(w, 5, 20, 0.5f, 7);
    // the class structure survives the shift
    CHECK(synth::nearest_centroid_accuracy(src.records, tgt.records, 5) >= 95.0);
    TempDir a("eval_shift_src"), b("eval_shift_tgt");
    const auto sds = store(src, a);
    const auto tds = store(tgt, b);
    const auto split = featio::make_transfer_split(sds, SplitMode::cd, 1, 16, tds.manifest().dataset_name);
    const auto state = train::train(sds, split, quick_config(10), w);
    const double acc = eval_transfer(tds, SplitMode::cd, &state.head, w, 0.01);
    CHECK(acc >= 3 * 100.0 / 5);
}

TEST_CASE("ablation suite") {
    const auto w = toy_weights();
    const auto data = toy_data(w, 4, 10);
    TempDir dir("eval_ablation");
    const auto ds = store(data, dir);
    const auto split = featio::make_b2n_split(ds, 1, 4);
    const auto cfg = quick_config();
    const std::vector<std::uint64_t> seeds{1};
    const auto suite = run_ablation_suite(ds, split, cfg, seeds, w, nullptr);
    REQUIRE(suite.modes.size() == 4);
    CHECK(suite.captions.empty());
    CHECK(suite.modes[0].mode == ContextMode::no_ca);
    CHECK(suite.modes[3].mode == ContextMode::full);

    const auto& full = suite.modes[3];
    CHECK(full.inactive.empty());
    CHECK(full.active_params == full.allocated_params);
    const auto& text = suite.modes[2];
    CHECK(text.allocated_params == full.allocated_params);
    CHECK(text.active_params < full.active_params);
    CHECK(std::find(text.inactive.begin(), text.inactive.end(), "W_pv") != text.inactive.end());
    const auto& vis = suite.modes[1];
    CHECK(std::find(vis.inactive.begin(), vis.inactive.end(), "W_pt") != vis.inactive.end());
    const auto& nca = suite.modes[0];
    for (const char* n : {"W_Q", "W_K", "W_V", "W_O"}) CHECK(std::find(nca.inactive.begin(), nca.inactive.end(), n) != nca.inactive.end());
    CHECK(nca.final_loss[0] != full.final_loss[0]);

    // the full row is a plain train + eval
    auto c = cfg;
    c.seed = 1;
    const auto st = train::train(ds, split, c, w);
    const auto direct = eval_b2n(ds, split, &st.head, w, c.temperature);
    CHECK(full.report.rows[0].seeds[0].base_acc == direct.base_acc);
    CHECK(full.report.rows[0].seeds[0].new_acc == direct.new_acc);
    CHECK(full.final_loss[0] == st.log.back().loss);

    const std::string text_out = format_ablation(suite);
    for (const char* n : {"no_ca", "visual_only", "text_only", "full"}) CHECK(text_out.find(n) != std::string::npos);
    CHECK(ablation_to_kv(suite).has("kind"));

    // the alternate caption export adds one row per mode
    auto alt_spec = synth::SyntheticSpec{};
    alt_spec.classes = 4;
    alt_spec.records_per_class = 10;
    alt_spec.alternate_captions = true;
    TempDir adir("eval_ablation_alt");
    const auto alt = store(synth::make_synthetic(alt_spec, w), adir);
    const auto with_alt = run_ablation_suite(ds, split, cfg, seeds, w, &alt);
    CHECK(with_alt.captions.size() == 2);
}
