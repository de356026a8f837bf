#include "doctest.h"

#include "common/rng.hpp"
#include "featio/split.hpp"
#include "support/finite_diff.hpp"
#include "support/fixtures.hpp"
#include "synth/synthetic.hpp"
#include "tensor/ops.hpp"
#include "train/trainer.hpp"

#include <cmath>
#include <numbers>

using namespace bimors;
using namespace bimors::train;
using bimors::test::code_of;
using bimors::test::TempDir;
using promptgen::ContextMode;

namespace {

struct Toy {
    textenc::TextEncoderWeights weights;
    synth::SyntheticData data;
};

Toy make_toy(std::size_t classes, std::size_t per_class, std::size_t width = 16) {
    Toy t;
    t.weights = synth::random_text_encoder(synth::tiny_encoder_config(width), 3);
    synth::SyntheticSpec s;
    s.classes = classes;
    s.records_per_class = per_class;
    t.data = synth::make_synthetic(s, t.weights);
    return t;
}

featio::Dataset write_toy(const Toy& t, const TempDir& dir) {
    featio::write_dataset(t.data.manifest, t.data.records, dir.path());
    return featio::Dataset::open(dir.path());
}

TrainConfig quick_config() {
    TrainConfig c;
    c.epochs = 2;
    c.heads = 2;
    c.m = 4;
    return c;
}

std::vector<std::uint32_t> all_classes(std::size_t n) {
    std::vector<std::uint32_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<std::uint32_t>(i);
    return ids;
}

} // namespace

TEST_CASE("learning-rate schedule") {
    const TrainConfig c;
    CHECK(lr_at(0, c) == doctest::Approx(1e-5));
    CHECK(lr_at(1, c) == doctest::Approx(2e-4));
    CHECK(lr_at(10, c) == doctest::Approx(0.0).epsilon(1e-12));
    for (std::uint32_t e = 1; e < 10; ++e)
        CHECK(lr_at(e, c) == doctest::Approx(2e-4 * 0.5 * (1 + std::cos(std::numbers::pi * (e - 1) / 9.0))));
    for (std::uint32_t e = 2; e < 10; ++e) CHECK(lr_at(e, c) < lr_at(e - 1, c));
    TrainConfig flat = c;
    flat.epochs = 1;
    CHECK(lr_at(0, flat) == doctest::Approx(1e-5));
}

TEST_CASE("config validation and key=value parsing") {
    TrainConfig c;
    CHECK_NOTHROW(validate_config(c));
    for (auto mutate : std::vector<std::function<void(TrainConfig&)>>{
             [](TrainConfig& x) { x.lr = 0; }, [](TrainConfig& x) { x.warmup_lr = -1; },
             [](TrainConfig& x) { x.temperature = 0; }, [](TrainConfig& x) { x.batch_size = 0; },
             [](TrainConfig& x) { x.momentum = 1.0; }, [](TrainConfig& x) { x.warmup_epochs = 11; }}) {
        TrainConfig bad;
        mutate(bad);
        CHECK(code_of([&] { validate_config(bad); }) == ErrorCode::validation);
    }
    c.epochs = 3;
    c.lr = 0.125;
    c.mode = ContextMode::visual_only;
    c.seed = 0xFFFFFFFFFFFFULL;
    CHECK(config_from_kv(config_to_kv(c)) == c);
    KvDocument doc;
    doc.set("learning_rate", std::string("1"));
    CHECK(code_of([&] { config_from_kv(doc); }) == ErrorCode::validation);
}

TEST_CASE("label space") {
    const auto m = test::small_manifest({"a", "b", "c"}, 2, 2, 2);
    const std::vector<std::uint32_t> ids{2, 0};
    const auto ls = make_label_space(m, ids);
    CHECK(ls.size() == 2);
    CHECK(ls.index_of(2) == 0);
    CHECK(ls.index_of(0) == 1);
    CHECK(ls.index_of(1) == 2);
    CHECK(ls.tokens[0] == m.class_token_ids[2]);
    CHECK(code_of([&] { make_label_space(m, std::vector<std::uint32_t>{}); }) == ErrorCode::protocol);
    CHECK(code_of([&] { make_label_space(m, std::vector<std::uint32_t>{1, 1}); }) == ErrorCode::protocol);
    CHECK(code_of([&] { make_label_space(m, std::vector<std::uint32_t>{3}); }) == ErrorCode::index);
}

TEST_CASE("class logits: cosine over temperature") {
    const auto toy = make_toy(2, 2);
    const auto& w = toy.weights;
    const auto labels = make_label_space(toy.data.manifest, all_classes(2));
    Rng rng(5);
    const Tensor ctx = Tensor::constant({3, w.config.width}, test::random_values(3 * w.config.width, rng, -0.05, 0.05));
    const auto& g = toy.data.records[0].global_embed;
    const double tau = 0.01;
    const Tensor logits = class_logits(ctx, g, labels, w, tau);
    REQUIRE(logits.shape() == Shape{1, 2});
    for (std::size_t c = 0; c < 2; ++c) {
        const Tensor e = textenc::encode(textenc::assemble_prompt(labels.tokens[c], ctx, w), w);
        double dot = 0, ng = 0, ne = 0;
        for (std::size_t i = 0; i < g.size(); ++i) {
            dot += static_cast<double>(g[i]) * e.data()[i];
            ng += static_cast<double>(g[i]) * g[i];
            ne += static_cast<double>(e.data()[i]) * e.data()[i];
        }
        CHECK(std::abs(logits.data()[c] - dot / std::sqrt(ng * ne) / tau) < 1e-5 / tau);
    }

    // magnitude of the image embedding does not matter
    std::vector<float> scaled = g;
    for (auto& v : scaled) v *= 7.5f;
    const Tensor l2 = class_logits(ctx, scaled, labels, w, tau);
    for (std::size_t c = 0; c < 2; ++c) CHECK(l2.data()[c] == doctest::Approx(logits.data()[c]).epsilon(1e-5));

    // tau rescales but keeps the ranking
    const Tensor l3 = class_logits(ctx, g, labels, w, 0.04);
    for (std::size_t c = 0; c < 2; ++c) CHECK(l3.data()[c] == doctest::Approx(logits.data()[c] / 4).epsilon(1e-5));

    // identical classes give uniform probabilities
    auto same = make_label_space(toy.data.manifest, all_classes(2));
    same.tokens[1] = same.tokens[0];
    const Tensor lu = class_logits(ctx, g, same, w, tau);
    CHECK(lu.data()[0] == lu.data()[1]);
}

TEST_CASE("loss on uniform logits is ln C") {
    std::vector<std::size_t> targets{3, 0, 18};
    const Tensor logits = Tensor::constant({3, 19}, std::vector<float>(57, 1.25f));
    CHECK(cross_entropy(logits, targets).item() == doctest::Approx(std::log(19.0)).epsilon(1e-6));

    // identical class prompts through the real pipeline
    auto names = std::vector<std::string>{};
    for (int i = 0; i < 19; ++i) names.push_back("k" + std::to_string(i));
    const auto w = synth::random_text_encoder(synth::tiny_encoder_config(), 3);
    auto m = test::small_manifest(names, 3, w.config.embed_out_dim, 3);
    for (auto& t : m.class_token_ids) t = {7};
    Rng rng(2);
    std::vector<featio::FeatureRecord> batch;
    for (std::uint32_t i = 0; i < 4; ++i) batch.push_back(test::random_record(m, i * 4, i, rng));
    TrainConfig cfg = quick_config();
    const auto head = initial_head(cfg, m, w);
    const auto labels = make_label_space(m, all_classes(19));
    CHECK(loss_batch(batch, head, w, labels, 0.01, ContextMode::full).item() == doctest::Approx(std::log(19.0)).epsilon(1e-5));
}

TEST_CASE("loss batching and label checks") {
    const auto toy = make_toy(3, 4);
    const auto& recs = toy.data.records;
    const TrainConfig cfg = quick_config();
    const auto head = initial_head(cfg, toy.data.manifest, toy.weights);
    const auto labels = make_label_space(toy.data.manifest, std::vector<std::uint32_t>{0, 1});
    // records are grouped by class, 4 each
    std::vector<featio::FeatureRecord> two{recs[0], recs[4]};
    REQUIRE(two[0].class_id == 0);
    REQUIRE(two[1].class_id == 1);
    const double l0 = loss_batch(std::span(two.data(), 1), head, toy.weights, labels, 0.01, ContextMode::full).item();
    const double l1 = loss_batch(std::span(two.data() + 1, 1), head, toy.weights, labels, 0.01, ContextMode::full).item();
    const double both = loss_batch(two, head, toy.weights, labels, 0.01, ContextMode::full).item();
    CHECK(both == doctest::Approx((l0 + l1) / 2).epsilon(1e-6));

    std::vector<featio::FeatureRecord> outside{recs[8]};
    REQUIRE(outside[0].class_id == 2);
    CHECK(code_of([&] { loss_batch(outside, head, toy.weights, labels, 0.01, ContextMode::full); }) == ErrorCode::protocol);
}

TEST_CASE("loss gradient with respect to the query tokens") {
    auto w = synth::random_text_encoder(synth::tiny_encoder_config(8, 1, 2, 32, 12), 4);
    synth::SyntheticSpec s;
    s.classes = 3;
    s.records_per_class = 1;
    s.d_vis = 6;
    s.d_cap = 5;
    s.class_tokens = 1;
    const auto data = synth::make_synthetic(s, w);
    TrainConfig cfg = quick_config();
    cfg.m = 2;
    auto head = initial_head(cfg, data.manifest, w);
    Rng rng(8);
    for (auto& v : head.query.mutable_data()) v = static_cast<float>(rng.uniform(-1, 1));
    const auto labels = make_label_space(data.manifest, all_classes(3));
    const double tau = 0.3;
    const double err = test::check_scalar_gradients(
        [&] { return loss_batch(data.records, head, w, labels, tau, ContextMode::full); }, {head.query}, 1e-3f);
    CHECK(err < 1e-2);
}

TEST_CASE("sgd step") {
    Tensor w = Tensor::parameter({2}, {1, 2});
    w.zero_grad();
    for (auto& g : w.mutable_grad()) g = 1;
    std::vector<std::pair<std::string, Tensor*>> params{{"w", &w}};
    sgd_step(params, {0.5, 0, 0});
    CHECK(w.data()[0] == 0.5f);
    CHECK(w.data()[1] == 1.5f);
    CHECK_FALSE(w.has_grad());
    CHECK(code_of([&] { sgd_step(params, {0.5, 0, 0}); }) == ErrorCode::contract);

    w.zero_grad();
    for (auto& g : w.mutable_grad()) g = 3;
    sgd_step(params, {0.0, 0, 0});
    CHECK(w.data()[0] == 0.5f);

    // two steps with fixed grads == one step with the summed update
    Tensor a = Tensor::parameter({3}, {0.25f, -1, 4}), b = Tensor::parameter({3}, {0.25f, -1, 4});
    const std::vector<float> g{0.5f, 0.25f, -2};
    std::vector<std::pair<std::string, Tensor*>> pa{{"a", &a}}, pb{{"b", &b}};
    for (int i = 0; i < 2; ++i) {
        a.zero_grad();
        std::copy(g.begin(), g.end(), a.mutable_grad().begin());
        sgd_step(pa, {0.125, 0, 0});
    }
    b.zero_grad();
    std::copy(g.begin(), g.end(), b.mutable_grad().begin());
    sgd_step(pb, {0.25, 0, 0});
    for (std::size_t i = 0; i < 3; ++i) CHECK(a.data()[i] == b.data()[i]);

    // momentum and decay knobs
    Tensor m = Tensor::parameter({1}, {1});
    std::vector<std::pair<std::string, Tensor*>> pm{{"m", &m}};
    SgdState st;
    for (int i = 0; i < 2; ++i) {
        m.zero_grad();
        m.mutable_grad()[0] = 1;
        sgd_step(pm, {0.1, 0.5, 0}, &st);
    }
    CHECK(m.data()[0] == doctest::Approx(1 - 0.1 - 0.15));
    CHECK(code_of([&] {
              m.zero_grad();
              sgd_step(pm, {0.1, 0.5, 0});
          }) == ErrorCode::contract);
    Tensor d = Tensor::parameter({1}, {2});
    std::vector<std::pair<std::string, Tensor*>> pd{{"d", &d}};
    d.zero_grad();
    sgd_step(pd, {0.1, 0, 0.5});
    CHECK(d.data()[0] == doctest::Approx(2 - 0.1 * 1.0));
}

TEST_CASE("training loop: step counts, determinism and frozen encoder") {
    TempDir dir("train_loop");
    const auto toy = make_toy(4, 20);
    const auto ds = write_toy(toy, dir);
    TrainConfig cfg = quick_config();
    cfg.epochs = 3;
    cfg.shots = 16;
    auto split = featio::make_b2n_split(ds, 1, cfg.shots);
    REQUIRE(split.base_class_ids.size() == 2);
    REQUIRE(split.train_record_ids.size() == 32);

    std::vector<std::vector<float>> before;
    for (const auto& t : toy.weights.all_tensors()) before.emplace_back(t.data().begin(), t.data().end());

    std::size_t seen = 0;
    const auto a = train::train(ds, split, cfg, toy.weights, [&](const LogEntry&) { ++seen; });
    CHECK(a.step == 24);
    CHECK(a.log.size() == 24);
    CHECK(seen == 24);
    for (const auto& e : a.log) {
        CHECK(std::isfinite(e.loss));
        CHECK(e.step / 8 == e.epoch);
        CHECK(e.lr == lr_at(e.epoch, cfg));
    }

    const auto all = toy.weights.all_tensors();
    for (std::size_t i = 0; i < all.size(); ++i)
        CHECK(std::equal(before[i].begin(), before[i].end(), all[i].data().begin()));

    const auto b = train::train(ds, split, cfg, toy.weights);
    CHECK(a.log == b.log);
    CHECK(a.rng_state == b.rng_state);
    const auto pa = a.head.parameters(), pb = b.head.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
        CHECK(std::equal(pa[i].second->data().begin(), pa[i].second->data().end(), pb[i].second->data().begin()));

    TrainConfig other = cfg;
    other.seed = 2;
    CHECK(train::train(ds, split, other, toy.weights).log != a.log);

    // final short batch is kept: 10 records at batch 4 -> 3 steps per epoch
    auto short_split = featio::make_b2n_split(ds, 1, 5);
    REQUIRE(short_split.train_record_ids.size() == 10);
    CHECK(train::train(ds, short_split, cfg, toy.weights).step == 9);

    auto empty = split;
    empty.train_record_ids.clear();
    CHECK(code_of([&] { train::train(ds, empty, cfg, toy.weights); }) == ErrorCode::split);
}

TEST_CASE("training with 2 classes x 16 shots at the default schedule runs 80 steps") {
    TempDir dir("train_80");
    const auto toy = make_toy(4, 16);
    const auto ds = write_toy(toy, dir);
    TrainConfig cfg;
    cfg.heads = 2;
    const auto split = featio::make_b2n_split(ds, 1, 16);
    const auto st = train::train(ds, split, cfg, toy.weights);
    CHECK(st.step == 80);
    CHECK(st.log.back().epoch == 9);
}

TEST_CASE("parameters off the mode's path stay at init") {
    TempDir dir("train_modes");
    const auto toy = make_toy(4, 8);
    const auto ds = write_toy(toy, dir);
    TrainConfig cfg = quick_config();
    cfg.lr = 0.05;
    cfg.warmup_lr = 0.05;
    cfg.mode = ContextMode::text_only;
    const auto split = featio::make_b2n_split(ds, 1, 4);
    const auto init = initial_head(cfg, ds.manifest(), toy.weights);
    const auto st = train::train(ds, split, cfg, toy.weights);
    CHECK(st.log.front().loss > 1e-3);
    auto equal = [](const Tensor& x, const Tensor& y) { return std::equal(x.data().begin(), x.data().end(), y.data().begin()); };
    CHECK(equal(st.head.w_pv, init.w_pv));
    CHECK(equal(st.head.b_pv, init.b_pv));
    CHECK_FALSE(equal(st.head.w_pt, init.w_pt));
    CHECK_FALSE(equal(st.head.query, init.query));
    CHECK(st.head.mode == ContextMode::text_only);

    const auto labels = make_label_space(ds.manifest(), split.base_class_ids);
    const auto act = gradient_activity(init, ds.record(0), toy.weights, labels, 0.01, ContextMode::no_ca);
    for (const auto& [name, on] : act) {
        CAPTURE(name);
        const bool attention = name == "W_Q" || name == "W_K" || name == "W_V" || name == "W_O" || name.rfind("ffn", 0) == 0 ||
                               name == "W_ffn" || name == "b_ffn" || name == "W_pt" || name == "b_pt";
        CHECK(on == !attention);
    }
}

TEST_CASE("training log format") {
    const std::vector<LogEntry> log{{0, 0, 1e-5, 1.5}, {1, 1, 2e-4, 0.25}};
    const std::string text = format_log(log);
    CHECK(text == "0\t0\t1e-05\t1.5\n1\t1\t0.0002\t0.25\n");
    TempDir dir("train_logfile");
    write_log(log, dir / "log.tsv");
    CHECK(test::read_text(dir / "log.tsv") == text);
}
