#include "check/gradcheck.hpp"

#include "common/rng.hpp"
#include "synth/synthetic.hpp"
#include "tensor/ops.hpp"
#include "train/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>

namespace bimors::check {

namespace {

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

Tensor random_leaf(Shape shape, Rng& rng, bool trainable = true) {
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    return trainable ? Tensor::parameter(std::move(shape), std::move(v)) : Tensor::constant(std::move(shape), std::move(v));
}

// Max-abs difference over the larger max-abs gradient.
double relative_error(std::span<const float> analytic, const std::vector<double>& numeric) {
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
        const double a = analytic[i];
        diff = std::max(diff, std::abs(a - numeric[i]));
        scale = std::max({scale, std::abs(a), std::abs(numeric[i])});
    }
    return scale > 0.0 ? diff / scale : diff;
}


std::vector<double> central_differences(const std::function<double()>& scalar, Tensor& leaf, float h) {
    std::vector<double> numeric(leaf.numel());
    auto values = leaf.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
        const float orig = values[i];
        values[i] = orig + h;
        const double up = scalar();
        values[i] = orig - h;
        const double down = scalar();
        values[i] = orig;
        numeric[i] = (up - down) / (2.0 * static_cast<double>(h));
    }
    return numeric;
}

// Analytic gradient of graph() against central differences of scalar(), per
// leaf. `numeric_out` receives the difference quotients when non-null.
std::vector<double> leaf_errors(const std::function<double()>& scalar, const std::function<Tensor()>& graph,
                                std::vector<Tensor*> leaves, float h,
                                std::vector<std::vector<double>>* numeric_out = nullptr) {
    for (auto* t : leaves) t->clear_grad();
    backward(graph());
    std::vector<double> out;
    for (auto* t : leaves) {
        std::vector<float> analytic(t->numel(), 0.0f);
        if (t->has_grad()) std::copy(t->grad().begin(), t->grad().end(), analytic.begin());
        t->clear_grad();
        auto numeric = central_differences(scalar, *t, h);
        out.push_back(relative_error(analytic, numeric));
        if (numeric_out) numeric_out->push_back(std::move(numeric));
    }
    return out;
}

double op_error(const Fn& fn, std::vector<Tensor> inputs, Rng& rng, float h) {
    const Tensor probe = [&] {
        NoGradGuard g;
        return fn(inputs);
    }();
    std::vector<float> w(probe.numel());
    for (auto& x : w) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    const Tensor weights = Tensor::constant(probe.shape(), w);
    auto scalar = [&] {
        NoGradGuard g;
        const Tensor y = fn(inputs);
        double acc = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) acc += static_cast<double>(w[i]) * y.data()[i];
        return acc;
    };
    auto graph = [&] { return sum(mul(fn(inputs), weights)); };
    std::vector<Tensor*> leaves;
    for (auto& t : inputs)
        if (t.requires_grad()) leaves.push_back(&t);
    double worst = 0.0;
    for (double e : leaf_errors(scalar, graph, leaves, h)) worst = std::max(worst, e);
    return worst;
}

struct OpCase {
    const char* name;
    std::function<double(Rng&, float)> run;
};

std::vector<OpCase> op_cases() {
    auto simple = [](const char* name, Fn fn, std::vector<Shape> shapes) {
        return OpCase{name, [fn, shapes](Rng& rng, float h) {
                          std::vector<Tensor> in;
                          for (const auto& s : shapes) in.push_back(random_leaf(s, rng));
                          return op_error(fn, in, rng, h);
                      }};
    };
    std::vector<OpCase> cases;
    cases.push_back(simple("matmul", [](const auto& in) { return matmul(in[0], in[1]); }, {{3, 4}, {4, 2}}));
    cases.push_back(simple("matmul_batched", [](const auto& in) { return matmul(in[0], in[1]); }, {{2, 3, 4}, {2, 4, 5}}));
    cases.push_back(simple("transpose", [](const auto& in) { return transpose(in[0]); }, {{2, 3, 4}}));
    cases.push_back(simple("reshape", [](const auto& in) { return reshape(in[0], {4, 3}); }, {{3, 4}}));
    cases.push_back(simple("add", [](const auto& in) { return add(in[0], in[1]); }, {{3, 4}, {3, 4}}));
    cases.push_back(simple("sub", [](const auto& in) { return sub(in[0], in[1]); }, {{3, 4}, {3, 4}}));
    cases.push_back(simple("mul", [](const auto& in) { return mul(in[0], in[1]); }, {{3, 4}, {3, 4}}));
    cases.push_back(simple("neg", [](const auto& in) { return neg(in[0]); }, {{3, 4}}));
    cases.push_back(simple("scale", [](const auto& in) { return scale(in[0], -1.7f); }, {{3, 4}}));
    cases.push_back(simple("add_row", [](const auto& in) { return add_row(in[0], in[1]); }, {{3, 4}, {4}}));
    cases.push_back(simple("relu", [](const auto& in) { return relu(in[0]); }, {{4, 5}}));
    cases.push_back(simple("gelu_quick", [](const auto& in) { return gelu_quick(in[0]); }, {{4, 5}}));
    cases.push_back(simple("softmax", [](const auto& in) { return softmax_lastdim(in[0]); }, {{3, 7}}));
    cases.push_back(simple("causal_mask", [](const auto& in) { return softmax_lastdim(causal_mask(in[0])); }, {{2, 4, 4}}));
    cases.push_back(simple("layernorm", [](const auto& in) { return layernorm(in[0], in[1], in[2]); }, {{3, 6}, {6}, {6}}));
    cases.push_back(simple("sum", [](const auto& in) { return sum(in[0]); }, {{3, 4}}));
    cases.push_back(simple("mean_rows", [](const auto& in) { return mean_rows(in[0]); }, {{5, 3}}));
    cases.push_back(simple("concat_rows", [](const auto& in) { return concat_rows(in); }, {{2, 3}, {1, 3}, {3, 3}}));
    cases.push_back(simple("slice_rows", [](const auto& in) { return slice_rows(in[0], 1, 3); }, {{4, 3}}));
    cases.push_back(simple("split_heads", [](const auto& in) { return split_heads(in[0], 2); }, {{3, 8}}));
    cases.push_back(simple("merge_heads", [](const auto& in) { return merge_heads(in[0]); }, {{2, 3, 4}}));
    cases.push_back(simple("l2_normalize", [](const auto& in) { return l2_normalize_rows(in[0]); }, {{3, 5}}));
    cases.push_back(OpCase{"gather_rows", [](Rng& rng, float h) {
                               const std::vector<std::size_t> ids{2, 0, 2, 4};
                               return op_error([ids](const auto& in) { return gather_rows(in[0], ids); },
                                               {random_leaf({5, 3}, rng)}, rng, h);
                           }});
    cases.push_back(OpCase{"cross_entropy", [](Rng& rng, float h) {
                               const std::vector<std::size_t> labels{1, 4, 0};
                               return op_error([labels](const auto& in) { return cross_entropy(in[0], labels); },
                                               {random_leaf({3, 5}, rng)}, rng, h);
                           }});
    return cases;
}

void end_to_end(const GradcheckOptions& o, double tolerance, std::vector<GradcheckRow>& rows) {
    const auto cfg = synth::tiny_encoder_config(8, 1, 2, 32, 12);
    const auto weights = synth::random_text_encoder(cfg, o.seed);
    synth::SyntheticSpec spec;
    spec.name = "gradcheck";
    spec.classes = 3;
    spec.records_per_class = 1;
    spec.d_vis = 6;
    spec.d_cap = 5;
    spec.class_tokens = 1;
    spec.world_seed = o.seed + 1;
    spec.sample_seed = o.seed + 2;
    const auto data = synth::make_synthetic(spec, weights);

    train::TrainConfig tc;
    tc.heads = 2;
    tc.m = 2;
    tc.seed = o.seed;
    promptgen::PromptHead head = train::initial_head(tc, data.manifest, weights);
    // Template rows are ~0.02 in scale, which leaves the W_Q/W_K gradients
    // below f32 finite-difference resolution; check at a random query.
    Rng rng(o.seed + 3);
    head.query = random_leaf(head.query.shape(), rng);
    const std::vector<std::uint32_t> classes{0, 1, 2};
    const auto labels = train::make_label_space(data.manifest, classes);
    const std::vector<featio::FeatureRecord> batch{data.records[0], data.records[2]};
    // At the training temperature of 0.01 this three-class toy saturates:
    // softmax rounds to one-hot in f32 and the gradient vanishes.
    const double tau = 0.3;
    const auto mode = promptgen::ContextMode::full;

    // Analytic side: one backward of the full loss.
    std::vector<Tensor*> leaves;
    std::vector<std::string> names;
    for (auto& [name, t] : head.parameters()) {
        leaves.push_back(t);
        names.push_back(name);
    }
    backward(train::loss_batch(batch, head, weights, labels, tau, mode));
    std::vector<std::vector<float>> analytic;
    for (auto* t : leaves) {
        analytic.emplace_back(t->numel(), 0.0f);
        if (t->has_grad()) std::copy(t->grad().begin(), t->grad().end(), analytic.back().begin());
        t->clear_grad();
    }

    // Numeric side, cut at the generated context. Logits are cos / tau, so
    // the f32 loss is only resolved to ~1e-6 and single-coordinate
    // differences of it cannot see the smallest head gradients. Stage one
    // differences the loss in the context rows; stage two differences
    // sum(u * context) in the head parameters, u being stage one's result.
    std::vector<std::size_t> targets;
    for (const auto& r : batch) targets.push_back(labels.index_of(r.class_id));
    std::vector<Tensor> contexts;
    {
        NoGradGuard g;
        for (const auto& r : batch) {
            const Tensor c = promptgen::generate_context(r, head, mode);
            contexts.push_back(Tensor::parameter(c.shape(), {c.data().begin(), c.data().end()}));
        }
    }
    auto context_loss = [&] {
        std::vector<Tensor> logits;
        for (std::size_t r = 0; r < batch.size(); ++r)
            logits.push_back(train::class_logits(contexts[r], batch[r].global_embed, labels, weights, tau));
        return cross_entropy(concat_rows(logits), targets);
    };
    auto context_scalar = [&] {
        NoGradGuard g;
        return static_cast<double>(context_loss().item());
    };
    backward(context_loss());
    std::vector<std::vector<double>> upstream;
    double context_diff = 0.0, context_scale = 0.0;
    for (auto& c : contexts) {
        upstream.push_back(central_differences(context_scalar, c, o.end_to_end_step));
        for (std::size_t i = 0; i < c.numel(); ++i) {
            const double a = c.grad()[i], n = upstream.back()[i];
            context_diff = std::max(context_diff, std::abs(a - n));
            context_scale = std::max({context_scale, std::abs(a), std::abs(n)});
        }
    }
    const double context_err = context_scale > 1e-8 ? context_diff / context_scale : 1.0;
    rows.push_back({"loss:context", true, context_err, tolerance, context_err < tolerance});

    auto projected = [&] {
        NoGradGuard g;
        double acc = 0.0;
        for (std::size_t r = 0; r < batch.size(); ++r) {
            const Tensor c = promptgen::generate_context(batch[r], head, mode);
            for (std::size_t i = 0; i < c.numel(); ++i) acc += upstream[r][i] * c.data()[i];
        }
        return acc;
    };
    // Errors are max-abs differences over the largest gradient entry of the
    // whole head, i.e. the relative error of the full gradient vector split
    // out per parameter.
    std::vector<std::vector<double>> numeric;
    double scale = 0.0;
    for (std::size_t k = 0; k < leaves.size(); ++k) {
        numeric.push_back(central_differences(projected, *leaves[k], o.step));
        for (std::size_t i = 0; i < numeric[k].size(); ++i)
            scale = std::max({scale, std::abs(numeric[k][i]), std::abs(static_cast<double>(analytic[k][i]))});
    }
    for (std::size_t k = 0; k < leaves.size(); ++k) {
        double diff = 0.0;
        for (std::size_t i = 0; i < numeric[k].size(); ++i)
            diff = std::max(diff, std::abs(numeric[k][i] - analytic[k][i]));
        // a vanishing gradient means a saturated loss, which checks nothing
        const double err = scale > 1e-8 ? diff / scale : 1.0;
        rows.push_back({"loss:" + names[k], true, err, tolerance, err < tolerance});
    }
}

} // namespace

bool GradcheckResult::passed() const {
    for (const auto& r : rows)
        if (!r.passed) return false;
    return !rows.empty();
}

std::vector<std::string> GradcheckResult::failing() const {
    std::vector<std::string> out;
    for (const auto& r : rows)
        if (!r.passed) out.push_back(r.name);
    return out;
}

GradcheckResult run_gradcheck(const GradcheckOptions& o) {
    const auto start = std::chrono::steady_clock::now();
    testing::corrupt_backward(o.corrupt_op);
    GradcheckResult result;
    try {
        const double op_tol = o.tolerance.value_or(o.op_tolerance);
        const double e2e_tol = o.tolerance.value_or(o.end_to_end_tolerance);
        Rng rng(o.seed);
        for (const auto& c : op_cases()) {
            const double err = c.run(rng, o.step);
            result.rows.push_back({c.name, false, err, op_tol, err < op_tol});
        }
        end_to_end(o, e2e_tol, result.rows);
    } catch (...) {
        testing::corrupt_backward("");
        throw;
    }
    testing::corrupt_backward("");
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

std::string format_gradcheck(const GradcheckResult& result) {
    std::string out;
    char line[160];
    for (const auto& r : result.rows) {
        std::snprintf(line, sizeof line, "%-24s worst %.3e  tol %.0e  %s\n", r.name.c_str(), r.worst_error, r.tolerance,
                      r.passed ? "ok" : "FAIL");
        out += line;
    }
    std::snprintf(line, sizeof line, "%zu checks, %zu failing, %.2fs\n", result.rows.size(), result.failing().size(),
                  result.seconds);
    out += line;
    return out;
}

} // namespace bimors::check
