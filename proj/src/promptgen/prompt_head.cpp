#include "promptgen/prompt_head.hpp"

#include "common/error.hpp"
#include "common/rng.hpp"
#include "tensor/ops.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace bimors::promptgen {

const char* context_mode_name(ContextMode mode) {
    switch (mode) {
    case ContextMode::full: return "full";
    case ContextMode::visual_only: return "visual_only";
    case ContextMode::text_only: return "text_only";
    case ContextMode::no_ca: return "no_ca";
    }
    return "?";
}

ContextMode parse_context_mode(const std::string& text) {
    for (auto m : {ContextMode::full, ContextMode::visual_only, ContextMode::text_only, ContextMode::no_ca})
        if (text == context_mode_name(m)) return m;
    fail(ErrorCode::invalid_argument, "unknown ablation mode '" + text + "' (expected full, visual_only, text_only or no_ca)");
}

std::vector<std::pair<std::string, Tensor*>> PromptHead::parameters() {
    return {{"W_pv", &w_pv}, {"b_pv", &b_pv}, {"W_pt", &w_pt}, {"b_pt", &b_pt}, {"W_Q", &w_q}, {"W_K", &w_k}, {"W_V", &w_v},
            {"W_O", &w_o}, {"ffn_norm_gain", &ffn_norm_gain}, {"ffn_norm_bias", &ffn_norm_bias}, {"W_ffn", &w_ffn},
            {"b_ffn", &b_ffn}, {"Q", &query}};
}

std::vector<std::pair<std::string, const Tensor*>> PromptHead::parameters() const {
    auto mut = const_cast<PromptHead*>(this)->parameters();
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (auto& [n, t] : mut) out.emplace_back(n, t);
    return out;
}

PromptHead PromptHead::clone() const {
    PromptHead out;
    out.config = config;
    out.mode = mode;
    auto dst = out.parameters();
    auto src = parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
        const Tensor& t = *src[i].second;
        *dst[i].second = Tensor::parameter(t.shape(), std::vector<float>(t.data().begin(), t.data().end()));
    }
    return out;
}

std::size_t parameter_count_formula(const HeadConfig& c) {
    const std::size_t d = c.d;
    return (c.d_vis * d + d) + (c.d_cap * d + d) + 4 * d * d + 2 * d + (d * d + d) + c.m * d;
}

std::size_t parameter_count(const PromptHead& head) {
    std::size_t n = 0;
    for (const auto& [name, t] : head.parameters()) n += t->numel();
    return n;
}

Tensor init_query_tokens(const textenc::TextEncoderWeights& weights, std::span<const std::uint32_t> template_token_ids) {
    if (template_token_ids.empty()) fail(ErrorCode::invalid_argument, "init_query_tokens: no template ids");
    const std::size_t vocab = weights.token_embedding.dim(0);
    const std::size_t width = weights.token_embedding.dim(1);
    const auto table = weights.token_embedding.data();
    std::vector<float> rows;
    rows.reserve(template_token_ids.size() * width);
    for (auto id : template_token_ids) {
        if (id >= vocab)
            fail(ErrorCode::index, "init_query_tokens: template id " + std::to_string(id) + " outside vocab of " + std::to_string(vocab));
        rows.insert(rows.end(), table.begin() + static_cast<std::ptrdiff_t>(id * width),
                    table.begin() + static_cast<std::ptrdiff_t>((id + 1) * width));
    }
    return Tensor::parameter({template_token_ids.size(), width}, std::move(rows));
}

std::vector<std::uint32_t> template_ids_for(const textenc::TextEncoderConfig& config, std::size_t m) {
    const auto& t = config.template_token_ids;
    if (t.empty()) fail(ErrorCode::validation, "text encoder config has no template tokens");
    std::vector<std::uint32_t> out(m);
    for (std::size_t i = 0; i < m; ++i) out[i] = t[i % t.size()];
    return out;
}

PromptHead init_head(const HeadConfig& c, Tensor query, std::uint64_t seed) {
    if (c.heads == 0 || c.d % c.heads != 0)
        fail(ErrorCode::validation, "prompt head: d " + std::to_string(c.d) + " not divisible by heads " + std::to_string(c.heads));
    if (c.m == 0) fail(ErrorCode::validation, "prompt head: m must be at least 1");
    if (query.shape() != Shape{c.m, c.d})
        fail(ErrorCode::shape, "prompt head: query init " + shape_str(query.shape()) + " != [" + std::to_string(c.m) + "," +
                                   std::to_string(c.d) + "]");
    Rng rng(seed);
    auto uniform = [&](Shape shape, std::size_t fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::vector<float> v(shape_numel(shape));
        for (auto& x : v) x = static_cast<float>(rng.uniform(-bound, bound));
        return Tensor::parameter(std::move(shape), std::move(v));
    };
    PromptHead h;
    h.config = c;
    h.w_pv = uniform({c.d_vis, c.d}, c.d_vis);
    h.b_pv = uniform({c.d}, c.d_vis);
    h.w_pt = uniform({c.d_cap, c.d}, c.d_cap);
    h.b_pt = uniform({c.d}, c.d_cap);
    h.w_q = uniform({c.d, c.d}, c.d);
    h.w_k = uniform({c.d, c.d}, c.d);
    h.w_v = uniform({c.d, c.d}, c.d);
    h.w_o = uniform({c.d, c.d}, c.d);
    h.w_ffn = uniform({c.d, c.d}, c.d);
    h.b_ffn = uniform({c.d}, c.d);
    h.ffn_norm_gain = Tensor::parameter({c.d}, std::vector<float>(c.d, 1.0f));
    h.ffn_norm_bias = Tensor::parameter({c.d}, std::vector<float>(c.d, 0.0f));
    h.query = Tensor::parameter(query.shape(), std::vector<float>(query.data().begin(), query.data().end()));
    return h;
}

namespace {

void require_width(const char* what, const Tensor& x, std::size_t expected) {
    if (x.rank() != 2 || x.dim(1) != expected)
        fail(ErrorCode::shape, std::string(what) + ": input " + shape_str(x.shape()) + " needs width " + std::to_string(expected));
}

} // namespace

Tensor project_visual(const Tensor& visual_tokens, const PromptHead& head) {
    require_width("project_visual", visual_tokens, head.config.d_vis);
    return add_row(matmul(mean_rows(visual_tokens), head.w_pv), head.b_pv);
}

Tensor project_caption(const Tensor& caption_token_embeds, const PromptHead& head) {
    require_width("project_caption", caption_token_embeds, head.config.d_cap);
    return add_row(matmul(mean_rows(caption_token_embeds), head.w_pt), head.b_pt);
}

Tensor cross_attend(const Tensor& query, const Tensor& context, const PromptHead& head, Tensor* attention) {
    const auto& c = head.config;
    require_width("cross_attend query", query, c.d);
    require_width("cross_attend context", context, c.d);
    const std::size_t head_dim = c.d / c.heads;
    Tensor q = split_heads(matmul(query, head.w_q), c.heads);
    Tensor k = split_heads(matmul(context, head.w_k), c.heads);
    Tensor v = split_heads(matmul(context, head.w_v), c.heads);
    Tensor att = softmax_lastdim(scale(matmul(q, transpose(k)), 1.0f / std::sqrt(static_cast<float>(head_dim))));
    if (attention) *attention = att;
    Tensor x = add(matmul(merge_heads(matmul(att, v)), head.w_o), query);
    Tensor y = add_row(matmul(relu(layernorm(x, head.ffn_norm_gain, head.ffn_norm_bias)), head.w_ffn), head.b_ffn);
    return add(x, y);
}

Tensor generate_context(const Tensor& visual_tokens, const Tensor& caption_token_embeds, const PromptHead& head,
                        ContextMode mode) {
    switch (mode) {
    case ContextMode::full: {
        const Tensor fused[] = {project_caption(caption_token_embeds, head), project_visual(visual_tokens, head)};
        return cross_attend(head.query, concat_rows(fused), head);
    }
    case ContextMode::visual_only: return cross_attend(head.query, project_visual(visual_tokens, head), head);
    case ContextMode::text_only: return cross_attend(head.query, project_caption(caption_token_embeds, head), head);
    case ContextMode::no_ca: return add_row(head.query, project_visual(visual_tokens, head));
    }
    fail(ErrorCode::internal, "unhandled context mode");
}

Tensor to_tensor(const featio::Matrix& m) { return Tensor::constant({m.rows, m.cols}, m.values); }

Tensor generate_context(const featio::FeatureRecord& record, const PromptHead& head, ContextMode mode) {
    return generate_context(to_tensor(record.visual_tokens), to_tensor(record.caption_token_embeds), head, mode);
}

std::vector<NamedTensor> head_to_named(const PromptHead& head) {
    std::vector<NamedTensor> out;
    for (const auto& [name, t] : head.parameters())
        out.push_back({"head." + name, t->shape(), std::vector<float>(t->data().begin(), t->data().end())});
    out.push_back({"head.meta.heads", {1}, {static_cast<float>(head.config.heads)}});
    out.push_back({"head.meta.mode", {1}, {static_cast<float>(static_cast<int>(head.mode))}});
    return out;
}

PromptHead head_from_named(const std::vector<NamedTensor>& tensors) {
    std::map<std::string, const NamedTensor*> by_name;
    for (const auto& t : tensors) {
        if (t.name.rfind("head.", 0) != 0) fail(ErrorCode::extra_tensor, "head checkpoint: unexpected tensor '" + t.name + "'");
        by_name[t.name.substr(5)] = &t;
    }
    auto get = [&](const std::string& name) -> const NamedTensor& {
        auto it = by_name.find(name);
        if (it == by_name.end()) fail(ErrorCode::missing_tensor, "head checkpoint: missing tensor 'head." + name + "'");
        return *it->second;
    };
    const auto& q = get("Q");
    const auto& wpv = get("W_pv");
    const auto& wpt = get("W_pt");
    if (q.shape.size() != 2 || wpv.shape.size() != 2 || wpt.shape.size() != 2)
        fail(ErrorCode::shape, "head checkpoint: Q, W_pv and W_pt must be matrices");
    PromptHead h;
    h.config.m = q.shape[0];
    h.config.d = q.shape[1];
    h.config.d_vis = wpv.shape[0];
    h.config.d_cap = wpt.shape[0];
    h.config.heads = static_cast<std::size_t>(get("meta.heads").values.at(0));
    const int mode = static_cast<int>(get("meta.mode").values.at(0));
    if (mode < 0 || mode > 3) fail(ErrorCode::validation, "head checkpoint: bad mode " + std::to_string(mode));
    h.mode = static_cast<ContextMode>(mode);
    const auto& c = h.config;
    const std::map<std::string, Shape> expected{
        {"W_pv", {c.d_vis, c.d}}, {"b_pv", {c.d}}, {"W_pt", {c.d_cap, c.d}}, {"b_pt", {c.d}}, {"W_Q", {c.d, c.d}},
        {"W_K", {c.d, c.d}}, {"W_V", {c.d, c.d}}, {"W_O", {c.d, c.d}}, {"ffn_norm_gain", {c.d}}, {"ffn_norm_bias", {c.d}},
        {"W_ffn", {c.d, c.d}}, {"b_ffn", {c.d}}, {"Q", {c.m, c.d}}};
    for (auto& [name, slot] : h.parameters()) {
        const auto& t = get(name);
        if (t.shape != expected.at(name))
            fail(ErrorCode::shape, "head checkpoint: 'head." + name + "' has shape " + shape_str(t.shape) + ", expected " +
                                       shape_str(expected.at(name)));
        *slot = Tensor::parameter(t.shape, t.values);
    }
    if (by_name.size() != expected.size() + 2) {
        for (const auto& [name, t] : by_name)
            if (!expected.count(name) && name != "meta.heads" && name != "meta.mode")
                fail(ErrorCode::extra_tensor, "head checkpoint: unexpected tensor 'head." + name + "'");
    }
    if (c.heads == 0 || c.d % c.heads != 0) fail(ErrorCode::validation, "head checkpoint: invalid head count");
    return h;
}

void save_head(const PromptHead& head, const std::filesystem::path& path) { save_container(head_to_named(head), path); }

PromptHead load_head(const std::filesystem::path& path) { return head_from_named(load_container(path)); }

} // namespace bimors::promptgen
