#include "textenc/text_encoder.hpp"

#include "common/error.hpp"
#include "common/kv_text.hpp"
#include "tensor/ops.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace bimors::textenc {

namespace fs = std::filesystem;

void validate_config(const TextEncoderConfig& c) {
    if (c.vocab_size == 0 || c.context_length == 0 || c.width == 0 || c.heads == 0 || c.layers == 0 || c.embed_out_dim == 0)
        fail(ErrorCode::validation, "text encoder config: all sizes must be positive");
    if (c.width % c.heads != 0)
        fail(ErrorCode::validation, "text encoder config: width " + std::to_string(c.width) + " not divisible by heads " +
                                        std::to_string(c.heads));
    for (auto id : {c.sot_token, c.eot_token, c.pad_token})
        if (id >= c.vocab_size) fail(ErrorCode::validation, "text encoder config: special token " + std::to_string(id) + " outside vocab");
    for (auto id : c.template_token_ids)
        if (id >= c.vocab_size) fail(ErrorCode::validation, "text encoder config: template token " + std::to_string(id) + " outside vocab");
}

TextEncoderConfig load_config(const fs::path& file) {
    const KvDocument doc = KvDocument::load(file);
    if (doc.find("kind") != std::optional<std::string>("bimors.text_encoder"))
        fail(ErrorCode::format, file.string() + " is not a text encoder config");
    TextEncoderConfig c;
    c.vocab_size = static_cast<std::size_t>(doc.get_int("vocab_size"));
    c.context_length = static_cast<std::size_t>(doc.get_int("context_length"));
    c.width = static_cast<std::size_t>(doc.get_int("width"));
    c.heads = static_cast<std::size_t>(doc.get_int("heads"));
    c.layers = static_cast<std::size_t>(doc.get_int("layers"));
    c.embed_out_dim = static_cast<std::size_t>(doc.get_int("embed_out_dim"));
    c.sot_token = static_cast<std::uint32_t>(doc.get_int("sot_token"));
    c.eot_token = static_cast<std::uint32_t>(doc.get_int("eot_token"));
    c.pad_token = doc.has("pad_token") ? static_cast<std::uint32_t>(doc.get_int("pad_token")) : c.eot_token;
    c.template_token_ids.clear();
    for (auto id : doc.get_ints("template_token_ids")) c.template_token_ids.push_back(static_cast<std::uint32_t>(id));
    validate_config(c);
    return c;
}

void save_config(const TextEncoderConfig& c, const fs::path& file) {
    KvDocument doc;
    doc.set("kind", std::string("bimors.text_encoder"));
    doc.set("vocab_size", static_cast<std::int64_t>(c.vocab_size));
    doc.set("context_length", static_cast<std::int64_t>(c.context_length));
    doc.set("width", static_cast<std::int64_t>(c.width));
    doc.set("heads", static_cast<std::int64_t>(c.heads));
    doc.set("layers", static_cast<std::int64_t>(c.layers));
    doc.set("embed_out_dim", static_cast<std::int64_t>(c.embed_out_dim));
    doc.set("sot_token", std::int64_t{c.sot_token});
    doc.set("eot_token", std::int64_t{c.eot_token});
    doc.set("pad_token", std::int64_t{c.pad_token});
    doc.set_ints("template_token_ids", std::vector<std::int64_t>(c.template_token_ids.begin(), c.template_token_ids.end()));
    doc.save(file);
}

std::vector<std::pair<std::string, Shape>> expected_tensors(const TextEncoderConfig& c) {
    const std::size_t w = c.width;
    std::vector<std::pair<std::string, Shape>> out{
        {"token_embedding.weight", {c.vocab_size, w}},
        {"positional_embedding", {c.context_length, w}},
    };
    for (std::size_t i = 0; i < c.layers; ++i) {
        const std::string p = "transformer.resblocks." + std::to_string(i) + ".";
        out.push_back({p + "ln_1.weight", {w}});
        out.push_back({p + "ln_1.bias", {w}});
        out.push_back({p + "attn.in_proj_weight", {3 * w, w}});
        out.push_back({p + "attn.in_proj_bias", {3 * w}});
        out.push_back({p + "attn.out_proj.weight", {w, w}});
        out.push_back({p + "attn.out_proj.bias", {w}});
        out.push_back({p + "ln_2.weight", {w}});
        out.push_back({p + "ln_2.bias", {w}});
        out.push_back({p + "mlp.c_fc.weight", {4 * w, w}});
        out.push_back({p + "mlp.c_fc.bias", {4 * w}});
        out.push_back({p + "mlp.c_proj.weight", {w, 4 * w}});
        out.push_back({p + "mlp.c_proj.bias", {w}});
    }
    out.push_back({"ln_final.weight", {w}});
    out.push_back({"ln_final.bias", {w}});
    out.push_back({"text_projection", {w, c.embed_out_dim}});
    return out;
}

namespace {

// Stored linear weights are [out, in]; compute wants in-major [in, out].
// `row_begin` selects a block of output rows (for the fused qkv projection).
Tensor input_major(const NamedTensor& t, std::size_t row_begin, std::size_t rows) {
    const std::size_t in = t.shape[1];
    std::vector<float> out(in * rows);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < in; ++k) out[k * rows + r] = t.values[(row_begin + r) * in + k];
    return Tensor::constant({in, rows}, std::move(out));
}

Tensor vector_block(const NamedTensor& t, std::size_t begin, std::size_t n) {
    return Tensor::constant({n}, std::vector<float>(t.values.begin() + static_cast<std::ptrdiff_t>(begin),
                                                    t.values.begin() + static_cast<std::ptrdiff_t>(begin + n)));
}

Tensor as_constant(const NamedTensor& t) { return Tensor::constant(t.shape, t.values); }

} // namespace

std::vector<Tensor> TextEncoderWeights::all_tensors() const {
    std::vector<Tensor> out{token_embedding, positional_embedding};
    for (const auto& l : layers)
        for (const Tensor* t : {&l.ln1_gain, &l.ln1_bias, &l.w_q, &l.w_k, &l.w_v, &l.b_q, &l.b_k, &l.b_v, &l.w_out, &l.b_out,
                                &l.ln2_gain, &l.ln2_bias, &l.w_fc, &l.b_fc, &l.w_proj, &l.b_proj})
            out.push_back(*t);
    out.push_back(ln_final_gain);
    out.push_back(ln_final_bias);
    out.push_back(text_projection);
    return out;
}

TextEncoderWeights build_weights(const TextEncoderConfig& config, std::vector<NamedTensor> tensors) {
    validate_config(config);
    std::map<std::string, std::size_t> by_name;
    for (std::size_t i = 0; i < tensors.size(); ++i) by_name.emplace(tensors[i].name, i);
    const auto expected = expected_tensors(config);
    std::map<std::string, bool> wanted;
    for (const auto& [name, shape] : expected) {
        auto it = by_name.find(name);
        if (it == by_name.end()) fail(ErrorCode::missing_tensor, "text encoder weights: missing tensor '" + name + "'");
        const auto& t = tensors[it->second];
        if (t.shape != shape)
            fail(ErrorCode::shape, "text encoder weights: tensor '" + name + "' has shape " + shape_str(t.shape) +
                                       ", expected " + shape_str(shape));
        wanted[name] = true;
    }
    for (const auto& t : tensors)
        if (!wanted.count(t.name)) fail(ErrorCode::extra_tensor, "text encoder weights: unexpected tensor '" + t.name + "'");

    auto get = [&](const std::string& name) -> const NamedTensor& { return tensors[by_name.at(name)]; };
    TextEncoderWeights w;
    w.config = config;
    const std::size_t width = config.width;
    w.token_embedding = as_constant(get("token_embedding.weight"));
    w.positional_embedding = as_constant(get("positional_embedding"));
    for (std::size_t i = 0; i < config.layers; ++i) {
        const std::string p = "transformer.resblocks." + std::to_string(i) + ".";
        LayerWeights l;
        l.ln1_gain = as_constant(get(p + "ln_1.weight"));
        l.ln1_bias = as_constant(get(p + "ln_1.bias"));
        const auto& in_w = get(p + "attn.in_proj_weight");
        const auto& in_b = get(p + "attn.in_proj_bias");
        l.w_q = input_major(in_w, 0, width);
        l.w_k = input_major(in_w, width, width);
        l.w_v = input_major(in_w, 2 * width, width);
        l.b_q = vector_block(in_b, 0, width);
        l.b_k = vector_block(in_b, width, width);
        l.b_v = vector_block(in_b, 2 * width, width);
        const auto& out_w = get(p + "attn.out_proj.weight");
        l.w_out = input_major(out_w, 0, width);
        l.b_out = as_constant(get(p + "attn.out_proj.bias"));
        l.ln2_gain = as_constant(get(p + "ln_2.weight"));
        l.ln2_bias = as_constant(get(p + "ln_2.bias"));
        const auto& fc = get(p + "mlp.c_fc.weight");
        l.w_fc = input_major(fc, 0, 4 * width);
        l.b_fc = as_constant(get(p + "mlp.c_fc.bias"));
        const auto& proj = get(p + "mlp.c_proj.weight");
        l.w_proj = input_major(proj, 0, width);
        l.b_proj = as_constant(get(p + "mlp.c_proj.bias"));
        w.layers.push_back(std::move(l));
    }
    w.ln_final_gain = as_constant(get("ln_final.weight"));
    w.ln_final_bias = as_constant(get("ln_final.bias"));
    w.text_projection = as_constant(get("text_projection"));

    // canonical order for saving
    for (const auto& [name, shape] : expected) w.named.push_back(std::move(tensors[by_name.at(name)]));
    return w;
}

TextEncoderWeights load_weights(const fs::path& path, const TextEncoderConfig& config) {
    return build_weights(config, load_container(path));
}

void save_weights(const TextEncoderWeights& weights, const fs::path& path) { save_container(weights.named, path); }

AssembledPrompt assemble_prompt(std::span<const std::uint32_t> class_token_ids, const Tensor& context,
                                const TextEncoderWeights& weights) {
    const auto& c = weights.config;
    const std::size_t m = context.defined() ? context.dim(0) : 0;
    if (context.defined() && (context.rank() != 2 || context.dim(1) != c.width))
        fail(ErrorCode::shape, "assemble_prompt: context " + shape_str(context.shape()) + " does not match width " +
                                   std::to_string(c.width));
    const std::size_t used = m + class_token_ids.size() + 2;
    if (used > c.context_length)
        fail(ErrorCode::length, "assemble_prompt: " + std::to_string(m) + " context + " + std::to_string(class_token_ids.size()) +
                                    " class tokens + 2 specials exceed context length " + std::to_string(c.context_length));

    std::vector<std::size_t> head{c.sot_token};
    std::vector<std::size_t> tail(class_token_ids.begin(), class_token_ids.end());
    tail.push_back(c.eot_token);
    tail.resize(c.context_length - 1 - m, c.pad_token);

    std::vector<Tensor> parts{gather_rows(weights.token_embedding, head)};
    if (m > 0) parts.push_back(context);
    parts.push_back(gather_rows(weights.token_embedding, tail));

    AssembledPrompt p;
    p.embeddings = add(concat_rows(parts), weights.positional_embedding);
    p.eos_index = 1 + m + class_token_ids.size();
    p.context_tokens = m;
    return p;
}

AssembledPrompt assemble_tokens(std::span<const std::uint32_t> token_ids, const TextEncoderWeights& weights) {
    const auto& c = weights.config;
    if (token_ids.empty() || token_ids.front() != c.sot_token)
        fail(ErrorCode::validation, "assemble_tokens: sequence must start with the start token " + std::to_string(c.sot_token));
    if (token_ids.size() > c.context_length)
        fail(ErrorCode::length, "assemble_tokens: " + std::to_string(token_ids.size()) + " ids exceed context length " +
                                    std::to_string(c.context_length));
    const auto eot = std::find(token_ids.begin(), token_ids.end(), c.eot_token);
    if (eot == token_ids.end()) fail(ErrorCode::validation, "assemble_tokens: no end token in sequence");
    std::vector<std::size_t> ids(token_ids.begin(), token_ids.end());
    for (auto id : ids)
        if (id >= c.vocab_size)
            fail(ErrorCode::index, "assemble_tokens: token id " + std::to_string(id) + " outside vocab " + std::to_string(c.vocab_size));
    ids.resize(c.context_length, c.pad_token);
    AssembledPrompt p;
    p.embeddings = add(gather_rows(weights.token_embedding, ids), weights.positional_embedding);
    p.eos_index = static_cast<std::size_t>(eot - token_ids.begin());
    return p;
}

Tensor encode(const AssembledPrompt& prompt, const TextEncoderWeights& weights) {
    const auto& c = weights.config;
    const std::size_t L = prompt.eos_index + 1;
    const std::size_t head_dim = c.width / c.heads;
    const float attn_scale = 1.0f / std::sqrt(static_cast<float>(head_dim));

    Tensor x = slice_rows(prompt.embeddings, 0, L);
    for (const auto& l : weights.layers) {
        Tensor h = layernorm(x, l.ln1_gain, l.ln1_bias);
        Tensor q = split_heads(add_row(matmul(h, l.w_q), l.b_q), c.heads);
        Tensor k = split_heads(add_row(matmul(h, l.w_k), l.b_k), c.heads);
        Tensor v = split_heads(add_row(matmul(h, l.w_v), l.b_v), c.heads);
        Tensor att = softmax_lastdim(causal_mask(scale(matmul(q, transpose(k)), attn_scale)));
        Tensor o = merge_heads(matmul(att, v));
        x = add(x, add_row(matmul(o, l.w_out), l.b_out));

        Tensor h2 = layernorm(x, l.ln2_gain, l.ln2_bias);
        Tensor f = gelu_quick(add_row(matmul(h2, l.w_fc), l.b_fc));
        x = add(x, add_row(matmul(f, l.w_proj), l.b_proj));
    }
    Tensor eos = layernorm(slice_rows(x, L - 1, L), weights.ln_final_gain, weights.ln_final_bias);
    return matmul(eos, weights.text_projection);
}

Tensor template_context(const TextEncoderWeights& weights) {
    const auto& ids = weights.config.template_token_ids;
    if (ids.empty()) fail(ErrorCode::validation, "text encoder config has no template tokens");
    std::vector<std::size_t> rows(ids.begin(), ids.end());
    return gather_rows(weights.token_embedding, rows);
}

} // namespace bimors::textenc
