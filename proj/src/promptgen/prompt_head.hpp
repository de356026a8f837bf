#pragma once

#include "featio/records.hpp"
#include "tensor/tensor.hpp"
#include "textenc/text_encoder.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace bimors::promptgen {

// Which bi-modal tokens the query prompts attend to.
//   full        : [A'; V']
//   visual_only : [V']
//   text_only   : [A']
//   no_ca       : no attention, Q' + V' on every row
enum class ContextMode { full, visual_only, text_only, no_ca };

const char* context_mode_name(ContextMode mode);
ContextMode parse_context_mode(const std::string& text);

struct HeadConfig {
    std::size_t d_vis = 768;
    std::size_t d_cap = 768;
    std::size_t d = 512;
    std::size_t heads = 4;
    std::size_t m = 4;

    bool operator==(const HeadConfig&) const = default;
};

// Every trainable tensor of the prompt generator. Linear maps are stored
// input-major ([in, out]) so a row vector multiplies from the left.
struct PromptHead {
    HeadConfig config;
    ContextMode mode = ContextMode::full; // mode the head was trained under
    Tensor w_pv, b_pv;                    // visual projection d_vis -> d
    Tensor w_pt, b_pt;                    // caption projection d_cap -> d
    Tensor w_q, w_k, w_v, w_o;            // attention, bias-free, d -> d
    Tensor ffn_norm_gain, ffn_norm_bias;  // LayerNorm of the feed-forward block
    Tensor w_ffn, b_ffn;                  // Linear of the feed-forward block
    Tensor query;                         // Q', [m, d]

    std::vector<std::pair<std::string, Tensor*>> parameters();
    std::vector<std::pair<std::string, const Tensor*>> parameters() const;
    PromptHead clone() const;
};

// d_vis*d + d + d_cap*d + d + 4*d^2 + 2*d + d^2 + d + m*d
std::size_t parameter_count_formula(const HeadConfig& config);
std::size_t parameter_count(const PromptHead& head);

// Rows of the token-embedding table for `template_token_ids`, as a fresh
// trainable leaf.
Tensor init_query_tokens(const textenc::TextEncoderWeights& weights, std::span<const std::uint32_t> template_token_ids);

// First m template ids, cycling when m exceeds the template length.
std::vector<std::uint32_t> template_ids_for(const textenc::TextEncoderConfig& config, std::size_t m);

// Weights and biases of every linear map draw from U(-1/sqrt(fan_in),
// 1/sqrt(fan_in)) in declaration order from Rng(seed); the LayerNorm starts
// at gain 1 and bias 0.
PromptHead init_head(const HeadConfig& config, Tensor query, std::uint64_t seed);

Tensor project_visual(const Tensor& visual_tokens, const PromptHead& head);
Tensor project_caption(const Tensor& caption_token_embeds, const PromptHead& head);

// Multi-head attention of `query` over `context` rows with per-head scale
// 1/sqrt(d/h), output projection and residual, followed by the residual
// LayerNorm-ReLU-Linear block. When `attention` is non-null it receives the
// [h, m, n] weights.
Tensor cross_attend(const Tensor& query, const Tensor& context, const PromptHead& head, Tensor* attention = nullptr);

Tensor generate_context(const Tensor& visual_tokens, const Tensor& caption_token_embeds, const PromptHead& head,
                        ContextMode mode);
Tensor generate_context(const featio::FeatureRecord& record, const PromptHead& head, ContextMode mode);

Tensor to_tensor(const featio::Matrix& m);

// Checkpoint in the BMTW container, tensors named "head.<field>" plus
// "head.meta.heads" and "head.meta.mode".
void save_head(const PromptHead& head, const std::filesystem::path& path);
PromptHead load_head(const std::filesystem::path& path);
std::vector<NamedTensor> head_to_named(const PromptHead& head);
PromptHead head_from_named(const std::vector<NamedTensor>& tensors);

} // namespace bimors::promptgen
