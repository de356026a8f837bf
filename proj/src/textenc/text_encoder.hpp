#pragma once

#include "tensor/tensor.hpp"
#include "textenc/named_tensors.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace bimors::textenc {

// Causal pre-layernorm transformer with quick-gelu MLPs and eos-pooled
// output projection, the layout of the contrastive text tower whose weights
// get exported into BMTW containers.
struct TextEncoderConfig {
    std::size_t vocab_size = 49408;
    std::size_t context_length = 77;
    std::size_t width = 512;
    std::size_t heads = 8;
    std::size_t layers = 12;
    std::size_t embed_out_dim = 512;
    std::uint32_t sot_token = 49406;
    std::uint32_t eot_token = 49407;
    // Positions after the end token carry this id. They cannot influence the
    // output under the causal mask.
    std::uint32_t pad_token = 49407;
    // Token ids of the static context words ("a photo of a").
    std::vector<std::uint32_t> template_token_ids{320, 1125, 539, 320};

    bool operator==(const TextEncoderConfig&) const = default;
};

void validate_config(const TextEncoderConfig& config);
TextEncoderConfig load_config(const std::filesystem::path& file);
void save_config(const TextEncoderConfig& config, const std::filesystem::path& file);

// Names and shapes every container must hold for `config`, in canonical order.
std::vector<std::pair<std::string, Shape>> expected_tensors(const TextEncoderConfig& config);

struct LayerWeights {
    Tensor ln1_gain, ln1_bias;
    Tensor w_q, w_k, w_v;   // [width, width], input-major
    Tensor b_q, b_k, b_v;
    Tensor w_out, b_out;
    Tensor ln2_gain, ln2_bias;
    Tensor w_fc, b_fc;      // [width, 4 width]
    Tensor w_proj, b_proj;  // [4 width, width]
};

// Frozen parameters. Every tensor is a constant: gradients flow through
// them into injected context vectors but are never stored on them.
struct TextEncoderWeights {
    TextEncoderConfig config;
    Tensor token_embedding;      // [vocab, width]
    Tensor positional_embedding; // [context, width]
    std::vector<LayerWeights> layers;
    Tensor ln_final_gain, ln_final_bias;
    Tensor text_projection;      // [width, embed_out]
    std::vector<NamedTensor> named; // as stored, for saving

    std::vector<Tensor> all_tensors() const;
};

// Validates names and shapes against the config. Missing, extra or
// mis-shaped tensors raise missing_tensor / extra_tensor / shape errors.
TextEncoderWeights build_weights(const TextEncoderConfig& config, std::vector<NamedTensor> tensors);
TextEncoderWeights load_weights(const std::filesystem::path& path, const TextEncoderConfig& config);
void save_weights(const TextEncoderWeights& weights, const std::filesystem::path& path);

struct AssembledPrompt {
    Tensor embeddings;      // [context_length, width], positional already added
    std::size_t eos_index = 0;
    std::size_t context_tokens = 0;
};

// Layout: start token, `context` rows (positions 1..m), class tokens, end
// token, padding. `context` may be undefined for m = 0.
AssembledPrompt assemble_prompt(std::span<const std::uint32_t> class_token_ids, const Tensor& context,
                                const TextEncoderWeights& weights);

// A complete exported id sequence (start token, words, end token, optional
// padding). The end token's first occurrence is the pooling position; the
// rest of the window is filled with pad_token.
AssembledPrompt assemble_tokens(std::span<const std::uint32_t> token_ids, const TextEncoderWeights& weights);

// Returns [1, embed_out_dim]. Rows after eos_index are never read: under
// the causal mask the eos hidden state only depends on positions <= eos, so
// the forward runs on that prefix.
Tensor encode(const AssembledPrompt& prompt, const TextEncoderWeights& weights);

// Static context rows for the template words, straight from the embedding table.
Tensor template_context(const TextEncoderWeights& weights);

} // namespace bimors::textenc
