#pragma once

#include "textenc/text_encoder.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace bimors::textenc {

// One exported reference prompt: the full id sequence and the embedding the
// exporting backbone produced for it.
struct ReferencePrompt {
    std::vector<std::uint32_t> token_ids;
    std::vector<float> embedding;

    bool operator==(const ReferencePrompt&) const = default;
};

// BMTW container with "reference.<i>.token_ids" [L] (ids stored as f32,
// exact below 2^24) and "reference.<i>.embedding" [E] for i = 0..n-1.
std::vector<NamedTensor> references_to_named(const std::vector<ReferencePrompt>& refs);
std::vector<ReferencePrompt> references_from_named(const std::vector<NamedTensor>& tensors);
void save_references(const std::vector<ReferencePrompt>& refs, const std::filesystem::path& path);
std::vector<ReferencePrompt> load_references(const std::filesystem::path& path);

struct ParityResult {
    std::vector<double> cosine; // per reference prompt
    double threshold = 0.0;

    double worst() const;
    bool passed() const;
};

// Cosine between encode(assemble_tokens(ids)) and each stored embedding.
ParityResult check_parity(const std::vector<ReferencePrompt>& refs, const TextEncoderWeights& weights,
                          double threshold = 0.999);

// Random word sequences encoded by `weights` itself; a self-consistent set
// for exercising the parity path without an exporter.
std::vector<ReferencePrompt> make_references(const TextEncoderWeights& weights, std::size_t count, std::uint64_t seed);

std::string format_parity(const ParityResult& result);

} // namespace bimors::textenc
