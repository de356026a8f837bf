#pragma once

#include "featio/records.hpp"
#include "textenc/text_encoder.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace bimors::synth {

// Small encoder config for desk-scale runs. Specials sit at the top of the
// vocabulary; the template uses ids 1, 2, 3, 1 ("a photo of a").
textenc::TextEncoderConfig tiny_encoder_config(std::size_t width = 16, std::size_t layers = 1, std::size_t heads = 2,
                                               std::size_t vocab = 64, std::size_t context_length = 16);

// Random frozen weights with the usual scales of the encoder family
// (embeddings ~0.02-ish, linear weights ~1/sqrt(fan_in)); LayerNorm gains and
// biases are jittered so tests notice a dropped affine term.
textenc::TextEncoderWeights random_text_encoder(const textenc::TextEncoderConfig& config, std::uint64_t seed);

struct SyntheticSpec {
    std::string name = "synthetic";
    std::size_t classes = 5;
    std::size_t records_per_class = 20;
    std::size_t visual_tokens = 4;
    std::size_t caption_tokens = 3;
    std::size_t d_vis = 12;
    std::size_t d_cap = 12;
    std::size_t class_tokens = 2;
    float feature_noise = 0.3f;
    // Relative to the norm of the clean global embedding.
    float embed_noise = 0.1f;
    // Class centroids, class tokens and the hidden context come from
    // world_seed; per-record noise from sample_seed. Two specs sharing a
    // world_seed describe the same classes under different samples.
    std::uint64_t world_seed = 1;
    std::uint64_t sample_seed = 1;
    // Magnitude of a record-independent offset added to every visual and
    // caption token (a domain shift that leaves the class structure alone).
    float domain_shift = 0.0f;
    // Caption embeddings drawn from a second, independent set of centroids,
    // standing in for an alternative caption-token exporter.
    bool alternate_captions = false;
    std::vector<std::uint32_t> shared_class_ids;
};

struct SyntheticData {
    featio::DatasetManifest manifest;
    std::vector<featio::FeatureRecord> records;
};

// Global embeddings are encoder outputs for each record's class under a
// hidden context that differs from the template, plus noise: separable by
// construction, but not by the untrained template prompt alone.
SyntheticData make_synthetic(const SyntheticSpec& spec, const textenc::TextEncoderWeights& weights);

// Share of records whose global embedding is closest (cosine) to the mean
// embedding of their own class, in percent. Centroids come from `fit`.
double nearest_centroid_accuracy(const std::vector<featio::FeatureRecord>& fit,
                                 const std::vector<featio::FeatureRecord>& test, std::size_t classes);

} // namespace bimors::synth
