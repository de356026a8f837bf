#include "synth/synthetic.hpp"

#include "common/error.hpp"
#include "common/rng.hpp"
#include "tensor/ops.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

namespace bimors::synth {

using textenc::TextEncoderConfig;
using textenc::TextEncoderWeights;

TextEncoderConfig tiny_encoder_config(std::size_t width, std::size_t layers, std::size_t heads, std::size_t vocab,
                                      std::size_t context_length) {
    TextEncoderConfig c;
    c.vocab_size = vocab;
    c.context_length = context_length;
    c.width = width;
    c.heads = heads;
    c.layers = layers;
    c.embed_out_dim = width;
    c.sot_token = static_cast<std::uint32_t>(vocab - 2);
    c.eot_token = static_cast<std::uint32_t>(vocab - 1);
    c.pad_token = c.eot_token;
    c.template_token_ids = {1, 2, 3, 1};
    textenc::validate_config(c);
    return c;
}

TextEncoderWeights random_text_encoder(const TextEncoderConfig& config, std::uint64_t seed) {
    textenc::validate_config(config);
    Rng rng(seed);
    std::vector<NamedTensor> tensors;
    for (const auto& [name, shape] : textenc::expected_tensors(config)) {
        std::vector<float> v(shape_numel(shape));
        const bool is_vector = shape.size() == 1;
        const bool is_gain = name.ends_with("ln_1.weight") || name.ends_with("ln_2.weight") || name.ends_with("ln_final.weight");
        double std_dev = 0.02;
        if (name == "positional_embedding") std_dev = 0.01;
        else if (is_gain) std_dev = 0.1;
        else if (!is_vector && name != "token_embedding.weight") std_dev = 1.0 / std::sqrt(static_cast<double>(shape.back()));
        for (auto& x : v) x = static_cast<float>((is_gain ? 1.0 : 0.0) + std_dev * rng.normal());
        tensors.push_back({name, shape, std::move(v)});
    }
    return textenc::build_weights(config, std::move(tensors));
}

namespace {

std::vector<float> normal_vector(Rng& rng, std::size_t n, double std_dev = 1.0) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(std_dev * rng.normal());
    return v;
}

featio::Matrix noisy_rows(Rng& rng, const std::vector<float>& centre, const std::vector<float>& shift, std::size_t rows,
                          float noise) {
    featio::Matrix m{rows, centre.size(), std::vector<float>(rows * centre.size())};
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < centre.size(); ++k)
            m.values[r * centre.size() + k] = centre[k] + shift[k] + noise * static_cast<float>(rng.normal());
    return m;
}

std::string class_name(std::size_t y) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "c%02zu", y);
    return buf;
}

} // namespace

SyntheticData make_synthetic(const SyntheticSpec& spec, const TextEncoderWeights& weights) {
    const auto& cfg = weights.config;
    if (spec.classes < 1 || spec.records_per_class < 1 || spec.visual_tokens < 1 || spec.caption_tokens < 1 ||
        spec.class_tokens < 1 || spec.d_vis < 1 || spec.d_cap < 1)
        fail(ErrorCode::invalid_argument, "synthetic spec: all counts must be positive");
    // ids 0..3 are template words, the top two are specials
    const std::size_t reserved_low = 4;
    if (cfg.vocab_size < reserved_low + 2 + spec.classes * spec.class_tokens)
        fail(ErrorCode::invalid_argument, "synthetic spec: vocabulary too small for distinct class tokens");
    const std::size_t m_hidden = cfg.template_token_ids.size();
    if (m_hidden + spec.class_tokens + 2 > cfg.context_length)
        fail(ErrorCode::invalid_argument, "synthetic spec: class tokens do not fit the context window");

    Rng world(spec.world_seed);
    std::vector<std::uint32_t> pool(cfg.vocab_size - reserved_low - 2);
    std::iota(pool.begin(), pool.end(), static_cast<std::uint32_t>(reserved_low));
    shuffle(std::span<std::uint32_t>(pool), world);

    SyntheticData out;
    auto& man = out.manifest;
    man.dataset_name = spec.name;
    man.d_vis = static_cast<std::uint32_t>(spec.d_vis);
    man.d_cap = static_cast<std::uint32_t>(spec.d_cap);
    man.d_clip = static_cast<std::uint32_t>(cfg.embed_out_dim);
    man.context_length = static_cast<std::uint32_t>(cfg.context_length);
    man.shared_class_ids = spec.shared_class_ids;
    std::vector<std::vector<float>> visual_centre, caption_centre, alt_caption_centre;
    for (std::size_t y = 0; y < spec.classes; ++y) {
        man.class_names.push_back(class_name(y));
        man.class_token_ids.emplace_back(pool.begin() + static_cast<std::ptrdiff_t>(y * spec.class_tokens),
                                         pool.begin() + static_cast<std::ptrdiff_t>((y + 1) * spec.class_tokens));
        visual_centre.push_back(normal_vector(world, spec.d_vis));
        caption_centre.push_back(normal_vector(world, spec.d_cap));
    }
    for (std::size_t y = 0; y < spec.classes; ++y) alt_caption_centre.push_back(normal_vector(world, spec.d_cap));
    const Tensor hidden = Tensor::constant({m_hidden, cfg.width}, normal_vector(world, m_hidden * cfg.width, 0.02));

    std::vector<std::vector<float>> clean(spec.classes);
    {
        NoGradGuard no_grad;
        for (std::size_t y = 0; y < spec.classes; ++y) {
            const Tensor e = textenc::encode(textenc::assemble_prompt(man.class_token_ids[y], hidden, weights), weights);
            clean[y].assign(e.data().begin(), e.data().end());
        }
    }

    Rng sample(spec.sample_seed ^ 0x5eed5eed5eed5eedULL);
    auto shift_vector = [&](std::size_t n) {
        std::vector<float> v = normal_vector(sample, n);
        for (auto& x : v) x *= spec.domain_shift;
        return v;
    };
    const std::vector<float> visual_shift = shift_vector(spec.d_vis);
    const std::vector<float> caption_shift = shift_vector(spec.d_cap);

    const auto& captions = spec.alternate_captions ? alt_caption_centre : caption_centre;
    for (std::size_t y = 0; y < spec.classes; ++y) {
        double norm = 0;
        for (float x : clean[y]) norm += static_cast<double>(x) * x;
        const double g_noise = spec.embed_noise * std::sqrt(norm / static_cast<double>(clean[y].size()));
        for (std::size_t i = 0; i < spec.records_per_class; ++i) {
            featio::FeatureRecord r;
            char id[64];
            std::snprintf(id, sizeof id, "%s/%s/%04zu", spec.name.c_str(), man.class_names[y].c_str(), i);
            r.image_id = id;
            r.class_id = static_cast<std::uint32_t>(y);
            r.visual_tokens = noisy_rows(sample, visual_centre[y], visual_shift, spec.visual_tokens, spec.feature_noise);
            r.global_embed = clean[y];
            for (auto& x : r.global_embed) x += static_cast<float>(g_noise * sample.normal());
            r.caption_text = "a synthetic picture of " + man.class_names[y];
            r.caption_token_embeds = noisy_rows(sample, captions[y], caption_shift, spec.caption_tokens, spec.feature_noise);
            out.records.push_back(std::move(r));
        }
    }
    man.record_count = out.records.size();
    man.metadata = {{"generator", "synthetic"},
                    {"world_seed", std::to_string(spec.world_seed)},
                    {"sample_seed", std::to_string(spec.sample_seed)},
                    {"alternate_captions", spec.alternate_captions ? "1" : "0"}};
    return out;
}

double nearest_centroid_accuracy(const std::vector<featio::FeatureRecord>& fit, const std::vector<featio::FeatureRecord>& test,
                                 std::size_t classes) {
    if (fit.empty() || test.empty()) fail(ErrorCode::invalid_argument, "nearest_centroid_accuracy: empty input");
    const std::size_t dim = fit.front().global_embed.size();
    auto unit = [](std::vector<double> v) {
        double n = 0;
        for (double x : v) n += x * x;
        n = std::sqrt(n);
        if (n > 0)
            for (double& x : v) x /= n;
        return v;
    };
    std::vector<std::vector<double>> centre(classes, std::vector<double>(dim, 0.0));
    for (const auto& r : fit) {
        const auto u = unit(std::vector<double>(r.global_embed.begin(), r.global_embed.end()));
        for (std::size_t k = 0; k < dim; ++k) centre.at(r.class_id)[k] += u[k];
    }
    for (auto& c : centre) c = unit(c);
    std::size_t correct = 0;
    for (const auto& r : test) {
        const auto u = unit(std::vector<double>(r.global_embed.begin(), r.global_embed.end()));
        std::size_t best = 0;
        double best_score = -2;
        for (std::size_t y = 0; y < classes; ++y) {
            const double s = std::inner_product(u.begin(), u.end(), centre[y].begin(), 0.0);
            if (s > best_score) best_score = s, best = y;
        }
        correct += best == r.class_id;
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(test.size());
}

} // namespace bimors::synth
