#include "textenc/parity.hpp"

#include "common/error.hpp"
#include "common/rng.hpp"
#include "tensor/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

namespace bimors::textenc {

namespace {

const std::string kPrefix = "reference.";

double cosine(std::span<const float> a, std::span<const float> b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += double(a[i]) * b[i];
        aa += double(a[i]) * a[i];
        bb += double(b[i]) * b[i];
    }
    if (aa == 0 || bb == 0) return 0.0;
    return ab / std::sqrt(aa * bb);
}

} // namespace

std::vector<NamedTensor> references_to_named(const std::vector<ReferencePrompt>& refs) {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const auto& r = refs[i];
        const std::string p = kPrefix + std::to_string(i);
        std::vector<float> ids(r.token_ids.begin(), r.token_ids.end());
        out.push_back({p + ".token_ids", {ids.size()}, std::move(ids)});
        out.push_back({p + ".embedding", {r.embedding.size()}, r.embedding});
    }
    return out;
}

std::vector<ReferencePrompt> references_from_named(const std::vector<NamedTensor>& tensors) {
    std::map<std::size_t, std::pair<const NamedTensor*, const NamedTensor*>> slots;
    for (const auto& t : tensors) {
        const auto dot = t.name.rfind('.');
        std::size_t index = 0;
        bool ok = t.name.rfind(kPrefix, 0) == 0 && dot != std::string::npos && dot > kPrefix.size();
        if (ok) {
            const std::string digits = t.name.substr(kPrefix.size(), dot - kPrefix.size());
            ok = std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; });
            if (ok) index = std::stoul(digits);
        }
        const std::string field = ok ? t.name.substr(dot + 1) : "";
        if (field != "token_ids" && field != "embedding")
            fail(ErrorCode::extra_tensor, "reference container: unexpected tensor '" + t.name + "'");
        if (t.shape.size() != 1 || t.shape[0] == 0)
            fail(ErrorCode::shape, "reference container: '" + t.name + "' must be a non-empty vector");
        auto& slot = slots[index];
        (field == "token_ids" ? slot.first : slot.second) = &t;
    }
    std::vector<ReferencePrompt> refs;
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const auto it = slots.find(i);
        const std::string p = kPrefix + std::to_string(i);
        if (it == slots.end() || !it->second.first) fail(ErrorCode::missing_tensor, "reference container: missing '" + p + ".token_ids'");
        if (!it->second.second) fail(ErrorCode::missing_tensor, "reference container: missing '" + p + ".embedding'");
        ReferencePrompt r;
        for (float v : it->second.first->values) {
            if (!(v >= 0.0f) || v != std::floor(v) || v >= 16777216.0f)
                fail(ErrorCode::validation, "reference container: '" + p + ".token_ids' holds a non-integer id");
            r.token_ids.push_back(static_cast<std::uint32_t>(v));
        }
        r.embedding = it->second.second->values;
        refs.push_back(std::move(r));
    }
    return refs;
}

void save_references(const std::vector<ReferencePrompt>& refs, const std::filesystem::path& path) {
    save_container(references_to_named(refs), path);
}

std::vector<ReferencePrompt> load_references(const std::filesystem::path& path) {
    return references_from_named(load_container(path));
}

double ParityResult::worst() const { return cosine.empty() ? 0.0 : *std::min_element(cosine.begin(), cosine.end()); }

bool ParityResult::passed() const { return !cosine.empty() && worst() > threshold; }

ParityResult check_parity(const std::vector<ReferencePrompt>& refs, const TextEncoderWeights& weights, double threshold) {
    if (refs.empty()) fail(ErrorCode::invalid_argument, "check_parity: no reference prompts");
    ParityResult result;
    result.threshold = threshold;
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const auto& r = refs[i];
        if (r.embedding.size() != weights.config.embed_out_dim)
            fail(ErrorCode::shape, "check_parity: reference " + std::to_string(i) + " embedding has " +
                                       std::to_string(r.embedding.size()) + " values, encoder emits " +
                                       std::to_string(weights.config.embed_out_dim));
        const Tensor e = encode(assemble_tokens(r.token_ids, weights), weights);
        result.cosine.push_back(cosine(e.data(), r.embedding));
    }
    return result;
}

std::vector<ReferencePrompt> make_references(const TextEncoderWeights& weights, std::size_t count, std::uint64_t seed) {
    const auto& c = weights.config;
    if (c.context_length < 3) fail(ErrorCode::validation, "make_references: context length below 3");
    Rng rng(seed);
    NoGradGuard no_grad;
    std::vector<ReferencePrompt> refs;
    for (std::size_t i = 0; i < count; ++i) {
        ReferencePrompt r;
        r.token_ids.push_back(c.sot_token);
        const std::size_t words = 1 + rng.uniform_below(c.context_length - 2);
        while (r.token_ids.size() < words + 1) {
            const auto id = static_cast<std::uint32_t>(rng.uniform_below(c.vocab_size));
            if (id != c.sot_token && id != c.eot_token && id != c.pad_token) r.token_ids.push_back(id);
        }
        r.token_ids.push_back(c.eot_token);
        const Tensor e = encode(assemble_tokens(r.token_ids, weights), weights);
        r.embedding.assign(e.data().begin(), e.data().end());
        refs.push_back(std::move(r));
    }
    return refs;
}

std::string format_parity(const ParityResult& result) {
    std::string out;
    char line[96];
    for (std::size_t i = 0; i < result.cosine.size(); ++i) {
        std::snprintf(line, sizeof line, "reference %-3zu cosine %.7f  %s\n", i, result.cosine[i],
                      result.cosine[i] > result.threshold ? "ok" : "FAIL");
        out += line;
    }
    std::snprintf(line, sizeof line, "worst %.7f, threshold %.4g: %s\n", result.worst(), result.threshold,
                  result.passed() ? "pass" : "fail");
    return out + line;
}

} // namespace bimors::textenc
