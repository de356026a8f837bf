#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace bimors::check {

struct GradcheckOptions {
    double op_tolerance = 1e-3;
    double end_to_end_tolerance = 1e-2;
    // Overrides both tolerances when set.
    std::optional<double> tolerance;
    float step = 1e-3f;
    float end_to_end_step = 1e-2f;
    std::uint64_t seed = 2024;
    // Test hook: scale the backward of every node produced by this op.
    std::string corrupt_op;
};

struct GradcheckRow {
    std::string name;        // op name, or "loss:<leaf>" for the end-to-end rows
    bool end_to_end = false;
    double worst_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

struct GradcheckResult {
    std::vector<GradcheckRow> rows;
    double seconds = 0.0;

    bool passed() const;
    std::vector<std::string> failing() const;
};

// Per-op central-difference checks on random inputs, then the full prompt
// learning loss (tiny encoder: width 8, 1 layer; 3 classes, m = 2) against
// every head parameter.
GradcheckResult run_gradcheck(const GradcheckOptions& options);

std::string format_gradcheck(const GradcheckResult& result);

} // namespace bimors::check
