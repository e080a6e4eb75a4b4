#pragma once

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <vector>

#include "safedose/gp.hpp"
#include "safedose/safe_acquisition.hpp"

namespace safedose {

/// Empirical check of the high-probability constraint guarantee: ground truths are
/// drawn from the surrogate prior on the grid and the safe loop is run against them.
struct SafetyMcConfig {
    std::size_t seeds = 200;
    std::size_t iterations = 50;
    std::uint64_t seed = 1;
    SafeBOConfig bo{};
    KernelSpec kernel{KernelFamily::squared_exponential, 1.0, {0.1}};
    double noise_std = 0.1;

    void validate() const;
};

struct IterationStats {
    std::size_t selections = 0;  // non-fallback selections
    std::size_t violations = 0;  // true constraint < 0 at the selected dose
    std::size_t fallbacks = 0;
};

struct SafetyMcReport {
    std::vector<IterationStats> per_iteration;
    std::size_t selections = 0;
    std::size_t violations = 0;
    std::size_t fallbacks = 0;
    std::size_t surrogate_violations = 0;  // non-fallback picks with LCB <= margin (must be 0)
    double delta = 0.05;

    /// Pooled violations / non-fallback selections.
    double violation_rate() const;
    double fallback_rate() const;
    /// delta + 2 binomial standard errors at `seeds` trials.
    double bound(std::size_t seeds) const;
    double max_iteration_rate() const;
};

SafetyMcReport run_safety_mc(const SafetyMcConfig& cfg);

void write_safety_report(std::ostream& out, const SafetyMcConfig& cfg, const SafetyMcReport& r);

} // namespace safedose
