#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "safedose/gp.hpp"

namespace safedose {

enum class AcquisitionKind { ucb, ei };

struct AcquisitionSpec {
    AcquisitionKind kind = AcquisitionKind::ucb;
    /// Exploration weight for UCB (also used when EI has no incumbent).
    double kappa = 2.0;
};

enum class BetaMode { constant, growing };

struct SafeBOConfig {
    std::vector<double> dose_grid = uniform_grid(0.0, 20.0, 201);
    double tau = 0.05;
    /// tau_k = tau / sqrt(k) when set.
    bool tau_decay = false;
    double beta_sqrt = 2.0;
    BetaMode beta_mode = BetaMode::constant;
    double delta = 0.05;
    double fallback_dose = 0.0;
    AcquisitionSpec acquisition{};
    double safety_margin = 0.0;

    /// Throws ConfigError naming the offending field.
    void validate() const;

    static std::vector<double> uniform_grid(double lo, double hi, std::size_t points);
};

/// Lower confidence bounds of each constraint over the dose grid for one context.
struct SafeRegionView {
    std::vector<bool> safe_mask;
    /// lcb_values[i][j]: constraint i at grid point j.
    std::vector<std::vector<double>> lcb_values;

    bool empty() const;
};

struct DoseDecision {
    double dose = 0.0;
    bool fallback_used = true;
    /// Barrier objective per grid point; -inf outside the revealed safe region.
    std::vector<double> acquisition_trace;
};

double constraint_lcb(const GaussianProcess& gp, const InputPoint& q, double beta_sqrt);

/// Confidence scale for iteration k >= 1.
double beta_schedule(std::size_t k, const SafeBOConfig& cfg);

SafeRegionView reveal_safe_region(std::span<const GaussianProcess> constraint_gps,
                                  std::span<const double> context, const SafeBOConfig& cfg,
                                  std::size_t k = 1);

/// ln(lcb) for lcb > 0, -inf otherwise. The objective adds tau times this.
double barrier_value(double lcb);

/// UCB, or closed-form EI against `incumbent`. EI without an incumbent degrades to UCB.
double acquisition_base(const GaussianProcess& reward_gp, const InputPoint& q,
                        const AcquisitionSpec& spec, std::optional<double> incumbent = {});

/// Grid argmax of acquisition + tau * sum ln(lcb_i) over the revealed safe region,
/// smallest dose on ties; the fallback dose when nothing is revealed.
DoseDecision select_dose(const GaussianProcess& reward_gp,
                         std::span<const GaussianProcess> constraint_gps,
                         std::span<const double> context, const SafeBOConfig& cfg,
                         std::size_t k = 1, std::optional<double> incumbent = {});

} // namespace safedose
