#include "safedose/safe_acquisition.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "safedose/errors.hpp"

namespace safedose {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

InputPoint at(double dose, std::span<const double> context) {
    return {dose, std::vector<double>(context.begin(), context.end())};
}

double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }
double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

} // namespace

std::vector<double> SafeBOConfig::uniform_grid(double lo, double hi, std::size_t points) {
    std::vector<double> grid(points);
    if (points == 1) {
        grid[0] = lo;
        return grid;
    }
    for (std::size_t i = 0; i < points; ++i)
        grid[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
    return grid;
}

void SafeBOConfig::validate() const {
    if (dose_grid.empty()) throw ConfigError("dose_grid", "must not be empty");
    for (std::size_t i = 0; i < dose_grid.size(); ++i) {
        if (!std::isfinite(dose_grid[i]) || dose_grid[i] < 0.0)
            throw ConfigError("dose_grid[" + std::to_string(i) + "]", "must be finite and >= 0");
        if (i > 0 && !(dose_grid[i] > dose_grid[i - 1]))
            throw ConfigError("dose_grid[" + std::to_string(i) + "]", "must be strictly ascending");
    }
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau", "must be > 0");
    if (!(beta_sqrt >= 0.0) || !std::isfinite(beta_sqrt))
        throw ConfigError("beta_sqrt", "must be >= 0");
    if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("delta", "must lie in (0, 1)");
    if (!(fallback_dose >= dose_grid.front() && fallback_dose <= dose_grid.back()))
        throw ConfigError("fallback_dose", "must lie within the dose grid bounds");
    if (!(acquisition.kappa >= 0.0) || !std::isfinite(acquisition.kappa))
        throw ConfigError("acquisition.kappa", "must be >= 0");
    if (!(safety_margin >= 0.0) || !std::isfinite(safety_margin))
        throw ConfigError("safety_margin", "must be >= 0");
}

bool SafeRegionView::empty() const {
    return std::none_of(safe_mask.begin(), safe_mask.end(), [](bool b) { return b; });
}

double constraint_lcb(const GaussianProcess& gp, const InputPoint& q, double beta_sqrt) {
    const Posterior p = gp.posterior(q);
    return p.mean - beta_sqrt * p.std;
}

double beta_schedule(std::size_t k, const SafeBOConfig& cfg) {
    if (k < 1) throw PreconditionError("iteration index must be >= 1");
    if (cfg.beta_mode == BetaMode::constant) return cfg.beta_sqrt;
    return cfg.beta_sqrt * std::sqrt(1.0 + std::log(static_cast<double>(k)));
}

SafeRegionView reveal_safe_region(std::span<const GaussianProcess> constraint_gps,
                                  std::span<const double> context, const SafeBOConfig& cfg,
                                  std::size_t k) {
    const double bs = beta_schedule(k, cfg);
    const std::size_t n = cfg.dose_grid.size();
    SafeRegionView view;
    view.safe_mask.assign(n, true);
    view.lcb_values.assign(constraint_gps.size(), std::vector<double>(n));
    for (std::size_t i = 0; i < constraint_gps.size(); ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double lcb = constraint_lcb(constraint_gps[i], at(cfg.dose_grid[j], context), bs);
            view.lcb_values[i][j] = lcb;
            if (!(lcb > cfg.safety_margin)) view.safe_mask[j] = false;
        }
    }
    return view;
}

double barrier_value(double lcb) {
    if (!(lcb > 0.0)) return kNegInf;
    return std::log(lcb);
}

double acquisition_base(const GaussianProcess& reward_gp, const InputPoint& q,
                        const AcquisitionSpec& spec, std::optional<double> incumbent) {
    const Posterior p = reward_gp.posterior(q);
    if (spec.kind == AcquisitionKind::ucb || !incumbent) return p.mean + spec.kappa * p.std;
    const double gain = p.mean - *incumbent;
    if (p.std <= 0.0) return std::max(gain, 0.0);
    const double z = gain / p.std;
    return std::max(gain * normal_cdf(z) + p.std * normal_pdf(z), 0.0);
}

DoseDecision select_dose(const GaussianProcess& reward_gp,
                         std::span<const GaussianProcess> constraint_gps,
                         std::span<const double> context, const SafeBOConfig& cfg, std::size_t k,
                         std::optional<double> incumbent) {
    const SafeRegionView region = reveal_safe_region(constraint_gps, context, cfg, k);
    const double tau = cfg.tau_decay ? cfg.tau / std::sqrt(static_cast<double>(k)) : cfg.tau;
    const std::size_t n = cfg.dose_grid.size();

    DoseDecision decision;
    decision.acquisition_trace.assign(n, kNegInf);
    std::optional<std::size_t> best;
    for (std::size_t j = 0; j < n; ++j) {
        if (!region.safe_mask[j]) continue;
        double objective =
            acquisition_base(reward_gp, at(cfg.dose_grid[j], context), cfg.acquisition, incumbent);
        for (const auto& lcbs : region.lcb_values) objective += tau * barrier_value(lcbs[j]);
        decision.acquisition_trace[j] = objective;
        // Strict comparison over an ascending grid keeps the smallest dose on ties.
        if (!best || objective > decision.acquisition_trace[*best]) best = j;
    }
    if (!best) {
        decision.dose = cfg.fallback_dose;
        decision.fallback_used = true;
    } else {
        decision.dose = cfg.dose_grid[*best];
        decision.fallback_used = false;
    }
    return decision;
}

} // namespace safedose
