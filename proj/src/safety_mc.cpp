#include "safedose/safety_mc.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <random>

#include <Eigen/Cholesky>

#include "safedose/errors.hpp"

namespace safedose {

void SafetyMcConfig::validate() const {
    if (seeds < 1) throw ConfigError("safety_mc.seeds", "must be >= 1");
    if (iterations < 1) throw ConfigError("safety_mc.iterations", "must be >= 1");
    if (!(noise_std >= 0.0)) throw ConfigError("safety_mc.noise_std", "must be >= 0");
    try {
        bo.validate();
    } catch (const ConfigError& e) {
        throw ConfigError("safe_bo." + e.field(), e.message());
    }
    try {
        kernel.validate();
    } catch (const ConfigError& e) {
        throw ConfigError("safety_mc.kernel." + e.field(), e.message());
    }
    if (kernel.lengthscales.size() != 1)
        throw ConfigError("safety_mc.kernel.lengthscales", "dose-only study needs one lengthscale");
}

double SafetyMcReport::violation_rate() const {
    return selections == 0 ? 0.0
                           : static_cast<double>(violations) / static_cast<double>(selections);
}

double SafetyMcReport::fallback_rate() const {
    const std::size_t total = selections + fallbacks;
    return total == 0 ? 0.0 : static_cast<double>(fallbacks) / static_cast<double>(total);
}

double SafetyMcReport::bound(std::size_t seeds) const {
    return delta + 2.0 * std::sqrt(delta * (1.0 - delta) / static_cast<double>(seeds));
}

double SafetyMcReport::max_iteration_rate() const {
    double worst = 0.0;
    for (const auto& it : per_iteration)
        if (it.selections > 0)
            worst = std::max(worst, static_cast<double>(it.violations) /
                                        static_cast<double>(it.selections));
    return worst;
}

SafetyMcReport run_safety_mc(const SafetyMcConfig& cfg) {
    cfg.validate();
    const auto& grid = cfg.bo.dose_grid;
    const auto n = static_cast<Eigen::Index>(grid.size());

    GpOptions opts;
    opts.dose_lo = grid.front();
    opts.dose_hi = grid.size() > 1 ? grid.back() : grid.front() + 1.0;
    const GaussianProcess prior(cfg.kernel, opts);

    // Prior covariance on the grid, factored once for sampling ground truths.
    Eigen::MatrixXd cov(n, n);
    std::vector<std::vector<double>> feats;
    for (double d : grid) feats.push_back(prior.features({d, {}}));
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            cov(i, j) = kernel_eval(cfg.kernel, feats[static_cast<std::size_t>(i)],
                                    feats[static_cast<std::size_t>(j)]);
    cov.diagonal().array() += 1e-10 * cfg.kernel.signal_std * cfg.kernel.signal_std;
    const Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) throw NumericalError(0, "grid prior covariance not SPD");
    const Eigen::MatrixXd chol = llt.matrixL();

    const auto fallback_idx = static_cast<Eigen::Index>(
        std::lower_bound(grid.begin(), grid.end(), cfg.bo.fallback_dose) - grid.begin());

    SafetyMcReport report;
    report.delta = cfg.bo.delta;
    report.per_iteration.resize(cfg.iterations);

    for (std::size_t s = 0; s < cfg.seeds; ++s) {
        std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed),
                          static_cast<std::uint32_t>(cfg.seed >> 32), static_cast<std::uint32_t>(s)};
        std::mt19937_64 rng(seq);
        std::normal_distribution<double> z(0.0, 1.0);
        auto draw = [&] {
            Eigen::VectorXd e(n);
            for (Eigen::Index i = 0; i < n; ++i) e(i) = z(rng);
            return Eigen::VectorXd(chol * e);
        };

        // The fallback dose is known to be safe, so truths violating it are redrawn.
        Eigen::VectorXd constraint = draw();
        while (!(constraint(std::min(fallback_idx, n - 1)) > 0.0)) constraint = draw();
        const Eigen::VectorXd reward = draw();

        GaussianProcess reward_gp = prior;
        GaussianProcess constraint_gp = prior;
        for (std::size_t k = 1; k <= cfg.iterations; ++k) {
            const DoseDecision d = select_dose(
                reward_gp, std::span<const GaussianProcess>(&constraint_gp, 1), {}, cfg.bo, k);
            const auto idx = static_cast<Eigen::Index>(
                std::lower_bound(grid.begin(), grid.end(), d.dose) - grid.begin());
            IterationStats& it = report.per_iteration[k - 1];
            if (d.fallback_used) {
                ++it.fallbacks;
            } else {
                ++it.selections;
                if (constraint(idx) < 0.0) ++it.violations;
                if (!(constraint_lcb(constraint_gp, {d.dose, {}}, beta_schedule(k, cfg.bo)) >
                      cfg.bo.safety_margin))
                    ++report.surrogate_violations;
            }
            const double yc = constraint(idx) + cfg.noise_std * z(rng);
            const double yr = reward(idx) + cfg.noise_std * z(rng);
            constraint_gp = constraint_gp.condition({{d.dose, {}}, yc, cfg.noise_std});
            reward_gp = reward_gp.condition({{d.dose, {}}, yr, cfg.noise_std});
        }
    }
    for (const auto& it : report.per_iteration) {
        report.selections += it.selections;
        report.violations += it.violations;
        report.fallbacks += it.fallbacks;
    }
    return report;
}

void write_safety_report(std::ostream& out, const SafetyMcConfig& cfg, const SafetyMcReport& r) {
    const auto flags = out.flags();
    const auto prec = out.precision();
    out << std::fixed << std::setprecision(6);
    out << "seeds: " << cfg.seeds << '\n'
        << "iterations: " << cfg.iterations << '\n'
        << "beta_sqrt: " << cfg.bo.beta_sqrt << '\n'
        << "delta: " << cfg.bo.delta << '\n'
        << "noise_std: " << cfg.noise_std << '\n'
        << "non_fallback_selections: " << r.selections << '\n'
        << "violations: " << r.violations << '\n'
        << "violation_rate: " << r.violation_rate() << '\n'
        << "violation_bound: " << r.bound(cfg.seeds) << '\n'
        << "max_iteration_violation_rate: " << r.max_iteration_rate() << '\n'
        << "fallback_rate: " << r.fallback_rate() << '\n'
        << "surrogate_violations: " << r.surrogate_violations << '\n'
        << "within_bound: " << (r.violation_rate() <= r.bound(cfg.seeds) ? "yes" : "no") << '\n';
    out << "iteration,selections,violations,fallbacks,violation_rate\n";
    for (std::size_t k = 0; k < r.per_iteration.size(); ++k) {
        const auto& it = r.per_iteration[k];
        const double rate = it.selections == 0 ? 0.0
                                               : static_cast<double>(it.violations) /
                                                     static_cast<double>(it.selections);
        out << (k + 1) << ',' << it.selections << ',' << it.violations << ',' << it.fallbacks
            << ',' << rate << '\n';
    }
    out.flags(flags);
    out.precision(prec);
}

} // namespace safedose
