#pragma once
// Independent reference implementations used by the unit and acceptance tests.
// None of these share code with the library beyond its public types.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "safedose/dose_advisor.hpp"
#include "safedose/gp.hpp"
#include "safedose/safe_acquisition.hpp"
#include "safedose/trial_metrics.hpp"

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

/// LU with partial pivoting. Solves A X = B column by column and reports log|det A|.
struct DenseLu {
    Matrix lu;
    std::vector<std::size_t> perm;
    double log_abs_det = 0.0;

    explicit DenseLu(Matrix a) : lu(std::move(a)), perm(lu.size()) {
        const std::size_t n = lu.size();
        for (std::size_t i = 0; i < n; ++i) perm[i] = i;
        for (std::size_t c = 0; c < n; ++c) {
            std::size_t p = c;
            for (std::size_t r = c + 1; r < n; ++r)
                if (std::abs(lu[r][c]) > std::abs(lu[p][c])) p = r;
            if (lu[p][c] == 0.0) throw std::runtime_error("singular matrix");
            std::swap(lu[p], lu[c]);
            std::swap(perm[p], perm[c]);
            log_abs_det += std::log(std::abs(lu[c][c]));
            for (std::size_t r = c + 1; r < n; ++r) {
                lu[r][c] /= lu[c][c];
                for (std::size_t k = c + 1; k < n; ++k) lu[r][k] -= lu[r][c] * lu[c][k];
            }
        }
    }

    std::vector<double> solve(const std::vector<double>& b) const {
        const std::size_t n = lu.size();
        std::vector<double> x(n);
        for (std::size_t i = 0; i < n; ++i) {
            double s = b[perm[i]];
            for (std::size_t k = 0; k < i; ++k) s -= lu[i][k] * x[k];
            x[i] = s;
        }
        for (std::size_t i = n; i-- > 0;) {
            double s = x[i];
            for (std::size_t k = i + 1; k < n; ++k) s -= lu[i][k] * x[k];
            x[i] = s / lu[i][i];
        }
        return x;
    }
};

inline double kernel(const safedose::KernelSpec& spec, const std::vector<double>& a,
                     const std::vector<double>& b) {
    double r2 = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = (a[i] - b[i]) / spec.lengthscales[i];
        r2 += d * d;
    }
    const double s2 = spec.signal_std * spec.signal_std;
    if (spec.family == safedose::KernelFamily::squared_exponential) return s2 * std::exp(-r2 / 2);
    const double r = std::sqrt(r2);
    return s2 * (1 + std::sqrt(5.0) * r + 5.0 * r2 / 3.0) * std::exp(-std::sqrt(5.0) * r);
}

/// Dense-solve GP: same model as the library, computed from scratch.
struct DenseGp {
    safedose::KernelSpec spec;
    safedose::GpOptions opts;
    std::vector<std::vector<double>> x;
    std::vector<double> y;  // normalized, prior mean removed
    std::optional<DenseLu> lu;
    std::vector<double> alpha;
    double offset = 0.0;
    double scale = 1.0;

    std::vector<double> feat(const safedose::InputPoint& p) const {
        std::vector<double> f{(p.dose - opts.dose_lo) / (opts.dose_hi - opts.dose_lo)};
        for (double c : p.context) f.push_back(c);
        return f;
    }

    DenseGp(const safedose::KernelSpec& k, const safedose::GpOptions& o,
            const std::vector<safedose::Observation>& obs)
        : spec(k), opts(o) {
        const std::size_t n = obs.size();
        if (o.normalize_output && n > 0) {
            double m = 0.0;
            for (const auto& ob : obs) m += ob.value;
            m /= static_cast<double>(n);
            double v = 0.0;
            for (const auto& ob : obs) v += (ob.value - m) * (ob.value - m);
            offset = m;
            scale = std::max(std::sqrt(v / static_cast<double>(n)), o.output_scale_floor);
        }
        Matrix gram(n, std::vector<double>(n));
        for (const auto& ob : obs) {
            x.push_back(feat(ob.input));
            y.push_back((ob.value - offset) / scale - o.prior_mean);
        }
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) gram[i][j] = kernel(spec, x[i], x[j]);
            const double noise = obs[i].noise_std / scale;
            gram[i][i] += noise * noise + o.jitter_rel * spec.signal_std * spec.signal_std;
        }
        if (n > 0) {
            lu.emplace(gram);
            alpha = lu->solve(y);
        }
    }

    safedose::Posterior posterior(const safedose::InputPoint& q) const {
        const auto fq = feat(q);
        const double s2 = spec.signal_std * spec.signal_std;
        if (x.empty()) return {offset + scale * opts.prior_mean, scale * spec.signal_std};
        std::vector<double> ks(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) ks[i] = kernel(spec, x[i], fq);
        double mean = opts.prior_mean;
        for (std::size_t i = 0; i < x.size(); ++i) mean += ks[i] * alpha[i];
        const auto v = lu->solve(ks);
        double quad = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) quad += ks[i] * v[i];
        return {offset + scale * mean, scale * std::sqrt(std::max(s2 - quad, 0.0))};
    }

    double log_marginal_likelihood() const {
        double fit = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) fit += y[i] * alpha[i];
        return -0.5 * fit - 0.5 * lu->log_abs_det -
               0.5 * static_cast<double>(y.size()) * std::log(2 * std::numbers::pi);
    }
};

/// Brute-force safe selection: enumerate the grid, keep points whose every LCB
/// clears the margin, maximize acquisition plus tau * sum ln(LCB), first index wins.
inline safedose::DoseDecision brute_force_select(
    const safedose::GaussianProcess& reward, std::span<const safedose::GaussianProcess> cons,
    const std::vector<double>& ctx, const safedose::SafeBOConfig& cfg, std::size_t k,
    std::optional<double> incumbent) {
    const double bs = cfg.beta_mode == safedose::BetaMode::constant
                          ? cfg.beta_sqrt
                          : cfg.beta_sqrt * std::sqrt(1 + std::log(static_cast<double>(k)));
    const double tau = cfg.tau_decay ? cfg.tau / std::sqrt(static_cast<double>(k)) : cfg.tau;
    safedose::DoseDecision out;
    out.dose = cfg.fallback_dose;
    out.fallback_used = true;
    double best = -std::numeric_limits<double>::infinity();
    bool found = false;
    for (double d : cfg.dose_grid) {
        const safedose::InputPoint q{d, ctx};
        bool safe = true;
        double barrier = 0.0;
        for (const auto& g : cons) {
            const auto p = g.posterior(q);
            const double lcb = p.mean - bs * p.std;
            if (!(lcb > cfg.safety_margin)) safe = false;
            else barrier += std::log(lcb);
        }
        if (!safe) continue;
        const auto r = reward.posterior(q);
        double acq = r.mean + cfg.acquisition.kappa * r.std;
        if (cfg.acquisition.kind == safedose::AcquisitionKind::ei && incumbent) {
            const double gain = r.mean - *incumbent;
            if (r.std <= 0.0) {
                acq = std::max(gain, 0.0);
            } else {
                const double z = gain / r.std;
                const double cdf = 0.5 * std::erfc(-z / std::sqrt(2.0));
                const double pdf = std::exp(-z * z / 2) / std::sqrt(2 * std::numbers::pi);
                acq = std::max(gain * cdf + r.std * pdf, 0.0);
            }
        }
        const double obj = acq + tau * barrier;
        if (!found || obj > best) {
            best = obj;
            out.dose = d;
            out.fallback_used = false;
            found = true;
        }
    }
    return out;
}

/// One-pass hypoglycemia scan: a run starts when glucose drops below 70 and ends
/// at the first reading at or above 70; severe if any reading in it is below 54.
inline safedose::HypoCounts scan_hypo(std::span<const double> trace) {
    safedose::HypoCounts c;
    bool in_run = false;
    bool severe = false;
    for (double g : trace) {
        if (g < 70.0) {
            in_run = true;
            severe = severe || g < 54.0;
        } else if (in_run) {
            ++(severe ? c.severe : c.mild);
            in_run = false;
            severe = false;
        }
    }
    if (in_run) ++(severe ? c.severe : c.mild);
    return c;
}

/// A randomized optimizer state: one reward GP and 1-3 constraint GPs over a
/// dose-only or contextual input, conditioned on random data.
struct RandomState {
    safedose::GaussianProcess reward;
    std::vector<safedose::GaussianProcess> constraints;
    std::vector<double> context;
    safedose::SafeBOConfig cfg;
    std::size_t k = 1;
    std::optional<double> incumbent;
};

inline RandomState random_state(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
    auto pick = [&](std::size_t n) { return static_cast<std::size_t>(u(rng) * static_cast<double>(n)) % n; };

    RandomState s;
    const double hi = uni(5.0, 25.0);
    s.cfg.dose_grid = safedose::SafeBOConfig::uniform_grid(0.0, hi, 21 + pick(180));
    s.cfg.beta_sqrt = uni(0.0, 4.0);
    s.cfg.beta_mode = u(rng) < 0.5 ? safedose::BetaMode::constant : safedose::BetaMode::growing;
    s.cfg.tau = uni(0.001, 1.0);
    s.cfg.tau_decay = u(rng) < 0.5;
    s.cfg.safety_margin = u(rng) < 0.5 ? 0.0 : uni(0.0, 5.0);
    s.cfg.acquisition.kind = u(rng) < 0.5 ? safedose::AcquisitionKind::ucb : safedose::AcquisitionKind::ei;
    s.cfg.acquisition.kappa = uni(0.0, 3.0);
    s.k = 1 + pick(60);

    const std::size_t cdim = pick(3);
    for (std::size_t i = 0; i < cdim; ++i) s.context.push_back(u(rng));
    safedose::GpOptions opts;
    opts.dose_lo = 0.0;
    opts.dose_hi = hi;
    opts.context_dim = cdim;

    auto make = [&](double sig, double mean_shift, bool normalize) {
        safedose::KernelSpec ks;
        ks.family = u(rng) < 0.5 ? safedose::KernelFamily::squared_exponential
                                 : safedose::KernelFamily::matern52;
        ks.signal_std = sig;
        ks.lengthscales.assign(1 + cdim, 0.0);
        for (auto& l : ks.lengthscales) l = uni(0.05, 0.6);
        safedose::GpOptions o = opts;
        o.normalize_output = normalize;
        safedose::GaussianProcess gp(ks, o);
        const std::size_t n = pick(15);
        for (std::size_t i = 0; i < n; ++i) {
            safedose::InputPoint p{uni(0.0, hi), {}};
            for (std::size_t c = 0; c < cdim; ++c) p.context.push_back(u(rng));
            gp = gp.condition({p, mean_shift + sig * uni(-2.0, 2.0), uni(0.01, 0.5) * sig});
        }
        return gp;
    };
    s.reward = make(uni(0.5, 50.0), uni(-300.0, 0.0), u(rng) < 0.5);
    const std::size_t nc = 1 + pick(3);
    for (std::size_t i = 0; i < nc; ++i) s.constraints.push_back(make(uni(1.0, 40.0), uni(0.0, 60.0), false));
    if (u(rng) < 0.5) s.incumbent = uni(-250.0, 0.0);
    return s;
}

} // namespace oracle
