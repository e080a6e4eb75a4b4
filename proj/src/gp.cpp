#include "safedose/gp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include "safedose/errors.hpp"

namespace safedose {

namespace {

// Pivots below this fraction of signal variance are treated as singular.
constexpr double kPivotFloor = 1e-14;

std::string describe(const InputPoint& p) {
    std::ostringstream os;
    os << "(dose=" << p.dose;
    for (double c : p.context) os << ", " << c;
    os << ")";
    return os.str();
}

double clamp_log(double v, const Interval& b) {
    return std::clamp(std::log(v), std::log(b.lo), std::log(b.hi));
}

} // namespace

void KernelSpec::validate() const {
    if (!(signal_std > 0.0) || !std::isfinite(signal_std))
        throw ConfigError("signal_std", "must be > 0");
    if (lengthscales.empty())
        throw ConfigError("lengthscales", "at least one lengthscale required");
    for (std::size_t i = 0; i < lengthscales.size(); ++i) {
        if (!(lengthscales[i] > 0.0) || !std::isfinite(lengthscales[i]))
            throw ConfigError("lengthscales[" + std::to_string(i) + "]", "must be > 0");
    }
}

double kernel_eval(const KernelSpec& spec, std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.size() != spec.lengthscales.size())
        throw ConfigError("lengthscales", "dimension mismatch: kernel has " +
                                              std::to_string(spec.lengthscales.size()) +
                                              " lengthscales, inputs have " +
                                              std::to_string(a.size()) + " and " +
                                              std::to_string(b.size()));
    double r2 = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        // (a - b) and (b - a) square to the same bits, which keeps k exactly symmetric.
        const double d = (a[i] - b[i]) / spec.lengthscales[i];
        r2 += d * d;
    }
    const double var = spec.signal_std * spec.signal_std;
    switch (spec.family) {
    case KernelFamily::squared_exponential:
        return var * std::exp(-0.5 * r2);
    case KernelFamily::matern52: {
        const double s5r = std::sqrt(5.0 * r2);
        return var * (1.0 + s5r + 5.0 * r2 / 3.0) * std::exp(-s5r);
    }
    }
    return 0.0;
}

double kernel_eval(const KernelSpec& spec, const InputPoint& a, const InputPoint& b) {
    std::vector<double> fa{a.dose}, fb{b.dose};
    fa.insert(fa.end(), a.context.begin(), a.context.end());
    fb.insert(fb.end(), b.context.begin(), b.context.end());
    return kernel_eval(spec, fa, fb);
}

GaussianProcess::GaussianProcess(KernelSpec kernel, GpOptions options)
    : kernel_(std::move(kernel)), options_(options) {
    kernel_.validate();
    if (kernel_.lengthscales.size() != input_dim())
        throw ConfigError("lengthscales", "expected " + std::to_string(input_dim()) +
                                              " lengthscales, got " +
                                              std::to_string(kernel_.lengthscales.size()));
    if (!(options_.dose_hi > options_.dose_lo))
        throw ConfigError("dose_domain", "upper bound must exceed lower bound");
    if (!(options_.output_scale_floor > 0.0))
        throw ConfigError("output_scale_floor", "must be > 0");
    if (options_.jitter_rel < 0.0) throw ConfigError("jitter", "must be >= 0");
    refresh();
}

GaussianProcess GaussianProcess::condition(const Observation& obs) const {
    check_point(obs.input);
    if (!std::isfinite(obs.value)) throw PreconditionError("observation value must be finite");
    if (!(obs.noise_std >= 0.0)) throw PreconditionError("noise_std must be >= 0");
    GaussianProcess next = *this;
    next.observations_.push_back(obs);
    next.refresh();
    return next;
}

GaussianProcess GaussianProcess::with_kernel(KernelSpec kernel) const {
    GaussianProcess next(std::move(kernel), options_);
    next.observations_ = observations_;
    next.refresh();
    return next;
}

void GaussianProcess::check_point(const InputPoint& p) const {
    if (p.context.size() != options_.context_dim)
        throw ConfigError("context", "expected " + std::to_string(options_.context_dim) +
                                         " context features, got " +
                                         std::to_string(p.context.size()));
    if (!std::isfinite(p.dose) || p.dose < 0.0)
        throw PreconditionError("dose must be finite and >= 0");
    for (double c : p.context)
        if (!std::isfinite(c)) throw PreconditionError("context features must be finite");
}

std::vector<double> GaussianProcess::features(const InputPoint& p) const {
    std::vector<double> f;
    f.reserve(input_dim());
    f.push_back((p.dose - options_.dose_lo) / (options_.dose_hi - options_.dose_lo));
    f.insert(f.end(), p.context.begin(), p.context.end());
    return f;
}

void GaussianProcess::refresh() {
    const auto n = static_cast<Eigen::Index>(observations_.size());
    const auto dim = static_cast<Eigen::Index>(input_dim());

    offset_ = 0.0;
    scale_ = 1.0;
    if (options_.normalize_output && n > 0) {
        double mean = 0.0;
        for (const auto& o : observations_) mean += o.value;
        mean /= static_cast<double>(n);
        double ss = 0.0;
        for (const auto& o : observations_) ss += (o.value - mean) * (o.value - mean);
        offset_ = mean;
        scale_ = std::max(std::sqrt(ss / static_cast<double>(n)), options_.output_scale_floor);
    }

    inputs_.resize(n, dim);
    centered_.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto f = features(observations_[static_cast<std::size_t>(i)].input);
        for (Eigen::Index j = 0; j < dim; ++j) inputs_(i, j) = f[static_cast<std::size_t>(j)];
        centered_(i) = (observations_[static_cast<std::size_t>(i)].value - offset_) / scale_ -
                       options_.prior_mean;
    }

    const double var = kernel_.signal_std * kernel_.signal_std;
    const double jitter = options_.jitter_rel * var;
    Eigen::MatrixXd gram(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j <= i; ++j) {
            const double k = kernel_eval(kernel_, row(i), row(j));
            gram(i, j) = k;
            gram(j, i) = k;
        }
        const double noise = observations_[static_cast<std::size_t>(i)].noise_std / scale_;
        gram(i, i) += noise * noise + jitter;
    }

    // Plain column Cholesky so a collapsed pivot can be attributed to an observation.
    chol_ = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        double d = gram(j, j);
        for (Eigen::Index k = 0; k < j; ++k) d -= chol_(j, k) * chol_(j, k);
        if (!(d > kPivotFloor * var)) {
            const auto idx = static_cast<std::size_t>(j);
            throw NumericalError(idx, "Gram matrix not positive definite at observation " +
                                          std::to_string(idx) + " " +
                                          describe(observations_[idx].input) +
                                          "; duplicate input without noise or jitter?");
        }
        const double ljj = std::sqrt(d);
        chol_(j, j) = ljj;
        for (Eigen::Index i = j + 1; i < n; ++i) {
            double s = gram(i, j);
            for (Eigen::Index k = 0; k < j; ++k) s -= chol_(i, k) * chol_(j, k);
            chol_(i, j) = s / ljj;
        }
    }

    if (n > 0) {
        const Eigen::VectorXd z = chol_.triangularView<Eigen::Lower>().solve(centered_);
        alpha_ = chol_.transpose().triangularView<Eigen::Upper>().solve(z);
    } else {
        alpha_.resize(0);
    }
}

Posterior GaussianProcess::posterior(const InputPoint& q) const {
    check_point(q);
    const auto fq = features(q);
    const double var = kernel_.signal_std * kernel_.signal_std;
    const auto n = static_cast<Eigen::Index>(observations_.size());
    if (n == 0) return {offset_ + scale_ * options_.prior_mean, scale_ * kernel_.signal_std};

    Eigen::VectorXd kstar(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        kstar(i) = kernel_eval(kernel_, row(i), fq);
    }
    const double mean_n = options_.prior_mean + kstar.dot(alpha_);
    const Eigen::VectorXd v = chol_.triangularView<Eigen::Lower>().solve(kstar);
    // Round-off can push the variance slightly negative; it is clamped to zero.
    const double var_n = std::max(var - v.squaredNorm(), 0.0);
    return {offset_ + scale_ * mean_n, scale_ * std::sqrt(var_n)};
}

double GaussianProcess::log_marginal_likelihood() const {
    if (observations_.empty())
        throw PreconditionError("log marginal likelihood needs at least one observation");
    const auto n = static_cast<double>(observations_.size());
    const double fit = centered_.dot(alpha_);
    const double logdet = chol_.diagonal().array().log().sum();
    return -0.5 * fit - logdet - 0.5 * n * std::log(2.0 * std::numbers::pi);
}

KernelSpec fit_hyperparameters(const GaussianProcess& gp, const HyperBounds& bounds,
                               std::size_t starts) {
    const KernelSpec& incoming = gp.kernel();
    const std::size_t nl = incoming.lengthscales.size();
    if (bounds.lengthscales.size() != nl)
        throw ConfigError("bounds.lengthscales", "one interval per input dimension required");
    auto check = [](const Interval& b, const std::string& name) {
        if (!(b.lo > 0.0) || !(b.hi >= b.lo)) throw ConfigError(name, "need 0 < lo <= hi");
    };
    check(bounds.signal_std, "bounds.signal_std");
    for (std::size_t i = 0; i < nl; ++i)
        check(bounds.lengthscales[i], "bounds.lengthscales[" + std::to_string(i) + "]");

    // Parameter vector: [log signal_std, log lengthscale_0, ...]
    const std::size_t np = 1 + nl;
    std::vector<Interval> logb(np);
    logb[0] = {std::log(bounds.signal_std.lo), std::log(bounds.signal_std.hi)};
    for (std::size_t i = 0; i < nl; ++i)
        logb[1 + i] = {std::log(bounds.lengthscales[i].lo), std::log(bounds.lengthscales[i].hi)};

    auto to_spec = [&](const std::vector<double>& theta) {
        KernelSpec s = incoming;
        s.signal_std = std::exp(theta[0]);
        for (std::size_t i = 0; i < nl; ++i) s.lengthscales[i] = std::exp(theta[1 + i]);
        return s;
    };
    auto objective = [&](const std::vector<double>& theta) {
        try {
            return gp.with_kernel(to_spec(theta)).log_marginal_likelihood();
        } catch (const NumericalError&) {
            return -std::numeric_limits<double>::infinity();
        }
    };

    std::vector<double> base(np);
    base[0] = clamp_log(incoming.signal_std, bounds.signal_std);
    for (std::size_t i = 0; i < nl; ++i)
        base[1 + i] = clamp_log(incoming.lengthscales[i], bounds.lengthscales[i]);
    if (gp.size() < 4) return incoming;

    double best_val = objective(base);
    std::vector<double> best = base;

    std::mt19937_64 rng(0x5afed05eULL);
    for (std::size_t s = 0; s < std::max<std::size_t>(starts, 1); ++s) {
        std::vector<double> x = base;
        if (s > 0) {
            for (std::size_t p = 0; p < np; ++p)
                x[p] = std::uniform_real_distribution<double>(logb[p].lo, logb[p].hi)(rng);
        }
        double fx = objective(x);
        double step = 0.5;
        int evals = 0;
        while (step > 1e-3 && evals < 400) {
            bool improved = false;
            for (std::size_t p = 0; p < np; ++p) {
                for (double dir : {1.0, -1.0}) {
                    std::vector<double> y = x;
                    y[p] = std::clamp(x[p] + dir * step, logb[p].lo, logb[p].hi);
                    if (y[p] == x[p]) continue;
                    const double fy = objective(y);
                    ++evals;
                    if (fy > fx) {
                        x = std::move(y);
                        fx = fy;
                        improved = true;
                    }
                }
            }
            if (!improved) step *= 0.5;
        }
        if (fx > best_val) {
            best_val = fx;
            best = x;
        }
    }
    if (best == base) {
        bool inside = incoming.signal_std >= bounds.signal_std.lo &&
                      incoming.signal_std <= bounds.signal_std.hi;
        for (std::size_t i = 0; i < nl; ++i)
            inside = inside && incoming.lengthscales[i] >= bounds.lengthscales[i].lo &&
                     incoming.lengthscales[i] <= bounds.lengthscales[i].hi;
        if (inside) return incoming;
    }
    return to_spec(best);
}

} // namespace safedose
