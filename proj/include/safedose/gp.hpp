#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace safedose {

/// A query location: bolus dose in units (U) plus normalized context features in [0,1].
struct InputPoint {
    double dose = 0.0;
    std::vector<double> context;
};

struct Observation {
    InputPoint input;
    double value = 0.0;
    double noise_std = 0.0;
};

enum class KernelFamily { squared_exponential, matern52 };

struct KernelSpec {
    KernelFamily family = KernelFamily::squared_exponential;
    double signal_std = 1.0;
    /// One per input dimension: dose first, then each context feature.
    std::vector<double> lengthscales{1.0};

    void validate() const;
};

/// k(a, b) on feature vectors that are already in kernel coordinates.
double kernel_eval(const KernelSpec& spec, std::span<const double> a, std::span<const double> b);

/// k(a, b) on raw input points (dose used as-is, no domain scaling).
double kernel_eval(const KernelSpec& spec, const InputPoint& a, const InputPoint& b);

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
};

struct HyperBounds {
    Interval signal_std{0.1, 10.0};
    std::vector<Interval> lengthscales{{0.01, 10.0}};
};

struct GpOptions {
    /// Prior mean, expressed in the (possibly normalized) output space.
    double prior_mean = 0.0;
    /// Dose domain used to map doses to [0,1] before kernel evaluation.
    double dose_lo = 0.0;
    double dose_hi = 1.0;
    std::size_t context_dim = 0;
    /// Center outputs by the running mean and scale by max(running std, scale_floor).
    bool normalize_output = false;
    double output_scale_floor = 1.0;
    /// Added to the Gram diagonal as jitter_rel * signal_std^2.
    double jitter_rel = 1e-8;
};

struct Posterior {
    double mean = 0.0;
    double std = 0.0;
};

/// Exact GP regression. Values are immutable: condition() and with_kernel()
/// return new processes with a refreshed Cholesky factor.
class GaussianProcess {
public:
    GaussianProcess() : GaussianProcess(KernelSpec{}, GpOptions{}) {}
    GaussianProcess(KernelSpec kernel, GpOptions options);

    [[nodiscard]] GaussianProcess condition(const Observation& obs) const;
    [[nodiscard]] GaussianProcess with_kernel(KernelSpec kernel) const;

    Posterior posterior(const InputPoint& q) const;
    /// Log evidence of the (normalized) targets. Throws PreconditionError when empty.
    double log_marginal_likelihood() const;

    const KernelSpec& kernel() const noexcept { return kernel_; }
    const GpOptions& options() const noexcept { return options_; }
    const std::vector<Observation>& observations() const noexcept { return observations_; }
    std::size_t size() const noexcept { return observations_.size(); }
    std::size_t input_dim() const noexcept { return 1 + options_.context_dim; }

    /// Kernel-space coordinates of an input point (dose scaled to the domain).
    std::vector<double> features(const InputPoint& p) const;

    double output_offset() const noexcept { return offset_; }
    double output_scale() const noexcept { return scale_; }

private:
    void check_point(const InputPoint& p) const;
    void refresh();

    KernelSpec kernel_;
    GpOptions options_;
    std::vector<Observation> observations_;

    double offset_ = 0.0;
    double scale_ = 1.0;
    using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    std::span<const double> row(Eigen::Index i) const {
        return {inputs_.data() + i * inputs_.cols(), static_cast<std::size_t>(inputs_.cols())};
    }

    RowMatrix inputs_;           // n x dim, kernel coordinates
    Eigen::MatrixXd chol_;       // lower factor of K + noise + jitter
    Eigen::VectorXd alpha_;      // (K + noise)^-1 (y - prior_mean)
    Eigen::VectorXd centered_;   // y - prior_mean, normalized
};

/// Multi-start compass search on log-parameters maximizing the log evidence.
/// Fewer than 4 observations: the incoming spec is returned unchanged. Otherwise the
/// result lies within `bounds` and is never worse than the (clamped) incoming spec.
KernelSpec fit_hyperparameters(const GaussianProcess& gp, const HyperBounds& bounds,
                               std::size_t starts = 8);

} // namespace safedose
