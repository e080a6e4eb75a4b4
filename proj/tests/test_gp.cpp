#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "safedose/errors.hpp"
#include "safedose/gp.hpp"

using namespace safedose;

namespace {

GpOptions unit_domain(std::size_t cdim = 0) {
    GpOptions o;
    o.dose_lo = 0.0;
    o.dose_hi = 1.0;
    o.context_dim = cdim;
    return o;
}

} // namespace

TEST_CASE("kernel closed forms") {
    KernelSpec se{KernelFamily::squared_exponential, 1.0, {1.0}};
    CHECK(kernel_eval(se, InputPoint{0.3, {}}, InputPoint{0.3, {}}) == doctest::Approx(1.0));
    CHECK(kernel_eval(se, InputPoint{0.0, {}}, InputPoint{1.0, {}}) ==
          doctest::Approx(std::exp(-0.5)).epsilon(1e-12));

    KernelSpec m52{KernelFamily::matern52, 2.0, {0.5}};
    const double r = 0.7 / 0.5;
    const double expect = 4.0 * (1 + std::sqrt(5.0) * r + 5 * r * r / 3) * std::exp(-std::sqrt(5.0) * r);
    CHECK(kernel_eval(m52, InputPoint{0.1, {}}, InputPoint{0.8, {}}) ==
          doctest::Approx(expect).epsilon(1e-12));
    CHECK(kernel_eval(m52, InputPoint{0.4, {}}, InputPoint{0.4, {}}) == doctest::Approx(4.0));
}

TEST_CASE("kernel is symmetric and bounded by the signal variance") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 500; ++trial) {
        KernelSpec k{trial % 2 ? KernelFamily::matern52 : KernelFamily::squared_exponential,
                     0.1 + 3 * u(rng), {0.05 + u(rng), 0.05 + u(rng)}};
        InputPoint a{u(rng), {u(rng)}}, b{u(rng), {u(rng)}};
        const double kab = kernel_eval(k, a, b);
        CHECK(kab == kernel_eval(k, b, a));
        CHECK(kab <= k.signal_std * k.signal_std + 1e-15);
        CHECK(kab > 0.0);
    }
}

TEST_CASE("kernel spec validation") {
    CHECK_THROWS_AS((KernelSpec{KernelFamily::squared_exponential, 0.0, {1.0}}.validate()),
                    ConfigError);
    CHECK_THROWS_AS((KernelSpec{KernelFamily::squared_exponential, 1.0, {-1.0}}.validate()),
                    ConfigError);
    CHECK_THROWS_AS(GaussianProcess(KernelSpec{KernelFamily::squared_exponential, 1.0, {1.0, 1.0}},
                                    unit_domain(0)),
                    ConfigError);
}

TEST_CASE("prior posterior") {
    GaussianProcess gp(KernelSpec{}, unit_domain());
    const auto p = gp.posterior({0.4, {}});
    CHECK(p.mean == 0.0);
    CHECK(p.std == 1.0);
}

TEST_CASE("noise-free observation is interpolated") {
    GpOptions o = unit_domain();
    o.jitter_rel = 0.0;
    GaussianProcess gp(KernelSpec{}, o);
    gp = gp.condition({{0.5, {}}, 3.5, 0.0});
    const auto p = gp.posterior({0.5, {}});
    CHECK(p.mean == doctest::Approx(3.5).epsilon(1e-12));
    CHECK(p.std <= 1e-6);

    // With the default jitter the std is of order sqrt(jitter), far below any dose effect.
    GaussianProcess jittered(KernelSpec{}, unit_domain());
    jittered = jittered.condition({{0.5, {}}, 3.5, 0.0});
    CHECK(jittered.posterior({0.5, {}}).std < 2e-4);
    CHECK(jittered.posterior({0.5, {}}).mean == doctest::Approx(3.5).epsilon(1e-6));
}

TEST_CASE("duplicate inputs: noise regularizes, exact duplicates fail") {
    GaussianProcess noisy(KernelSpec{}, unit_domain());
    noisy = noisy.condition({{0.2, {}}, 1.0, 0.1}).condition({{0.2, {}}, 1.2, 0.1});
    CHECK(noisy.posterior({0.2, {}}).mean == doctest::Approx(1.1).epsilon(0.01));

    GpOptions o = unit_domain();
    o.jitter_rel = 0.0;
    GaussianProcess exact(KernelSpec{}, o);
    exact = exact.condition({{0.2, {}}, 1.0, 0.0});
    try {
        (void)exact.condition({{0.2, {}}, 1.0, 0.0});
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(e.index() == 1);
    }
}

TEST_CASE("condition returns a new process and leaves the original intact") {
    GaussianProcess gp(KernelSpec{}, unit_domain());
    const auto next = gp.condition({{0.3, {}}, 2.0, 0.1});
    CHECK(gp.size() == 0);
    CHECK(next.size() == 1);
    CHECK(gp.posterior({0.3, {}}).std == 1.0);
}

TEST_CASE("posterior variance never exceeds the prior and never goes negative") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        KernelSpec k{KernelFamily::squared_exponential, 0.5 + u(rng), {0.05 + 0.5 * u(rng)}};
        GaussianProcess gp(k, unit_domain());
        for (int i = 0; i < 30; ++i) gp = gp.condition({{u(rng), {}}, u(rng), 1e-3});
        for (int q = 0; q <= 100; ++q) {
            const auto p = gp.posterior({q / 100.0, {}});
            CHECK(p.std >= 0.0);
            CHECK(p.std <= k.signal_std + 1e-12);
        }
    }
}

TEST_CASE("dense-solve oracle agreement, including normalization and context") {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0.0;
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t cdim = trial % 3;
        KernelSpec k{trial % 2 ? KernelFamily::matern52 : KernelFamily::squared_exponential,
                     0.3 + 2 * u(rng), {}};
        for (std::size_t d = 0; d <= cdim; ++d) k.lengthscales.push_back(0.08 + u(rng));
        GpOptions o;
        o.dose_lo = 0.0;
        o.dose_hi = 5 + 20 * u(rng);
        o.context_dim = cdim;
        o.prior_mean = u(rng) - 0.5;
        o.normalize_output = trial % 4 == 0;
        GaussianProcess gp(k, o);
        std::vector<Observation> obs;
        const int n = 1 + static_cast<int>(u(rng) * 50) % 50;
        for (int i = 0; i < n; ++i) {
            Observation ob{{o.dose_hi * u(rng), {}}, 10 * u(rng) - 5, 0.05 + u(rng)};
            for (std::size_t c = 0; c < cdim; ++c) ob.input.context.push_back(u(rng));
            obs.push_back(ob);
            gp = gp.condition(ob);
        }
        const oracle::DenseGp ref(k, o, obs);
        for (int q = 0; q < 20; ++q) {
            InputPoint p{o.dose_hi * u(rng), {}};
            for (std::size_t c = 0; c < cdim; ++c) p.context.push_back(u(rng));
            const auto a = gp.posterior(p);
            const auto b = ref.posterior(p);
            worst = std::max({worst, std::abs(a.mean - b.mean), std::abs(a.std - b.std)});
        }
        worst = std::max(worst, std::abs(gp.log_marginal_likelihood() - ref.log_marginal_likelihood()));
    }
    CHECK(worst < 1e-8);
}

TEST_CASE("log marginal likelihood needs data") {
    GaussianProcess gp(KernelSpec{}, unit_domain());
    CHECK_THROWS_AS((void)gp.log_marginal_likelihood(), PreconditionError);
}

TEST_CASE("hyperparameter fit: few observations keep the incoming spec") {
    KernelSpec k{KernelFamily::squared_exponential, 1.3, {0.4}};
    GaussianProcess gp(k, unit_domain());
    gp = gp.condition({{0.1, {}}, 0.3, 0.1}).condition({{0.6, {}}, -0.2, 0.1});
    const KernelSpec fit = fit_hyperparameters(gp, HyperBounds{{0.1, 10}, {{0.01, 10}}});
    CHECK(fit.signal_std == k.signal_std);
    CHECK(fit.lengthscales == k.lengthscales);
}

TEST_CASE("hyperparameter fit: generate-and-refit") {
    // Draw 30 points from a GP with lengthscale 0.3 and refit from a poor start.
    const KernelSpec truth{KernelFamily::squared_exponential, 1.0, {0.3}};
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> z(0.0, 1.0);
    std::vector<double> xs;
    for (int i = 0; i < 30; ++i) xs.push_back(u(rng));
    oracle::Matrix cov(30, std::vector<double>(30));
    for (int i = 0; i < 30; ++i)
        for (int j = 0; j < 30; ++j) cov[i][j] = oracle::kernel(truth, {xs[i]}, {xs[j]}) + (i == j ? 1e-2 : 0);
    // Cholesky of the sampling covariance (test-side, for drawing only).
    oracle::Matrix L(30, std::vector<double>(30, 0.0));
    for (int j = 0; j < 30; ++j) {
        double d = cov[j][j];
        for (int k = 0; k < j; ++k) d -= L[j][k] * L[j][k];
        L[j][j] = std::sqrt(d);
        for (int i = j + 1; i < 30; ++i) {
            double s = cov[i][j];
            for (int k = 0; k < j; ++k) s -= L[i][k] * L[j][k];
            L[i][j] = s / L[j][j];
        }
    }
    std::vector<double> e(30), y(30, 0.0);
    for (auto& v : e) v = z(rng);
    for (int i = 0; i < 30; ++i)
        for (int k = 0; k <= i; ++k) y[i] += L[i][k] * e[k];

    const HyperBounds bounds{{0.1, 5.0}, {{0.02, 3.0}}};
    GaussianProcess start(KernelSpec{KernelFamily::squared_exponential, 3.0, {2.0}}, unit_domain());
    for (int i = 0; i < 30; ++i) start = start.condition({{xs[i], {}}, y[i], 0.1});
    const KernelSpec fit = fit_hyperparameters(start, bounds);
    CHECK(fit.lengthscales[0] >= bounds.lengthscales[0].lo);
    CHECK(fit.lengthscales[0] <= bounds.lengthscales[0].hi);
    CHECK(fit.signal_std >= bounds.signal_std.lo);
    CHECK(fit.signal_std <= bounds.signal_std.hi);
    const double fitted = start.with_kernel(fit).log_marginal_likelihood();
    const double at_truth = start.with_kernel(truth).log_marginal_likelihood();
    CHECK(fitted >= at_truth - 1e-6);
    CHECK(fitted >= start.log_marginal_likelihood());
}

TEST_CASE("hyperparameter fit is deterministic") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    GaussianProcess gp(KernelSpec{KernelFamily::matern52, 1.0, {0.5}}, unit_domain());
    for (int i = 0; i < 12; ++i) gp = gp.condition({{u(rng), {}}, std::sin(6 * u(rng)), 0.1});
    const HyperBounds b{{0.1, 5.0}, {{0.02, 3.0}}};
    const auto a = fit_hyperparameters(gp, b);
    const auto c = fit_hyperparameters(gp, b);
    CHECK(a.signal_std == c.signal_std);
    CHECK(a.lengthscales == c.lengthscales);
}

TEST_CASE("query validation") {
    GaussianProcess gp(KernelSpec{}, unit_domain());
    CHECK_THROWS_AS((void)gp.posterior({-1.0, {}}), PreconditionError);
    CHECK_THROWS_AS((void)gp.posterior({0.5, {0.3}}), ConfigError);
    CHECK_THROWS_AS((void)gp.condition({{0.5, {}}, std::nan(""), 0.1}), PreconditionError);
}

TEST_CASE("small noise diagonals still factorize") {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int seed = 0; seed < 100; ++seed) {
        GpOptions o = unit_domain();
        o.jitter_rel = 0.0;
        GaussianProcess gp(KernelSpec{seed % 2 ? KernelFamily::matern52 : KernelFamily::squared_exponential,
                                      1.0, {0.05 + u(rng)}},
                           o);
        const int n = 1 + static_cast<int>(50 * u(rng)) % 50;
        for (int i = 0; i < n; ++i) CHECK_NOTHROW(gp = gp.condition({{u(rng), {}}, u(rng), 1e-4}));
        CHECK(gp.size() == static_cast<std::size_t>(n));
    }
}
