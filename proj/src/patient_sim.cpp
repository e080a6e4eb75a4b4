#include "safedose/patient_sim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "safedose/errors.hpp"

namespace safedose {

namespace {

PatientState axpy(const PatientState& s, double h, const PatientState& r) {
    return {s.g + h * r.g,   s.x + h * r.x,   s.i + h * r.i,  s.s1 + h * r.s1,
            s.s2 + h * r.s2, s.d1 + h * r.d1, s.d2 + h * r.d2};
}

void require_positive(double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(name, "must be > 0");
}

} // namespace

void PatientParams::validate() const {
    require_positive(p1, "p1");
    require_positive(p2, "p2");
    require_positive(p3, "p3");
    require_positive(ke, "ke");
    require_positive(ka1, "ka1");
    require_positive(ka2, "ka2");
    require_positive(kg1, "kg1");
    require_positive(kg2, "kg2");
    require_positive(vg, "vg");
    require_positive(vi, "vi");
    require_positive(basal_rate, "basal_rate");
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("f", "must lie in (0, 1]");
    if (!(gb >= 90.0 && gb <= 160.0)) throw ConfigError("gb", "must lie in [90, 160]");
}

PatientState PatientState::basal(const PatientParams& p) {
    PatientState s;
    s.g = p.gb;
    s.x = 0.0;
    s.i = p.basal_insulin();
    s.s1 = p.basal_rate / p.ka1;
    s.s2 = p.basal_rate / p.ka2;
    return s;
}

PatientState derivatives(const PatientState& s, const PatientParams& p, double basal_rate) {
    PatientState r;
    r.s1 = basal_rate - p.ka1 * s.s1;
    r.s2 = p.ka1 * s.s1 - p.ka2 * s.s2;
    r.i = p.ka2 * s.s2 * 1e4 / p.vi - p.ke * s.i;
    r.x = -p.p2 * s.x + p.p3 * (s.i - p.basal_insulin());
    r.d1 = -p.kg1 * s.d1;
    r.d2 = p.kg1 * s.d1 - p.kg2 * s.d2;
    r.g = -p.p1 * (s.g - p.gb) - s.x * s.g + p.f * p.kg2 * s.d2 * (5600.0 / p.vg);
    return r;
}

PatientState step(const PatientState& s, const PatientParams& p, const SimInputs& in, double dt) {
    if (!(dt > 0.0 && dt <= 1.0)) throw PreconditionError("step size must lie in (0, 1] min");
    PatientState y = s;
    y.s1 += in.bolus;
    y.d1 += in.cho;
    const PatientState k1 = derivatives(y, p, in.basal);
    const PatientState k2 = derivatives(axpy(y, 0.5 * dt, k1), p, in.basal);
    const PatientState k3 = derivatives(axpy(y, 0.5 * dt, k2), p, in.basal);
    const PatientState k4 = derivatives(axpy(y, dt, k3), p, in.basal);
    auto combine = [dt](double v, double a, double b, double c, double d) {
        return v + dt / 6.0 * (a + 2.0 * b + 2.0 * c + d);
    };
    PatientState out{
        combine(y.g, k1.g, k2.g, k3.g, k4.g),      combine(y.x, k1.x, k2.x, k3.x, k4.x),
        combine(y.i, k1.i, k2.i, k3.i, k4.i),      combine(y.s1, k1.s1, k2.s1, k3.s1, k4.s1),
        combine(y.s2, k1.s2, k2.s2, k3.s2, k4.s2), combine(y.d1, k1.d1, k2.d1, k3.d1, k4.d1),
        combine(y.d2, k1.d2, k2.d2, k3.d2, k4.d2)};
    out.g = std::max(out.g, kSimGlucoseFloor);
    out.x = std::max(out.x, 0.0);
    out.i = std::max(out.i, 0.0);
    out.s1 = std::max(out.s1, 0.0);
    out.s2 = std::max(out.s2, 0.0);
    out.d1 = std::max(out.d1, 0.0);
    out.d2 = std::max(out.d2, 0.0);
    return out;
}

void CgmModel::validate() const {
    if (!(sample_period > 0.0)) throw ConfigError("sample_period", "must be > 0");
    if (!(noise_std >= 0.0)) throw ConfigError("noise_std", "must be >= 0");
    if (!(delay >= 0.0)) throw ConfigError("delay", "must be >= 0");
}

double cgm_read(const PatientState& s, const CgmModel& model, std::mt19937_64& rng) {
    double g = s.g;
    if (model.noise_std > 0.0) g += std::normal_distribution<double>(0.0, model.noise_std)(rng);
    return std::clamp(g, kSensorMin, kSensorMax);
}

CgmSensor::CgmSensor(CgmModel model, std::uint64_t seed) : model_(model), rng_(seed) {
    model_.validate();
}

double CgmSensor::read(double t, double true_glucose) {
    history_.emplace_back(t, true_glucose);
    const double target = t - model_.delay;
    while (history_.size() > 2 && history_[1].first <= target) history_.pop_front();

    double g = history_.front().second;
    if (history_.size() >= 2 && history_[0].first < target) {
        const auto [t0, g0] = history_[0];
        const auto [t1, g1] = history_[1];
        g = g0 + (g1 - g0) * (target - t0) / (t1 - t0);
    }
    PatientState s;
    s.g = g;
    return cgm_read(s, model_, rng_);
}

VirtualPatient::VirtualPatient(PatientParams params)
    : params_(params), state_(PatientState::basal(params)) {
    params_.validate();
}

void VirtualPatient::advance(double minutes) {
    double remaining = minutes;
    while (remaining > 1e-12) {
        const double dt = std::min(1.0, remaining);
        SimInputs in = pending_;
        in.basal = params_.basal_rate;
        pending_ = {};
        state_ = step(state_, params_, in, dt);
        time_ += dt;
        remaining -= dt;
    }
}

std::vector<double> simulate_meal(const PatientParams& p, double bolus, double cho,
                                  double horizon_min, double dt) {
    const auto sub = static_cast<int>(std::lround(1.0 / dt));
    if (sub < 1 || std::abs(sub * dt - 1.0) > 1e-12)
        throw PreconditionError("dt must divide one minute");
    PatientState s = PatientState::basal(p);
    std::vector<double> out{s.g};
    const auto minutes = static_cast<int>(std::lround(horizon_min));
    SimInputs first{bolus, cho, p.basal_rate};
    const SimInputs rest{0.0, 0.0, p.basal_rate};
    for (int m = 0; m < minutes; ++m) {
        for (int k = 0; k < sub; ++k) {
            s = step(s, p, first, dt);
            first = rest;
        }
        out.push_back(s.g);
    }
    return out;
}

ScreeningResult screen_patient(const PatientParams& p) {
    ScreeningResult r;
    const auto fasting = simulate_meal(p, 0.0, 0.0, 1440.0);
    r.basal_stable = std::all_of(fasting.begin(), fasting.end(),
                                 [&](double g) { return std::abs(g - p.gb) < 1.0; });
    const auto meal = simulate_meal(p, 0.0, 60.0, 300.0);
    r.unbolused_peak = *std::max_element(meal.begin(), meal.end());
    return r;
}

std::vector<PatientParams> generate_cohort(std::size_t n, std::uint64_t seed, double spread) {
    if (n < 1) throw PreconditionError("cohort size must be >= 1");
    if (!(spread >= 0.0 && spread <= 0.5)) throw PreconditionError("spread must lie in [0, 0.5]");

    const PatientParams nominal = PatientParams::nominal();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z(0.0, 1.0);
    auto draw = [&](double v) { return v * std::exp(spread * z(rng)); };

    std::vector<PatientParams> cohort;
    cohort.reserve(n);
    for (std::size_t slot = 0; slot < n; ++slot) {
        bool accepted = false;
        for (int attempt = 0; attempt < 100 && !accepted; ++attempt) {
            PatientParams p = nominal;
            p.p1 = draw(nominal.p1);
            // Sensitivity p3/p2 is drawn directly; independent p2 and p3 draws
            // would compound into implausibly wide sensitivity tails.
            const double sensitivity = draw(nominal.p3 / nominal.p2);
            p.p2 = draw(nominal.p2);
            p.p3 = sensitivity * p.p2;
            p.ke = draw(nominal.ke);
            const double ka_scale = draw(1.0);
            p.ka1 = nominal.ka1 * ka_scale;
            p.ka2 = nominal.ka2 * ka_scale;
            const double kg_scale = draw(1.0);
            p.kg1 = nominal.kg1 * kg_scale;
            p.kg2 = nominal.kg2 * kg_scale;
            p.f = draw(nominal.f);
            p.vg = draw(nominal.vg);
            p.vi = draw(nominal.vi);
            p.gb = draw(nominal.gb);
            p.basal_rate = draw(nominal.basal_rate);
            if (!(p.f > 0.0 && p.f <= 1.0) || p.gb < 90.0 || p.gb > 160.0) continue;
            if (!screen_patient(p).passed()) continue;
            cohort.push_back(p);
            accepted = true;
        }
        if (!accepted)
            throw GenerationError("patient " + std::to_string(slot) +
                                  " failed screening after 100 draws");
    }
    return cohort;
}

} // namespace safedose
