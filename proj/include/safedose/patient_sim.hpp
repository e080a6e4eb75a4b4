#pragma once

#include <cstdint>
#include <deque>
#include <random>
#include <utility>
#include <vector>

namespace safedose {

/// Extended Bergman minimal model with two-compartment gut absorption and a
/// two-compartment subcutaneous insulin chain.
struct PatientParams {
    double p1 = 0.006;       // glucose effectiveness, 1/min
    double p2 = 0.025;       // remote insulin decay, 1/min
    double p3 = 2.0e-5;      // insulin action gain, 1/min^2 per mU/l
    double ke = 0.138;       // plasma insulin clearance, 1/min
    double ka1 = 0.022;      // sc absorption, 1/min
    double ka2 = 0.022;
    double kg1 = 0.03;       // gut absorption, 1/min
    double kg2 = 0.03;
    double f = 0.8;          // carbohydrate bioavailability
    double vg = 1100.0;      // glucose distribution volume, dl
    double vi = 84.0;        // insulin distribution volume, dl
    double gb = 120.0;       // basal glucose, mg/dl
    double basal_rate = 0.015; // U/min

    void validate() const;
    /// Plasma insulin at basal equilibrium, mU/l.
    double basal_insulin() const { return basal_rate * 1e4 / (vi * ke); }

    static PatientParams nominal() { return {}; }
};

struct PatientState {
    double g = 0.0;   // plasma glucose, mg/dl
    double x = 0.0;   // remote insulin action, 1/min
    double i = 0.0;   // plasma insulin, mU/l
    double s1 = 0.0;  // sc insulin depots, U
    double s2 = 0.0;
    double d1 = 0.0;  // gut carbohydrate, g
    double d2 = 0.0;

    static PatientState basal(const PatientParams& p);
};

struct SimInputs {
    double bolus = 0.0;  // U, impulse into S1
    double cho = 0.0;    // g, impulse into D1
    double basal = 0.0;  // U/min
};

/// Glucose floor applied after every step.
inline constexpr double kSimGlucoseFloor = 20.0;

/// Time derivatives (the returned struct holds rates, not levels).
PatientState derivatives(const PatientState& s, const PatientParams& p, double basal_rate);

/// One RK4 step of length dt in (0, 1] minutes; impulses are added before integrating.
PatientState step(const PatientState& s, const PatientParams& p, const SimInputs& in, double dt);

struct CgmModel {
    double sample_period = 5.0;  // min
    double noise_std = 2.0;      // mg/dl
    double delay = 0.0;          // min

    void validate() const;
};

inline constexpr double kSensorMin = 20.0;
inline constexpr double kSensorMax = 600.0;

/// Undelayed reading: glucose plus Gaussian noise, clamped to the sensor range.
double cgm_read(const PatientState& s, const CgmModel& model, std::mt19937_64& rng);

/// Sensor with a delay line over true glucose history.
class CgmSensor {
public:
    CgmSensor(CgmModel model, std::uint64_t seed);

    /// Records the true glucose at time t and returns the reading.
    double read(double t, double true_glucose);
    const CgmModel& model() const noexcept { return model_; }

private:
    CgmModel model_;
    std::mt19937_64 rng_;
    std::deque<std::pair<double, double>> history_;
};

/// A patient with its clock, advanced in one-minute RK4 steps.
class VirtualPatient {
public:
    explicit VirtualPatient(PatientParams params);

    void bolus(double units) { pending_.bolus += units; }
    void eat(double grams) { pending_.cho += grams; }
    void advance(double minutes);

    double time() const noexcept { return time_; }
    const PatientState& state() const noexcept { return state_; }
    const PatientParams& params() const noexcept { return params_; }

private:
    PatientParams params_;
    PatientState state_;
    SimInputs pending_{};
    double time_ = 0.0;
};

struct ScreeningResult {
    bool basal_stable = false;
    double unbolused_peak = 0.0;
    bool passed() const { return basal_stable && unbolused_peak >= 180.0 && unbolused_peak <= 400.0; }
};

/// 24 h without meals must hold glucose at basal; a 60 g unbolused meal must peak in [180, 400].
ScreeningResult screen_patient(const PatientParams& p);

/// Log-normal draws around nominal with the given spread; deterministic under seed.
std::vector<PatientParams> generate_cohort(std::size_t n, std::uint64_t seed, double spread);

/// Glucose trajectory for a single meal + bolus from basal, sampled every minute.
std::vector<double> simulate_meal(const PatientParams& p, double bolus, double cho,
                                  double horizon_min, double dt = 1.0);

} // namespace safedose
