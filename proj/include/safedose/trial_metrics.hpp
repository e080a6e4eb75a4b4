#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "safedose/dose_advisor.hpp"
#include "safedose/patient_sim.hpp"

namespace safedose {

struct TrialProtocol {
    std::size_t days = 21;
    std::vector<double> meal_times{480.0, 780.0, 1140.0};  // minutes of day
    double meal_jitter = 30.0;                             // uniform +/- minutes
    std::array<double, kMealSizeCount> size_weights{1.0, 1.0, 1.0, 1.0};
    std::uint64_t seed = 42;

    std::size_t meals_per_day() const { return meal_times.size(); }
    void validate() const;
};

struct ScheduledMeal {
    double time = 0.0;
    MealSize size = MealSize::M;
    double cho_grams = 0.0;
};

/// Whole-trial meal plan for one patient; times strictly increasing.
std::vector<ScheduledMeal> generate_schedule(const TrialProtocol& protocol,
                                             const AdvisorConfig& advisor, std::uint64_t seed);

struct RangeFractions {
    double tir = 0.0;  // % in [70, 180]
    double tar = 0.0;  // % > 180
    double tbr = 0.0;  // % < 70
};

/// Throws PreconditionError on an empty trace.
RangeFractions time_in_range(std::span<const double> trace);

struct HypoCounts {
    std::size_t mild = 0;
    std::size_t severe = 0;
};

/// Maximal runs of samples < 70 mg/dl; a run is severe if any sample is < 54.
HypoCounts classify_hypo_episodes(std::span<const double> trace);

/// Days (blocks of samples_per_day) with at least one sample < 70, split by severity.
HypoCounts count_hypo_days(std::span<const double> trace, std::size_t samples_per_day);

struct TimedTrace {
    std::vector<double> t;
    std::vector<double> values;
};

struct QuantileBand {
    std::vector<double> t;
    std::vector<double> lo;
    std::vector<double> median;
    std::vector<double> hi;
};

/// Linear interpolation between order statistics (type-7 quantile).
double empirical_quantile(std::vector<double> values, double q);

/// Per-timestep cohort quantiles. Needs >= 2 traces (PreconditionError) sharing timestamps
/// (AlignmentError).
QuantileBand quantile_band(std::span<const TimedTrace> traces, double lo = 0.05, double hi = 0.95);

enum class MetricSource { true_glucose, cgm };

struct TraceRow {
    double t = 0.0;
    double bg = 0.0;
    double cgm = 0.0;
    double bolus = 0.0;
    double cho = 0.0;
};

struct PatientReport {
    std::size_t index = 0;
    PatientParams params;
    std::vector<TraceRow> trace;  // every CGM sample period
    std::vector<Episode> episodes;
    RangeFractions overall;
    std::vector<RangeFractions> daily;
    std::vector<double> weekly_tir;
    HypoCounts hypo_episodes;
    HypoCounts hypo_days;

    std::vector<double> metric_values(MetricSource source) const;
};

struct TrialReport {
    MetricSource source = MetricSource::true_glucose;
    std::size_t samples_per_day = 288;
    std::vector<PatientReport> patients;
    RangeFractions cohort;
    HypoCounts hypo_episodes;
    HypoCounts hypo_days;
    QuantileBand band;  // collapses onto the trace for a single patient
};

struct TrialOptions {
    CgmModel cgm{};
    MetricSource source = MetricSource::true_glucose;
    std::size_t workers = 1;
};

/// Closed-loop trial: announce, dose, eat, stream CGM, close at the window end.
TrialReport run_trial(std::span<const PatientParams> cohort, const TrialProtocol& protocol,
                      const AdvisorConfig& advisor, const TrialOptions& options = {});

/// Single patient; exposed for tests and the simulated service mode.
PatientReport run_patient(std::size_t index, const PatientParams& params,
                          const TrialProtocol& protocol, const AdvisorConfig& advisor,
                          const TrialOptions& options);

void write_summary(std::ostream& out, const TrialReport& report);
void write_patient_csv(std::ostream& out, const PatientReport& patient);
/// Rows: t_min, q05, median, q95, tir_day (tir of the day containing t).
void write_plotdata(std::ostream& out, const TrialReport& report);

} // namespace safedose
