#include "safedose/trial_metrics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <random>
#include <string>
#include <thread>

#include "safedose/errors.hpp"

namespace safedose {

namespace {

constexpr double kLow = 70.0;
constexpr double kHigh = 180.0;
constexpr double kSevere = 54.0;

std::uint64_t stream_seed(std::uint64_t seed, std::size_t index, std::uint32_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), stream};
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

} // namespace

void TrialProtocol::validate() const {
    if (days < 1) throw ConfigError("protocol.days", "must be >= 1");
    if (meal_times.empty()) throw ConfigError("protocol.meal_times", "at least one meal per day");
    if (!(meal_jitter >= 0.0)) throw ConfigError("protocol.meal_jitter", "must be >= 0");
    for (std::size_t i = 0; i < meal_times.size(); ++i) {
        const double t = meal_times[i];
        if (!(t - meal_jitter >= 0.0 && t + meal_jitter < 1440.0))
            throw ConfigError("protocol.meal_times[" + std::to_string(i) + "]",
                              "jittered meal must stay within its day");
        if (i > 0 && !(t - meal_jitter > meal_times[i - 1] + meal_jitter))
            throw ConfigError("protocol.meal_times[" + std::to_string(i) + "]",
                              "meals must stay strictly increasing after jitter");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < size_weights.size(); ++i) {
        if (!(size_weights[i] >= 0.0))
            throw ConfigError("protocol.size_weights[" + std::to_string(i) + "]", "must be >= 0");
        total += size_weights[i];
    }
    if (!(total > 0.0)) throw ConfigError("protocol.size_weights", "at least one weight must be > 0");
}

std::vector<ScheduledMeal> generate_schedule(const TrialProtocol& protocol,
                                             const AdvisorConfig& advisor, std::uint64_t seed) {
    protocol.validate();
    std::mt19937_64 rng(seed);
    const auto jitter = static_cast<long>(std::floor(protocol.meal_jitter));
    std::uniform_int_distribution<long> shift(-jitter, jitter);
    std::discrete_distribution<int> size(protocol.size_weights.begin(), protocol.size_weights.end());
    std::vector<ScheduledMeal> meals;
    for (std::size_t d = 0; d < protocol.days; ++d) {
        for (double base : protocol.meal_times) {
            ScheduledMeal m;
            m.time = static_cast<double>(d) * 1440.0 + std::round(base) +
                     static_cast<double>(shift(rng));
            m.size = static_cast<MealSize>(size(rng));
            m.cho_grams = advisor.category_grams[static_cast<std::size_t>(m.size)];
            meals.push_back(m);
        }
    }
    return meals;
}

RangeFractions time_in_range(std::span<const double> trace) {
    if (trace.empty()) throw PreconditionError("time in range needs a non-empty trace");
    std::size_t below = 0, above = 0;
    for (double g : trace) {
        if (g < kLow) ++below;
        else if (g > kHigh) ++above;
    }
    const auto n = static_cast<double>(trace.size());
    const auto in = trace.size() - below - above;
    return {100.0 * static_cast<double>(in) / n, 100.0 * static_cast<double>(above) / n,
            100.0 * static_cast<double>(below) / n};
}

HypoCounts classify_hypo_episodes(std::span<const double> trace) {
    HypoCounts counts;
    bool in_run = false;
    bool severe = false;
    for (double g : trace) {
        if (g < kLow) {
            in_run = true;
            severe = severe || g < kSevere;
        } else if (in_run) {
            ++(severe ? counts.severe : counts.mild);
            in_run = false;
            severe = false;
        }
    }
    if (in_run) ++(severe ? counts.severe : counts.mild);
    return counts;
}

HypoCounts count_hypo_days(std::span<const double> trace, std::size_t samples_per_day) {
    if (samples_per_day == 0) throw PreconditionError("samples_per_day must be >= 1");
    HypoCounts counts;
    for (std::size_t start = 0; start < trace.size(); start += samples_per_day) {
        const auto day = trace.subspan(start, std::min(samples_per_day, trace.size() - start));
        const double lowest = *std::min_element(day.begin(), day.end());
        if (lowest < kSevere) ++counts.severe;
        else if (lowest < kLow) ++counts.mild;
    }
    return counts;
}

double empirical_quantile(std::vector<double> values, double q) {
    if (values.empty()) throw PreconditionError("quantile of an empty sample");
    std::sort(values.begin(), values.end());
    const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

QuantileBand quantile_band(std::span<const TimedTrace> traces, double lo, double hi) {
    if (traces.size() < 2) throw PreconditionError("quantile band needs at least two traces");
    if (!(lo >= 0.0 && lo <= hi && hi <= 1.0))
        throw PreconditionError("quantile levels must satisfy 0 <= lo <= hi <= 1");
    const auto& ref = traces.front().t;
    for (std::size_t p = 0; p < traces.size(); ++p) {
        if (traces[p].t != ref || traces[p].values.size() != ref.size())
            throw AlignmentError("trace " + std::to_string(p) +
                                 " does not share the first trace's timestamps");
    }
    QuantileBand band;
    band.t = ref;
    std::vector<double> column(traces.size());
    for (std::size_t j = 0; j < ref.size(); ++j) {
        for (std::size_t p = 0; p < traces.size(); ++p) column[p] = traces[p].values[j];
        band.lo.push_back(empirical_quantile(column, lo));
        band.median.push_back(empirical_quantile(column, 0.5));
        band.hi.push_back(empirical_quantile(column, hi));
    }
    return band;
}

std::vector<double> PatientReport::metric_values(MetricSource source) const {
    std::vector<double> v;
    v.reserve(trace.size());
    for (const auto& r : trace) v.push_back(source == MetricSource::true_glucose ? r.bg : r.cgm);
    return v;
}

PatientReport run_patient(std::size_t index, const PatientParams& params,
                          const TrialProtocol& protocol, const AdvisorConfig& advisor_cfg,
                          const TrialOptions& options) {
    protocol.validate();
    options.cgm.validate();
    const auto meals = generate_schedule(protocol, advisor_cfg, stream_seed(protocol.seed, index, 1));
    CgmSensor sensor(options.cgm, stream_seed(protocol.seed, index, 2));
    VirtualPatient patient(params);
    DoseAdvisor advisor(advisor_cfg);

    const double horizon = static_cast<double>(protocol.days) * 1440.0;
    const auto period = static_cast<long>(std::lround(options.cgm.sample_period));
    if (period < 1 || std::abs(static_cast<double>(period) - options.cgm.sample_period) > 1e-9)
        throw ConfigError("cgm.sample_period", "trials need a whole number of minutes");

    PatientReport report;
    report.index = index;
    report.params = params;

    std::size_t next_meal = 0;
    double window_end = 0.0;
    double end_time = horizon;
    for (long minute = 0;; ++minute) {
        const auto t = static_cast<double>(minute);
        const bool episode_open = advisor.open_episode() != nullptr;
        if (t >= end_time && !episode_open) break;

        if (minute % period == 0) {
            const double bg = patient.state().g;
            const double cgm = sensor.read(t, bg);
            advisor.ingest_cgm(t, cgm);
            if (t < horizon) report.trace.push_back({t, bg, cgm, 0.0, 0.0});
        }
        if (episode_open && t >= window_end) {
            const bool next_announced = next_meal < meals.size() && meals[next_meal].time <= t;
            advisor.close_episode(t, next_announced);
        }
        if (next_meal < meals.size() && meals[next_meal].time <= t) {
            const ScheduledMeal& m = meals[next_meal];
            const DoseDecision d = advisor.recommend_dose({m.time, m.size, m.cho_grams});
            patient.bolus(d.dose);
            patient.eat(m.cho_grams);
            const std::optional<double> following =
                next_meal + 1 < meals.size() ? std::optional(meals[next_meal + 1].time)
                                             : std::nullopt;
            window_end = window_bounds(m.time, following, advisor_cfg.window_cap).second;
            end_time = std::max(end_time, window_end);
            if (!report.trace.empty() && t < horizon) {
                report.trace.back().bolus += d.dose;
                report.trace.back().cho += m.cho_grams;
            }
            ++next_meal;
        }
        patient.advance(1.0);
    }

    report.episodes = advisor.episodes();
    const auto values = report.metric_values(options.source);
    report.overall = time_in_range(values);
    const auto per_day = static_cast<std::size_t>(std::lround(1440.0 / options.cgm.sample_period));
    for (std::size_t start = 0; start < values.size(); start += per_day) {
        const auto n = std::min(per_day, values.size() - start);
        report.daily.push_back(time_in_range(std::span(values).subspan(start, n)));
    }
    for (std::size_t start = 0; start < values.size(); start += 7 * per_day) {
        const auto n = std::min(7 * per_day, values.size() - start);
        report.weekly_tir.push_back(time_in_range(std::span(values).subspan(start, n)).tir);
    }
    report.hypo_episodes = classify_hypo_episodes(values);
    report.hypo_days = count_hypo_days(values, per_day);
    return report;
}

TrialReport run_trial(std::span<const PatientParams> cohort, const TrialProtocol& protocol,
                      const AdvisorConfig& advisor, const TrialOptions& options) {
    if (cohort.empty()) throw PreconditionError("trial needs at least one patient");
    protocol.validate();
    advisor.validate();
    options.cgm.validate();

    TrialReport report;
    report.source = options.source;
    report.samples_per_day = static_cast<std::size_t>(std::lround(1440.0 / options.cgm.sample_period));
    report.patients.resize(cohort.size());

    const std::size_t workers = std::clamp<std::size_t>(options.workers, 1, cohort.size());
    if (workers == 1) {
        for (std::size_t i = 0; i < cohort.size(); ++i)
            report.patients[i] = run_patient(i, cohort[i], protocol, advisor, options);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::exception_ptr> errors(cohort.size());
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < cohort.size(); i = next++) {
                    try {
                        report.patients[i] = run_patient(i, cohort[i], protocol, advisor, options);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    std::vector<double> pooled;
    std::vector<TimedTrace> traces;
    for (const auto& p : report.patients) {
        const auto v = p.metric_values(options.source);
        pooled.insert(pooled.end(), v.begin(), v.end());
        report.hypo_episodes.mild += p.hypo_episodes.mild;
        report.hypo_episodes.severe += p.hypo_episodes.severe;
        report.hypo_days.mild += p.hypo_days.mild;
        report.hypo_days.severe += p.hypo_days.severe;
        TimedTrace tt;
        for (const auto& r : p.trace) tt.t.push_back(r.t);
        tt.values = v;
        traces.push_back(std::move(tt));
    }
    report.cohort = time_in_range(pooled);
    if (traces.size() >= 2) {
        report.band = quantile_band(traces);
    } else {
        report.band = {traces[0].t, traces[0].values, traces[0].values, traces[0].values};
    }
    return report;
}

namespace {

void write_fractions(std::ostream& out, const std::string& prefix, const RangeFractions& r) {
    out << prefix << "tir_pct: " << r.tir << '\n'
        << prefix << "tar_pct: " << r.tar << '\n'
        << prefix << "tbr_pct: " << r.tbr << '\n';
}

} // namespace

void write_summary(std::ostream& out, const TrialReport& report) {
    const auto old_flags = out.flags();
    const auto old_prec = out.precision();
    out << std::fixed << std::setprecision(4);
    out << "metric_source: "
        << (report.source == MetricSource::true_glucose ? "true_glucose" : "cgm") << '\n';
    out << "patients: " << report.patients.size() << '\n';
    write_fractions(out, "cohort_", report.cohort);
    out << "cohort_mild_hypo_episodes: " << report.hypo_episodes.mild << '\n'
        << "cohort_severe_hypo_episodes: " << report.hypo_episodes.severe << '\n'
        << "cohort_mild_hypo_days: " << report.hypo_days.mild << '\n'
        << "cohort_severe_hypo_days: " << report.hypo_days.severe << '\n';
    for (const auto& p : report.patients) {
        const std::string prefix = "patient_" + std::to_string(p.index) + "_";
        write_fractions(out, prefix, p.overall);
        out << prefix << "mild_hypo_episodes: " << p.hypo_episodes.mild << '\n'
            << prefix << "severe_hypo_episodes: " << p.hypo_episodes.severe << '\n'
            << prefix << "mild_hypo_days: " << p.hypo_days.mild << '\n'
            << prefix << "severe_hypo_days: " << p.hypo_days.severe << '\n';
        out << prefix << "weekly_tir_pct:";
        for (double w : p.weekly_tir) out << ' ' << w;
        out << '\n';
        std::size_t fallbacks = 0;
        for (const auto& e : p.episodes) fallbacks += e.fallback_used ? 1 : 0;
        out << prefix << "episodes: " << p.episodes.size() << '\n'
            << prefix << "fallback_doses: " << fallbacks << '\n';
    }
    out.flags(old_flags);
    out.precision(old_prec);
}

void write_patient_csv(std::ostream& out, const PatientReport& patient) {
    const auto old_flags = out.flags();
    const auto old_prec = out.precision();
    out << std::fixed << std::setprecision(3);
    out << "t_min,BG,CGM,bolus_U,cho_g\n";
    for (const auto& r : patient.trace)
        out << r.t << ',' << r.bg << ',' << r.cgm << ',' << r.bolus << ',' << r.cho << '\n';
    out.flags(old_flags);
    out.precision(old_prec);
}

void write_plotdata(std::ostream& out, const TrialReport& report) {
    const auto old_flags = out.flags();
    const auto old_prec = out.precision();
    out << std::fixed << std::setprecision(3);
    out << "t_min,q05,median,q95,tir_day_pct\n";

    // Pooled cohort TIR per day.
    std::vector<RangeFractions> day_tir;
    if (!report.patients.empty()) {
        const std::size_t days = report.patients.front().daily.size();
        for (std::size_t d = 0; d < days; ++d) {
            std::vector<double> pooled;
            for (const auto& p : report.patients) {
                const auto v = p.metric_values(report.source);
                const std::size_t start = std::min(d * report.samples_per_day, v.size());
                const std::size_t end = std::min(start + report.samples_per_day, v.size());
                pooled.insert(pooled.end(), v.begin() + static_cast<long>(start),
                              v.begin() + static_cast<long>(end));
            }
            day_tir.push_back(time_in_range(pooled));
        }
    }
    for (std::size_t j = 0; j < report.band.t.size(); ++j) {
        const auto day = static_cast<std::size_t>(report.band.t[j] / 1440.0);
        const double tir = day < day_tir.size() ? day_tir[day].tir : 0.0;
        out << report.band.t[j] << ',' << report.band.lo[j] << ',' << report.band.median[j] << ','
            << report.band.hi[j] << ',' << tir << '\n';
    }
    out.flags(old_flags);
    out.precision(old_prec);
}

} // namespace safedose
