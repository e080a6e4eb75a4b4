#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "safedose/dose_advisor.hpp"
#include "safedose/patient_sim.hpp"
#include "safedose/safety_mc.hpp"
#include "safedose/trial_metrics.hpp"

namespace safedose {

struct CohortSpec {
    std::size_t patients = 10;
    double spread = 0.2;
    /// Defaults to the run seed when absent.
    std::optional<std::uint64_t> seed;
    /// Optional cohort.params file; overrides generation when set.
    std::string file;
};

/// Everything a CLI run needs, merged from the config file and flag overrides.
struct RunConfig {
    AdvisorConfig advisor{};
    TrialProtocol protocol{};
    CohortSpec cohort{};
    CgmModel cgm{};
    MetricSource metric_source = MetricSource::true_glucose;
    std::string out_dir = "out";
    std::uint64_t seed = 42;
    std::size_t workers = 0;  // 0: hardware concurrency
    SafetyMcConfig safety_mc{};

    void validate() const;
    std::uint64_t cohort_seed() const { return cohort.seed.value_or(seed); }
};

// Each parser fills defaults for absent keys, rejects unknown keys, and throws
// ConfigError carrying the dotted path of the first bad field.
SafeBOConfig parse_safe_bo(const nlohmann::json& j, const std::string& path = "safe_bo",
                           SafeBOConfig base = {});
KernelSpec parse_kernel(const nlohmann::json& j, const std::string& path, KernelSpec base);
AdvisorConfig parse_advisor(const nlohmann::json& j, const std::string& path = "advisor",
                            AdvisorConfig base = {});
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& file);

nlohmann::ordered_json to_json(const SafeBOConfig& c);
nlohmann::ordered_json to_json(const KernelSpec& k);
nlohmann::ordered_json to_json(const AdvisorConfig& c);
nlohmann::ordered_json to_json(const RunConfig& c);

nlohmann::ordered_json to_json(const PatientParams& p);
PatientParams parse_patient_params(const nlohmann::json& j, const std::string& path);

/// One JSON record per line.
void write_cohort(std::ostream& out, const std::vector<PatientParams>& cohort);
std::vector<PatientParams> read_cohort(std::istream& in);

} // namespace safedose
