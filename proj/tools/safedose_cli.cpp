// safedose: in-silico trials, safety Monte Carlo, cohort generation, HTTP service.
//
// Exit codes: 0 success, 1 configuration/validation error, 2 runtime failure.

#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "safedose/config.hpp"
#include "safedose/errors.hpp"
#include "safedose/guidance_service.hpp"
#include "safedose/safety_mc.hpp"
#include "safedose/trial_metrics.hpp"

// After Eigen: <resolv.h> defines a _res macro that collides with Eigen internals.
#include "httplib.h"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace safedose;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::size_t> workers;
};

json read_config_json(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw ConfigError("config", "cannot read '" + path + "'");
    try {
        json j = json::parse(in);
        if (!j.is_object()) throw ConfigError("config", "top level must be an object");
        return j;
    } catch (const json::parse_error& e) {
        throw ConfigError("config", std::string("malformed JSON: ") + e.what());
    }
}

// Flags are applied to the raw document before parsing so that derived
// defaults (protocol and cohort seeds follow the run seed) stay consistent.
void apply_common(json& j, const CommonFlags& f) {
    if (f.seed) j["seed"] = *f.seed;
    if (f.out) j["out"] = *f.out;
    if (f.workers) j["workers"] = *f.workers;
}

/// Buffers artifacts in memory and writes them only once everything succeeded.
class ArtifactSet {
public:
    std::ostream& add(const std::string& name) {
        files_.emplace_back(name, std::make_unique<std::ostringstream>());
        return *files_.back().second;
    }

    void commit(const fs::path& dir) const {
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) throw std::runtime_error("cannot create '" + dir.string() + "': " + ec.message());
        for (const auto& [name, buf] : files_) {
            const fs::path tmp = dir / (name + ".tmp");
            {
                std::ofstream out(tmp, std::ios::binary);
                out << buf->str();
                if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
            }
            fs::rename(tmp, dir / name);
        }
    }

private:
    std::vector<std::pair<std::string, std::unique_ptr<std::ostringstream>>> files_;
};

void write_effective_config(std::ostream& out, const RunConfig& cfg) {
    out << to_json(cfg).dump(2) << '\n';
}

std::vector<PatientParams> load_cohort(const RunConfig& cfg) {
    if (!cfg.cohort.file.empty()) {
        std::ifstream in(cfg.cohort.file);
        if (!in) throw ConfigError("cohort.file", "cannot read '" + cfg.cohort.file + "'");
        auto cohort = read_cohort(in);
        if (cohort.size() < cfg.cohort.patients)
            throw ConfigError("cohort.patients", "cohort file holds only " +
                                                     std::to_string(cohort.size()) + " records");
        cohort.resize(cfg.cohort.patients);
        return cohort;
    }
    return generate_cohort(cfg.cohort.patients, cfg.cohort_seed(), cfg.cohort.spread);
}

int cmd_trial(const CommonFlags& flags, std::optional<std::size_t> days,
              std::optional<std::size_t> patients) {
    json j = read_config_json(flags.config);
    apply_common(j, flags);
    if (days) j["protocol"]["days"] = *days;
    if (patients) j["cohort"]["patients"] = *patients;
    const RunConfig cfg = parse_run_config(j);
    cfg.validate();

    const auto cohort = load_cohort(cfg);
    TrialOptions opts;
    opts.cgm = cfg.cgm;
    opts.source = cfg.metric_source;
    opts.workers = cfg.workers == 0 ? std::max(1u, std::thread::hardware_concurrency())
                                    : cfg.workers;
    const TrialReport report = run_trial(cohort, cfg.protocol, cfg.advisor, opts);

    ArtifactSet art;
    write_summary(art.add("summary.txt"), report);
    write_cohort(art.add("cohort.params"), cohort);
    for (const auto& p : report.patients)
        write_patient_csv(art.add("patient_" + std::to_string(p.index) + ".csv"), p);
    write_plotdata(art.add("plotdata.csv"), report);
    auto& log = art.add("episodes.jsonl");
    for (const auto& p : report.patients)
        write_episode_log(log, "patient_" + std::to_string(p.index), p.episodes);
    write_effective_config(art.add("effective_config"), cfg);
    art.commit(cfg.out_dir);

    std::cout << "trial: " << report.patients.size() << " patients x " << cfg.protocol.days
              << " days -> " << cfg.out_dir << '\n';
    std::ifstream summary(fs::path(cfg.out_dir) / "summary.txt");
    std::cout << summary.rdbuf();
    return 0;
}

int cmd_safety_mc(const CommonFlags& flags, std::optional<std::size_t> seeds,
                  std::optional<std::size_t> iterations, std::optional<double> beta_sqrt) {
    json j = read_config_json(flags.config);
    if (flags.out) j["out"] = *flags.out;
    if (flags.workers) j["workers"] = *flags.workers;
    if (flags.seed) j["safety_mc"]["seed"] = *flags.seed;
    if (seeds) j["safety_mc"]["seeds"] = *seeds;
    if (iterations) j["safety_mc"]["iterations"] = *iterations;
    if (beta_sqrt) j["safety_mc"]["safe_bo"]["beta_sqrt"] = *beta_sqrt;
    const RunConfig cfg = parse_run_config(j);
    cfg.validate();

    const SafetyMcReport report = run_safety_mc(cfg.safety_mc);
    ArtifactSet art;
    write_safety_report(art.add("safety_mc.txt"), cfg.safety_mc, report);
    write_effective_config(art.add("effective_config"), cfg);
    art.commit(cfg.out_dir);

    std::cout << "violation_rate: " << report.violation_rate()
              << " (bound " << report.bound(cfg.safety_mc.seeds) << ")\n"
              << "fallback_rate: " << report.fallback_rate() << '\n'
              << "report: " << (fs::path(cfg.out_dir) / "safety_mc.txt").string() << '\n';
    return 0;
}

int cmd_cohort(const CommonFlags& flags, std::optional<std::size_t> n,
               std::optional<double> spread) {
    json j = read_config_json(flags.config);
    apply_common(j, flags);
    if (n) j["cohort"]["patients"] = *n;
    if (spread) j["cohort"]["spread"] = *spread;
    const RunConfig cfg = parse_run_config(j);
    cfg.validate();

    const auto cohort = generate_cohort(cfg.cohort.patients, cfg.cohort_seed(), cfg.cohort.spread);
    ArtifactSet art;
    write_cohort(art.add("cohort.params"), cohort);
    write_effective_config(art.add("effective_config"), cfg);
    art.commit(cfg.out_dir);
    std::cout << "cohort: " << cohort.size() << " patients -> "
              << (fs::path(cfg.out_dir) / "cohort.params").string() << '\n';
    return 0;
}

std::atomic<httplib::Server*> g_server{nullptr};

extern "C" void on_signal(int) {
    if (auto* s = g_server.load()) s->stop();
}

int cmd_serve(const CommonFlags& flags, const std::string& host, int port) {
    if (port < 1 || port > 65535) throw ConfigError("port", "must lie in [1, 65535]");
    json j = read_config_json(flags.config);
    apply_common(j, flags);
    const RunConfig cfg = parse_run_config(j);
    cfg.validate();

    GuidanceService::Options opts;
    opts.advisor = cfg.advisor;
    opts.cgm = cfg.cgm;
    opts.patient_spread = cfg.cohort.spread;
    GuidanceService service(opts);

    httplib::Server server;
    mount_routes(server, service);
    if (!server.bind_to_port(host, port)) {
        spdlog::error("cannot bind {}:{}", host, port);
        return kExitRuntime;
    }
    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    spdlog::info("listening on {}:{}; sessions live in memory only", host, port);
    server.listen_after_bind();
    g_server = nullptr;
    spdlog::info("stopped; {} session(s) discarded", service.session_count());
    return 0;
}

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config, "JSON config file (see README for the schema)");
    cmd->add_option("--seed", f.seed, "Run seed");
    cmd->add_option("--out", f.out, "Output directory");
    cmd->add_option("--workers", f.workers, "Worker threads (0: logical cores)");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Safe Bayesian optimization for meal bolus dosing"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");

    CommonFlags flags;
    std::optional<std::size_t> days, patients, seeds, iterations, n;
    std::optional<double> beta_sqrt, spread;
    std::string host = "127.0.0.1";
    int port = 8080;

    auto* trial = app.add_subcommand("trial", "Run an in-silico trial and write artifacts");
    add_common(trial, flags);
    trial->add_option("--days", days, "Trial length in days");
    trial->add_option("--patients", patients, "Cohort size");

    auto* mc = app.add_subcommand("safety-mc", "Monte Carlo check of the safety guarantee");
    add_common(mc, flags);
    mc->add_option("--seeds", seeds, "Number of sampled ground truths");
    mc->add_option("--iterations", iterations, "Optimization steps per ground truth");
    mc->add_option("--beta-sqrt", beta_sqrt, "Confidence multiplier");

    auto* cohort = app.add_subcommand("cohort", "Generate a screened virtual cohort");
    add_common(cohort, flags);
    cohort->add_option("-n,--patients", n, "Cohort size");
    cohort->add_option("--spread", spread, "Log-normal parameter spread");

    auto* serve = app.add_subcommand("serve", "Serve the guidance API over HTTP");
    add_common(serve, flags);
    serve->add_option("--host", host, "Bind address");
    serve->add_option("--port", port, "Bind port");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitValidation;
    }

    try {
        if (*trial) return cmd_trial(flags, days, patients);
        if (*mc) return cmd_safety_mc(flags, seeds, iterations, beta_sqrt);
        if (*cohort) return cmd_cohort(flags, n, spread);
        if (*serve) return cmd_serve(flags, host, port);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitRuntime;
}
