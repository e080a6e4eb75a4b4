#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <shared_mutex>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "safedose/dose_advisor.hpp"
#include "safedose/patient_sim.hpp"
#include "safedose/trial_metrics.hpp"

namespace httplib {
class Server;
}

namespace safedose {

/// Error surfaced to HTTP clients: status plus a machine-readable code.
class ServiceError : public std::runtime_error {
public:
    ServiceError(int status, std::string code, const std::string& message,
                 nlohmann::json details = nlohmann::json::object())
        : std::runtime_error(message), status_(status), code_(std::move(code)),
          details_(std::move(details)) {}

    int status() const noexcept { return status_; }
    const std::string& code() const noexcept { return code_; }
    const nlohmann::json& details() const noexcept { return details_; }
    nlohmann::json body() const;

private:
    int status_;
    std::string code_;
    nlohmann::json details_;
};

enum class SessionMode { live, simulated };

nlohmann::json to_json(const DoseDecision& d);
nlohmann::json to_json(const PosteriorView& v);

/// In-memory session store. Requests on different sessions run concurrently;
/// requests on one session are serialized.
class GuidanceService {
public:
    struct Options {
        AdvisorConfig advisor{};
        CgmModel cgm{};
        double patient_spread = 0.2;
    };

    GuidanceService() : GuidanceService(Options{}) {}
    explicit GuidanceService(Options options);

    nlohmann::json create_session(const nlohmann::json& body);
    nlohmann::json announce_meal(const std::string& id, const nlohmann::json& body);
    nlohmann::json submit_cgm(const std::string& id, const nlohmann::json& body);
    nlohmann::json close_and_learn(const std::string& id, const nlohmann::json& body = {});
    nlohmann::json advance(const std::string& id, const nlohmann::json& body);
    nlohmann::json posterior(const std::string& id, const nlohmann::json& query = {}) const;
    nlohmann::json history(const std::string& id) const;

    /// Episode log records for one session.
    void snapshot(const std::string& id, std::ostream& out) const;

    /// Copy of a session's advisor, for adapter-equivalence checks.
    DoseAdvisor advisor_copy(const std::string& id) const;

    std::size_t session_count() const;

private:
    struct Simulation {
        VirtualPatient patient;
        CgmSensor sensor;
        std::vector<TraceRow> trace;
    };

    struct Session {
        std::string id;
        SessionMode mode = SessionMode::live;
        std::int64_t created_at = 0;
        DoseAdvisor advisor;
        std::optional<Simulation> sim;
        mutable std::mutex mutex;

        Session(std::string sid, SessionMode m, DoseAdvisor a)
            : id(std::move(sid)), mode(m), advisor(std::move(a)) {}
    };

    std::shared_ptr<Session> find(const std::string& id) const;
    void run_simulation(Session& s, double until) const;
    nlohmann::json view_for(const Session& s, const nlohmann::json& query) const;

    Options options_;
    mutable std::shared_mutex sessions_mutex_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::uint64_t next_id_ = 1;
};

/// Registers the REST routes (see docs/http_api.md).
void mount_routes(httplib::Server& server, GuidanceService& service);

} // namespace safedose
