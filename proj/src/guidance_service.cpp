#include "safedose/guidance_service.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <regex>

#include "httplib.h"
#include "safedose/config.hpp"
#include "safedose/errors.hpp"

namespace safedose {

using nlohmann::json;

namespace {

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double require_number(const json& body, const std::string& key) {
    if (!body.is_object() || !body.contains(key) || !body.at(key).is_number())
        throw ServiceError(422, "invalid_request", "'" + key + "' must be a number",
                           {{"field", key}});
    return body.at(key).get<double>();
}

json episode_json(const Episode& e) {
    json window = json::array();
    for (const auto& s : e.cgm_window) window.push_back({s.t, s.glucose});
    return {{"k", e.k},
            {"meal_time", e.meal_time},
            {"category", std::string(to_string(e.size))},
            {"cho_g", e.cho_grams},
            {"dose_U", e.dose},
            {"fallback_used", e.fallback_used},
            {"reward_obs", e.reward_obs ? json(*e.reward_obs) : json(nullptr)},
            {"constraint_obs", e.constraint_obs ? json(*e.constraint_obs) : json(nullptr)},
            {"closed", e.closed},
            {"discarded", e.discarded},
            {"cgm_window", window}};
}

/// Maps library exceptions onto service errors; rethrows anything else.
template <typename F>
auto translate(F&& fn) {
    try {
        return fn();
    } catch (const ServiceError&) {
        throw;
    } catch (const ConfigError& e) {
        throw ServiceError(400, "validation_error", e.what(), {{"field", e.field()}});
    } catch (const SequencingError& e) {
        throw ServiceError(422, "sequencing_error", e.what());
    } catch (const ProtocolError& e) {
        throw ServiceError(409, "episode_state_conflict", e.what());
    } catch (const PreconditionError& e) {
        throw ServiceError(422, "invalid_request", e.what());
    }
}

} // namespace

json ServiceError::body() const {
    json err = {{"code", code_}, {"message", what()}};
    for (auto it = details_.begin(); it != details_.end(); ++it) err[it.key()] = it.value();
    return {{"error", err}};
}

json to_json(const DoseDecision& d) {
    json trace = json::array();
    for (double v : d.acquisition_trace) trace.push_back(finite_or_null(v));
    return {{"dose", d.dose}, {"fallback_used", d.fallback_used}, {"acquisition_trace", trace}};
}

json to_json(const PosteriorView& v) {
    json points = json::array();
    for (const auto& p : v.points)
        points.push_back({{"dose", p.dose},
                          {"reward_mean", p.reward_mean},
                          {"reward_std", p.reward_std},
                          {"constraint_lcb", p.constraint_lcb},
                          {"safe_flag", p.safe},
                          {"acquisition_value", finite_or_null(p.acquisition_value)}});
    return {{"fallback_flag", v.fallback},
            {"recommended_dose", v.recommended_dose},
            {"points", points}};
}

GuidanceService::GuidanceService(Options options) : options_(std::move(options)) {
    options_.advisor.validate();
    options_.cgm.validate();
}

std::shared_ptr<GuidanceService::Session> GuidanceService::find(const std::string& id) const {
    std::shared_lock lock(sessions_mutex_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end())
        throw ServiceError(404, "unknown_session", "no session '" + id + "'", {{"session_id", id}});
    return it->second;
}

std::size_t GuidanceService::session_count() const {
    std::shared_lock lock(sessions_mutex_);
    return sessions_.size();
}

json GuidanceService::create_session(const json& body) {
    const json b = body.is_null() ? json::object() : body;
    if (!b.is_object()) throw ServiceError(400, "bad_request", "body must be a JSON object");

    SessionMode mode = SessionMode::live;
    if (b.contains("mode")) {
        const json& m = b.at("mode");
        if (m == "live") mode = SessionMode::live;
        else if (m == "simulated") mode = SessionMode::simulated;
        else
            throw ServiceError(400, "validation_error", "mode must be 'live' or 'simulated'",
                               {{"field", "mode"}});
    }
    std::uint64_t seed = 1;
    if (b.contains("seed")) {
        if (!b.at("seed").is_number_integer() || b.at("seed").get<std::int64_t>() < 0)
            throw ServiceError(400, "validation_error", "seed must be a non-negative integer",
                               {{"field", "seed"}});
        seed = b.at("seed").get<std::uint64_t>();
    }

    AdvisorConfig cfg = translate([&] {
        AdvisorConfig c = options_.advisor;
        if (b.contains("config")) {
            const json& cj = b.at("config");
            if (!cj.is_object())
                throw ConfigError("config", "expected an object with safe_bo/advisor");
            for (auto it = cj.begin(); it != cj.end(); ++it)
                if (it.key() != "safe_bo" && it.key() != "advisor")
                    throw ConfigError("config." + it.key(), "unknown key");
            const SafeBOConfig bo =
                cj.contains("safe_bo") ? parse_safe_bo(cj.at("safe_bo"), "safe_bo", c.bo) : c.bo;
            if (cj.contains("advisor")) c = parse_advisor(cj.at("advisor"), "advisor", c);
            c.bo = bo;
        }
        c.validate();
        return c;
    });

    auto session = std::make_shared<Session>("", mode, DoseAdvisor(cfg));
    session->created_at = std::chrono::duration_cast<std::chrono::seconds>(
                              std::chrono::system_clock::now().time_since_epoch())
                              .count();
    if (mode == SessionMode::simulated) {
        const auto params = translate([&] {
            try {
                return generate_cohort(1, seed, options_.patient_spread).front();
            } catch (const GenerationError& e) {
                throw ServiceError(500, "generation_error", e.what());
            }
        });
        session->sim.emplace(Simulation{VirtualPatient(params), CgmSensor(options_.cgm, seed), {}});
    }

    std::unique_lock lock(sessions_mutex_);
    session->id = "s" + std::to_string(next_id_++);
    sessions_.emplace(session->id, session);
    return {{"session_id", session->id},
            {"mode", mode == SessionMode::live ? "live" : "simulated"},
            {"created_at", session->created_at},
            {"episodes", 0}};
}

void GuidanceService::run_simulation(Session& s, double until) const {
    auto& sim = *s.sim;
    const auto period = static_cast<long>(std::lround(options_.cgm.sample_period));
    while (sim.patient.time() < until) {
        const long minute = std::lround(sim.patient.time());
        if (minute % period == 0) {
            const double t = static_cast<double>(minute);
            const double bg = sim.patient.state().g;
            const double cgm = sim.sensor.read(t, bg);
            s.advisor.ingest_cgm(t, cgm);
            sim.trace.push_back({t, bg, cgm, 0.0, 0.0});
        }
        sim.patient.advance(std::min(1.0, until - sim.patient.time()));
    }
}

json GuidanceService::announce_meal(const std::string& id, const json& body) {
    auto session = find(id);
    std::lock_guard lock(session->mutex);
    Session& s = *session;
    if (!body.is_object()) throw ServiceError(422, "invalid_request", "body must be an object");

    return translate([&] {
        if (s.advisor.open_episode())
            throw ServiceError(409, "episode_open",
                               "an episode is already open; close it before announcing a meal");
        MealAnnouncement meal;
        if (!body.contains("category") || !body.at("category").is_string())
            throw ServiceError(422, "invalid_request", "'category' must be one of S, M, L, XL",
                               {{"field", "category"}});
        try {
            meal.size = meal_size_from_string(body.at("category").get<std::string>());
        } catch (const ConfigError& e) {
            throw ServiceError(422, "invalid_request", e.what(), {{"field", "category"}});
        }
        meal.cho_grams = body.contains("cho_g")
                             ? require_number(body, "cho_g")
                             : s.advisor.config().category_grams[static_cast<std::size_t>(meal.size)];
        if (s.mode == SessionMode::simulated) {
            meal.time = body.contains("time") ? require_number(body, "time") : s.sim->patient.time();
            if (meal.time < s.sim->patient.time())
                throw ServiceError(422, "time_in_past", "meal time precedes the simulation clock",
                                   {{"now", s.sim->patient.time()}});
            run_simulation(s, meal.time);
        } else {
            meal.time = require_number(body, "time");
        }

        const PosteriorView view = s.advisor.posterior_view(meal);
        const DoseDecision decision = s.advisor.recommend_dose(meal);
        if (s.sim) {
            s.sim->patient.bolus(decision.dose);
            s.sim->patient.eat(meal.cho_grams);
            if (!s.sim->trace.empty()) {
                s.sim->trace.back().bolus += decision.dose;
                s.sim->trace.back().cho += meal.cho_grams;
            }
        }
        return json{{"decision", to_json(decision)},
                    {"posterior", to_json(view)},
                    {"k", s.advisor.episodes().back().k}};
    });
}

json GuidanceService::submit_cgm(const std::string& id, const json& body) {
    auto session = find(id);
    std::lock_guard lock(session->mutex);
    Session& s = *session;
    if (s.mode == SessionMode::simulated)
        throw ServiceError(409, "simulated_session",
                           "simulated sessions generate their own CGM; use /advance");
    if (!body.is_object() || !body.contains("samples") || !body.at("samples").is_array())
        throw ServiceError(422, "invalid_request", "'samples' must be an array",
                           {{"field", "samples"}});

    std::vector<CgmSample> batch;
    std::optional<double> last = s.advisor.last_sample_time();
    for (std::size_t i = 0; i < body.at("samples").size(); ++i) {
        const json& item = body.at("samples")[i];
        const double t = require_number(item, "t");
        const double g = require_number(item, "glucose");
        if (last && !(t > *last))
            throw ServiceError(422, "sequencing_error",
                               "sample " + std::to_string(i) + " at t=" + std::to_string(t) +
                                   " is not after t=" + std::to_string(*last),
                               {{"index", i}});
        last = t;
        batch.push_back({t, g});
    }
    return translate([&] {
        for (const auto& smp : batch) s.advisor.ingest_cgm(smp.t, smp.glucose);
        const Episode* open = s.advisor.open_episode();
        return json{{"accepted", batch.size()},
                    {"window_length", open ? json(open->cgm_window.size()) : json(nullptr)}};
    });
}

json GuidanceService::close_and_learn(const std::string& id, const json& body) {
    auto session = find(id);
    std::lock_guard lock(session->mutex);
    Session& s = *session;
    return translate([&] {
        const Episode* open = s.advisor.open_episode();
        if (!open) throw ServiceError(409, "no_open_episode", "no episode is open");
        const auto& cfg = s.advisor.config();
        if (open->cgm_window.size() < cfg.min_samples)
            throw ServiceError(422, "too_few_samples",
                               "episode window has " + std::to_string(open->cgm_window.size()) +
                                   " CGM samples; " + std::to_string(cfg.min_samples) +
                                   " required",
                               {{"samples", open->cgm_window.size()},
                                {"required", cfg.min_samples}});
        double now = 0.0;
        if (s.sim) {
            now = s.sim->patient.time();
        } else if (body.is_object() && body.contains("now")) {
            now = require_number(body, "now");
        } else {
            now = open->cgm_window.back().t;
        }
        const bool next_meal = body.is_object() && body.value("next_meal_announced", false);
        if (!next_meal && now < open->meal_time + cfg.min_window)
            throw ServiceError(422, "window_too_short",
                               "postprandial window needs " + std::to_string(cfg.min_window) +
                                   " minutes; " + std::to_string(now - open->meal_time) +
                                   " elapsed",
                               {{"elapsed", now - open->meal_time}, {"required", cfg.min_window}});
        const MealAnnouncement meal{open->meal_time, open->size, open->cho_grams};
        const auto outcome = s.advisor.close_episode(now, next_meal);
        const PosteriorView view = s.advisor.posterior_view(meal);
        return json{{"reward_obs", outcome ? json(outcome->reward_obs) : json(nullptr)},
                    {"constraint_obs", outcome ? json(outcome->constraint_obs) : json(nullptr)},
                    {"posterior", to_json(view)}};
    });
}

json GuidanceService::advance(const std::string& id, const json& body) {
    auto session = find(id);
    std::lock_guard lock(session->mutex);
    Session& s = *session;
    if (s.mode != SessionMode::simulated)
        throw ServiceError(409, "live_session", "only simulated sessions can advance time");
    const double minutes = require_number(body, "minutes");
    if (!(minutes >= 0.0) || minutes > 7.0 * 1440.0)
        throw ServiceError(422, "invalid_request", "'minutes' must lie in [0, 10080]",
                           {{"field", "minutes"}});
    const std::size_t before = s.sim->trace.size();
    translate([&] {
        run_simulation(s, s.sim->patient.time() + minutes);
        return 0;
    });
    const Episode* open = s.advisor.open_episode();
    return {{"time", s.sim->patient.time()},
            {"new_samples", s.sim->trace.size() - before},
            {"glucose", s.sim->trace.empty() ? json(nullptr) : json(s.sim->trace.back().cgm)},
            {"window_length", open ? json(open->cgm_window.size()) : json(nullptr)}};
}

json GuidanceService::view_for(const Session& s, const json& query) const {
    MealAnnouncement meal;
    if (const Episode* open = s.advisor.open_episode()) {
        meal = {open->meal_time, open->size, open->cho_grams};
    } else {
        meal.size = MealSize::M;
        if (query.is_object() && query.contains("category")) {
            if (!query.at("category").is_string())
                throw ServiceError(422, "invalid_request", "'category' must be a string",
                                   {{"field", "category"}});
            try {
                meal.size = meal_size_from_string(query.at("category").get<std::string>());
            } catch (const ConfigError& e) {
                throw ServiceError(422, "invalid_request", e.what(), {{"field", "category"}});
            }
        }
        meal.cho_grams = query.is_object() && query.contains("cho_g")
                             ? require_number(query, "cho_g")
                             : s.advisor.config().category_grams[static_cast<std::size_t>(meal.size)];
        meal.time = query.is_object() && query.contains("time") ? require_number(query, "time")
                    : s.sim                                     ? s.sim->patient.time()
                                                                : 0.0;
    }
    return translate([&] {
        json out = to_json(s.advisor.posterior_view(meal));
        out["category"] = std::string(to_string(meal.size));
        out["cho_g"] = meal.cho_grams;
        return out;
    });
}

json GuidanceService::posterior(const std::string& id, const json& query) const {
    auto session = find(id);
    std::lock_guard lock(session->mutex);
    return view_for(*session, query);
}

json GuidanceService::history(const std::string& id) const {
    auto session = find(id);
    std::lock_guard lock(session->mutex);
    const Session& s = *session;
    json episodes = json::array();
    for (const auto& e : s.advisor.episodes()) episodes.push_back(episode_json(e));
    json out = {{"session_id", s.id},
                {"mode", s.mode == SessionMode::live ? "live" : "simulated"},
                {"episodes", episodes}};
    if (s.sim) {
        json trace = json::array();
        for (const auto& r : s.sim->trace)
            trace.push_back({{"t", r.t}, {"bg", r.bg}, {"cgm", r.cgm}, {"bolus_U", r.bolus},
                             {"cho_g", r.cho}});
        out["trace"] = trace;
        out["time"] = s.sim->patient.time();
    }
    return out;
}

void GuidanceService::snapshot(const std::string& id, std::ostream& out) const {
    auto session = find(id);
    std::lock_guard lock(session->mutex);
    write_episode_log(out, session->id, session->advisor.episodes());
}

DoseAdvisor GuidanceService::advisor_copy(const std::string& id) const {
    auto session = find(id);
    std::lock_guard lock(session->mutex);
    return session->advisor;
}

void mount_routes(httplib::Server& server, GuidanceService& service) {
    auto respond = [](httplib::Response& res, int status, const json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    };
    auto guarded = [respond](auto&& handler) {
        return [respond, handler](const httplib::Request& req, httplib::Response& res) {
            try {
                json body = json::object();
                if (!req.body.empty()) {
                    try {
                        body = json::parse(req.body);
                    } catch (const json::parse_error& e) {
                        throw ServiceError(400, "bad_json", e.what());
                    }
                }
                const auto [status, out] = handler(req, body);
                respond(res, status, out);
            } catch (const ServiceError& e) {
                respond(res, e.status(), e.body());
            } catch (const std::exception& e) {
                respond(res, 500, ServiceError(500, "internal_error", e.what()).body());
            }
        };
    };
    using Result = std::pair<int, json>;

    server.Post("/sessions", guarded([&service](const httplib::Request&, const json& body) {
        return Result{201, service.create_session(body)};
    }));
    server.Post(R"(/sessions/([^/]+)/meals)",
                guarded([&service](const httplib::Request& req, const json& body) {
                    return Result{200, service.announce_meal(req.matches[1], body)};
                }));
    server.Post(R"(/sessions/([^/]+)/cgm)",
                guarded([&service](const httplib::Request& req, const json& body) {
                    return Result{200, service.submit_cgm(req.matches[1], body)};
                }));
    server.Post(R"(/sessions/([^/]+)/close)",
                guarded([&service](const httplib::Request& req, const json& body) {
                    return Result{200, service.close_and_learn(req.matches[1], body)};
                }));
    server.Post(R"(/sessions/([^/]+)/advance)",
                guarded([&service](const httplib::Request& req, const json& body) {
                    return Result{200, service.advance(req.matches[1], body)};
                }));
    server.Get(R"(/sessions/([^/]+)/posterior)",
               guarded([&service](const httplib::Request& req, const json&) {
                   json query = json::object();
                   if (req.has_param("category")) query["category"] = req.get_param_value("category");
                   for (const char* key : {"cho_g", "time"}) {
                       if (!req.has_param(key)) continue;
                       try {
                           query[key] = std::stod(req.get_param_value(key));
                       } catch (const std::exception&) {
                           throw ServiceError(422, "invalid_request",
                                              std::string("'") + key + "' must be a number",
                                              {{"field", key}});
                       }
                   }
                   return Result{200, service.posterior(req.matches[1], query)};
               }));
    server.Get(R"(/sessions/([^/]+)/history)",
               guarded([&service](const httplib::Request& req, const json&) {
                   return Result{200, service.history(req.matches[1])};
               }));
}

} // namespace safedose
