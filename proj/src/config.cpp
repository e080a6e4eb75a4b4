#include "safedose/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "safedose/errors.hpp"

namespace safedose {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string join(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
}

/// Reads keys from one JSON object, remembering which were consumed.
class Fields {
public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_, "expected an object");
    }

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key);
    }
    const json& at(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }
    std::string path(const std::string& key) const { return join(path_, key); }

    void number(const std::string& key, double& out) {
        if (!has(key)) return;
        const json& v = j_.at(key);
        if (!v.is_number()) throw ConfigError(path(key), "expected a number");
        out = v.get<double>();
    }
    void count(const std::string& key, std::size_t& out) {
        if (!has(key)) return;
        const json& v = j_.at(key);
        if (!v.is_number_integer() || v.get<long long>() < 0)
            throw ConfigError(path(key), "expected a non-negative integer");
        out = v.get<std::size_t>();
    }
    void seed(const std::string& key, std::uint64_t& out) {
        std::size_t v = out;
        count(key, v);
        out = v;
    }
    void flag(const std::string& key, bool& out) {
        if (!has(key)) return;
        const json& v = j_.at(key);
        if (!v.is_boolean()) throw ConfigError(path(key), "expected true or false");
        out = v.get<bool>();
    }
    void text(const std::string& key, std::string& out) {
        if (!has(key)) return;
        const json& v = j_.at(key);
        if (!v.is_string()) throw ConfigError(path(key), "expected a string");
        out = v.get<std::string>();
    }
    std::vector<double> numbers(const std::string& key) {
        const json& v = at(key);
        if (!v.is_array()) throw ConfigError(path(key), "expected an array of numbers");
        std::vector<double> out;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!v[i].is_number())
                throw ConfigError(path(key) + "[" + std::to_string(i) + "]", "expected a number");
            out.push_back(v[i].get<double>());
        }
        return out;
    }

    /// Rejects keys that were never consumed.
    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(path(it.key()), "unknown key");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

Interval parse_interval(const json& j, const std::string& path) {
    if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number())
        throw ConfigError(path, "expected [lo, hi]");
    return {j[0].get<double>(), j[1].get<double>()};
}

HyperBounds parse_bounds(const json& j, const std::string& path, HyperBounds base) {
    Fields f(j, path);
    if (f.has("signal_std")) base.signal_std = parse_interval(f.at("signal_std"), f.path("signal_std"));
    if (f.has("lengthscales")) {
        const json& a = f.at("lengthscales");
        if (!a.is_array() || a.empty())
            throw ConfigError(f.path("lengthscales"), "expected a non-empty array of [lo, hi]");
        base.lengthscales.clear();
        for (std::size_t i = 0; i < a.size(); ++i)
            base.lengthscales.push_back(
                parse_interval(a[i], f.path("lengthscales") + "[" + std::to_string(i) + "]"));
    }
    f.finish();
    return base;
}

ordered_json to_json(const HyperBounds& b) {
    ordered_json j;
    j["signal_std"] = {b.signal_std.lo, b.signal_std.hi};
    j["lengthscales"] = ordered_json::array();
    for (const auto& i : b.lengthscales) j["lengthscales"].push_back({i.lo, i.hi});
    return j;
}

template <typename F>
auto rethrow_with_prefix(const std::string& prefix, F&& fn) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        if (e.field().rfind(prefix, 0) == 0) throw;
        throw ConfigError(join(prefix, e.field()), e.message());
    }
}

CgmModel parse_cgm(const json& j, const std::string& path, CgmModel base) {
    Fields f(j, path);
    f.number("sample_period", base.sample_period);
    f.number("noise_std", base.noise_std);
    f.number("delay", base.delay);
    f.finish();
    rethrow_with_prefix(path, [&] { base.validate(); return 0; });
    return base;
}

TrialProtocol parse_protocol(const json& j, const std::string& path, TrialProtocol base) {
    Fields f(j, path);
    f.count("days", base.days);
    if (f.has("meal_times")) base.meal_times = f.numbers("meal_times");
    f.number("meal_jitter", base.meal_jitter);
    if (f.has("size_weights")) {
        const auto w = f.numbers("size_weights");
        if (w.size() != kMealSizeCount)
            throw ConfigError(f.path("size_weights"), "expected 4 weights (S, M, L, XL)");
        std::copy(w.begin(), w.end(), base.size_weights.begin());
    }
    f.seed("seed", base.seed);
    f.finish();
    return base;
}

SafetyMcConfig parse_safety_mc(const json& j, const std::string& path, SafetyMcConfig base) {
    Fields f(j, path);
    f.count("seeds", base.seeds);
    f.count("iterations", base.iterations);
    f.seed("seed", base.seed);
    f.number("noise_std", base.noise_std);
    if (f.has("kernel")) base.kernel = parse_kernel(f.at("kernel"), f.path("kernel"), base.kernel);
    if (f.has("safe_bo")) base.bo = parse_safe_bo(f.at("safe_bo"), f.path("safe_bo"), base.bo);
    f.finish();
    return base;
}

} // namespace

SafeBOConfig parse_safe_bo(const json& j, const std::string& path, SafeBOConfig base) {
    Fields f(j, path);
    if (f.has("dose_grid")) {
        const json& g = f.at("dose_grid");
        if (g.is_array()) {
            base.dose_grid = f.numbers("dose_grid");
        } else {
            Fields gf(g, f.path("dose_grid"));
            double lo = 0.0, hi = 20.0;
            std::size_t points = 201;
            gf.number("lo", lo);
            gf.number("hi", hi);
            gf.count("points", points);
            gf.finish();
            if (points < 1) throw ConfigError(gf.path("points"), "must be >= 1");
            base.dose_grid = SafeBOConfig::uniform_grid(lo, hi, points);
        }
    }
    f.number("tau", base.tau);
    f.flag("tau_decay", base.tau_decay);
    f.number("beta_sqrt", base.beta_sqrt);
    if (f.has("beta_mode")) {
        std::string mode;
        f.text("beta_mode", mode);
        if (mode == "constant") base.beta_mode = BetaMode::constant;
        else if (mode == "growing") base.beta_mode = BetaMode::growing;
        else throw ConfigError(f.path("beta_mode"), "expected 'constant' or 'growing'");
    }
    f.number("delta", base.delta);
    f.number("fallback_dose", base.fallback_dose);
    if (f.has("acquisition")) {
        Fields af(f.at("acquisition"), f.path("acquisition"));
        if (af.has("kind")) {
            std::string kind;
            af.text("kind", kind);
            if (kind == "ucb") base.acquisition.kind = AcquisitionKind::ucb;
            else if (kind == "ei") base.acquisition.kind = AcquisitionKind::ei;
            else throw ConfigError(af.path("kind"), "expected 'ucb' or 'ei'");
        }
        af.number("kappa", base.acquisition.kappa);
        af.finish();
    }
    f.number("safety_margin", base.safety_margin);
    f.finish();
    rethrow_with_prefix(path, [&] { base.validate(); return 0; });
    return base;
}

KernelSpec parse_kernel(const json& j, const std::string& path, KernelSpec base) {
    Fields f(j, path);
    if (f.has("family")) {
        std::string fam;
        f.text("family", fam);
        if (fam == "squared_exponential") base.family = KernelFamily::squared_exponential;
        else if (fam == "matern52") base.family = KernelFamily::matern52;
        else throw ConfigError(f.path("family"), "expected 'squared_exponential' or 'matern52'");
    }
    f.number("signal_std", base.signal_std);
    if (f.has("lengthscales")) base.lengthscales = f.numbers("lengthscales");
    f.finish();
    rethrow_with_prefix(path, [&] { base.validate(); return 0; });
    return base;
}

AdvisorConfig parse_advisor(const json& j, const std::string& path, AdvisorConfig base) {
    Fields f(j, path);
    if (f.has("reward_kernel"))
        base.reward_kernel = parse_kernel(f.at("reward_kernel"), f.path("reward_kernel"),
                                          base.reward_kernel);
    if (f.has("constraint_kernel"))
        base.constraint_kernel = parse_kernel(f.at("constraint_kernel"),
                                              f.path("constraint_kernel"), base.constraint_kernel);
    f.number("reward_noise_std", base.reward_noise_std);
    f.number("constraint_noise_std", base.constraint_noise_std);
    f.flag("normalize_reward", base.normalize_reward);
    f.number("output_scale_floor", base.output_scale_floor);
    f.number("jitter_rel", base.jitter_rel);
    f.flag("refit_enabled", base.refit_enabled);
    f.count("refit_every", base.refit_every);
    f.count("refit_starts", base.refit_starts);
    if (f.has("reward_bounds"))
        base.reward_bounds = parse_bounds(f.at("reward_bounds"), f.path("reward_bounds"),
                                          base.reward_bounds);
    if (f.has("constraint_bounds"))
        base.constraint_bounds = parse_bounds(f.at("constraint_bounds"),
                                              f.path("constraint_bounds"), base.constraint_bounds);
    if (f.has("category_grams")) {
        const json& g = f.at("category_grams");
        if (!g.is_object()) throw ConfigError(f.path("category_grams"), "expected {S, M, L, XL}");
        Fields gf(g, f.path("category_grams"));
        for (std::size_t i = 0; i < kMealSizeCount; ++i)
            gf.number(std::string(to_string(static_cast<MealSize>(i))), base.category_grams[i]);
        gf.finish();
    }
    f.number("cho_max", base.cho_max);
    f.flag("mealtime_context", base.mealtime_context);
    if (f.has("context_mode")) {
        std::string mode;
        f.text("context_mode", mode);
        if (mode == "per_category") base.context_mode = ContextMode::per_category;
        else if (mode == "shared") base.context_mode = ContextMode::shared;
        else throw ConfigError(f.path("context_mode"), "expected 'per_category' or 'shared'");
    }
    f.number("window_cap", base.window_cap);
    f.number("min_window", base.min_window);
    f.count("min_samples", base.min_samples);
    f.number("premeal_buffer", base.premeal_buffer);
    f.number("hypo_threshold", base.hypo_threshold);
    f.finish();
    return base;
}

void RunConfig::validate() const {
    try {
        advisor.validate();
    } catch (const ConfigError& e) {
        const std::string& fld = e.field();
        if (fld.rfind("advisor.", 0) == 0 || fld.rfind("safe_bo.", 0) == 0) throw;
        throw ConfigError("advisor." + fld, e.message());
    }
    protocol.validate();
    rethrow_with_prefix("cgm", [&] { cgm.validate(); return 0; });
    if (cohort.patients < 1) throw ConfigError("cohort.patients", "must be >= 1");
    if (!(cohort.spread >= 0.0 && cohort.spread <= 0.5))
        throw ConfigError("cohort.spread", "must lie in [0, 0.5]");
    if (out_dir.empty()) throw ConfigError("out", "must not be empty");
    safety_mc.validate();
}

RunConfig parse_run_config(const json& j) {
    RunConfig c;
    Fields f(j, "");
    f.seed("seed", c.seed);
    f.count("workers", c.workers);
    f.text("out", c.out_dir);
    if (f.has("safe_bo")) c.advisor.bo = parse_safe_bo(f.at("safe_bo"), "safe_bo", c.advisor.bo);
    if (f.has("advisor")) {
        const SafeBOConfig bo = c.advisor.bo;
        c.advisor = parse_advisor(f.at("advisor"), "advisor", c.advisor);
        c.advisor.bo = bo;
    }
    if (f.has("protocol")) c.protocol = parse_protocol(f.at("protocol"), "protocol", c.protocol);
    if (f.has("cgm")) c.cgm = parse_cgm(f.at("cgm"), "cgm", c.cgm);
    if (f.has("cohort")) {
        Fields cf(f.at("cohort"), "cohort");
        cf.count("patients", c.cohort.patients);
        cf.number("spread", c.cohort.spread);
        if (cf.has("seed")) {
            std::uint64_t s = 0;
            cf.seed("seed", s);
            c.cohort.seed = s;
        }
        cf.text("file", c.cohort.file);
        cf.finish();
    }
    if (f.has("metric_source")) {
        std::string src;
        f.text("metric_source", src);
        if (src == "true_glucose") c.metric_source = MetricSource::true_glucose;
        else if (src == "cgm") c.metric_source = MetricSource::cgm;
        else throw ConfigError("metric_source", "expected 'true_glucose' or 'cgm'");
    }
    if (f.has("safety_mc"))
        c.safety_mc = parse_safety_mc(f.at("safety_mc"), "safety_mc", c.safety_mc);
    f.finish();
    if (!f.has("protocol") || !j.at("protocol").contains("seed")) c.protocol.seed = c.seed;
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("config", "cannot open " + file.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config", std::string("malformed JSON: ") + e.what());
    }
    return parse_run_config(j);
}

ordered_json to_json(const SafeBOConfig& c) {
    ordered_json j;
    j["dose_grid"] = c.dose_grid;
    j["tau"] = c.tau;
    j["tau_decay"] = c.tau_decay;
    j["beta_sqrt"] = c.beta_sqrt;
    j["beta_mode"] = c.beta_mode == BetaMode::constant ? "constant" : "growing";
    j["delta"] = c.delta;
    j["fallback_dose"] = c.fallback_dose;
    j["acquisition"] = {{"kind", c.acquisition.kind == AcquisitionKind::ucb ? "ucb" : "ei"},
                        {"kappa", c.acquisition.kappa}};
    j["safety_margin"] = c.safety_margin;
    return j;
}

ordered_json to_json(const KernelSpec& k) {
    ordered_json j;
    j["family"] =
        k.family == KernelFamily::squared_exponential ? "squared_exponential" : "matern52";
    j["signal_std"] = k.signal_std;
    j["lengthscales"] = k.lengthscales;
    return j;
}

ordered_json to_json(const AdvisorConfig& c) {
    ordered_json j;
    j["reward_kernel"] = to_json(c.reward_kernel);
    j["constraint_kernel"] = to_json(c.constraint_kernel);
    j["reward_noise_std"] = c.reward_noise_std;
    j["constraint_noise_std"] = c.constraint_noise_std;
    j["normalize_reward"] = c.normalize_reward;
    j["output_scale_floor"] = c.output_scale_floor;
    j["jitter_rel"] = c.jitter_rel;
    j["refit_enabled"] = c.refit_enabled;
    j["refit_every"] = c.refit_every;
    j["refit_starts"] = c.refit_starts;
    j["reward_bounds"] = to_json(c.reward_bounds);
    j["constraint_bounds"] = to_json(c.constraint_bounds);
    ordered_json grams;
    for (std::size_t i = 0; i < kMealSizeCount; ++i)
        grams[std::string(to_string(static_cast<MealSize>(i)))] = c.category_grams[i];
    j["category_grams"] = grams;
    j["cho_max"] = c.cho_max;
    j["mealtime_context"] = c.mealtime_context;
    j["context_mode"] = c.context_mode == ContextMode::per_category ? "per_category" : "shared";
    j["window_cap"] = c.window_cap;
    j["min_window"] = c.min_window;
    j["min_samples"] = c.min_samples;
    j["premeal_buffer"] = c.premeal_buffer;
    j["hypo_threshold"] = c.hypo_threshold;
    return j;
}

ordered_json to_json(const RunConfig& c) {
    ordered_json j;
    j["seed"] = c.seed;
    j["workers"] = c.workers;
    j["out"] = c.out_dir;
    j["metric_source"] = c.metric_source == MetricSource::true_glucose ? "true_glucose" : "cgm";
    j["safe_bo"] = to_json(c.advisor.bo);
    j["advisor"] = to_json(c.advisor);
    j["protocol"] = {{"days", c.protocol.days},
                     {"meal_times", c.protocol.meal_times},
                     {"meal_jitter", c.protocol.meal_jitter},
                     {"size_weights", c.protocol.size_weights},
                     {"seed", c.protocol.seed}};
    j["cgm"] = {{"sample_period", c.cgm.sample_period},
                {"noise_std", c.cgm.noise_std},
                {"delay", c.cgm.delay}};
    ordered_json cohort = {{"patients", c.cohort.patients}, {"spread", c.cohort.spread},
                           {"seed", c.cohort_seed()}};
    if (!c.cohort.file.empty()) cohort["file"] = c.cohort.file;
    j["cohort"] = cohort;
    j["safety_mc"] = {{"seeds", c.safety_mc.seeds},
                      {"iterations", c.safety_mc.iterations},
                      {"seed", c.safety_mc.seed},
                      {"noise_std", c.safety_mc.noise_std},
                      {"kernel", to_json(c.safety_mc.kernel)},
                      {"safe_bo", to_json(c.safety_mc.bo)}};
    return j;
}

ordered_json to_json(const PatientParams& p) {
    return {{"p1", p.p1}, {"p2", p.p2},   {"p3", p.p3},   {"ke", p.ke}, {"ka1", p.ka1},
            {"ka2", p.ka2}, {"kg1", p.kg1}, {"kg2", p.kg2}, {"f", p.f},  {"vg", p.vg},
            {"vi", p.vi},  {"gb", p.gb},   {"basal_rate", p.basal_rate}};
}

PatientParams parse_patient_params(const json& j, const std::string& path) {
    PatientParams p;
    Fields f(j, path);
    std::size_t index = 0;
    f.count("index", index);
    f.number("p1", p.p1);
    f.number("p2", p.p2);
    f.number("p3", p.p3);
    f.number("ke", p.ke);
    f.number("ka1", p.ka1);
    f.number("ka2", p.ka2);
    f.number("kg1", p.kg1);
    f.number("kg2", p.kg2);
    f.number("f", p.f);
    f.number("vg", p.vg);
    f.number("vi", p.vi);
    f.number("gb", p.gb);
    f.number("basal_rate", p.basal_rate);
    f.finish();
    rethrow_with_prefix(path, [&] { p.validate(); return 0; });
    return p;
}

void write_cohort(std::ostream& out, const std::vector<PatientParams>& cohort) {
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        ordered_json j;
        j["index"] = i;
        const ordered_json params = to_json(cohort[i]);
        for (const auto& [k, v] : params.items()) j[k] = v;
        out << j.dump() << '\n';
    }
}

std::vector<PatientParams> read_cohort(std::istream& in) {
    std::vector<PatientParams> cohort;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string path = "cohort.line" + std::to_string(lineno);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error&) {
            throw ConfigError(path, "malformed record");
        }
        cohort.push_back(parse_patient_params(j, path));
    }
    if (cohort.empty()) throw ConfigError("cohort", "no patient records");
    return cohort;
}

} // namespace safedose
