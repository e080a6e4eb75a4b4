#include "safedose/dose_advisor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <spdlog/spdlog.h>

#include "json.hpp"
#include "safedose/errors.hpp"

namespace safedose {

namespace {

KernelSpec pad_kernel(KernelSpec k, std::size_t dim, const char* field) {
    if (k.lengthscales.empty()) throw ConfigError(field, "at least one lengthscale required");
    if (k.lengthscales.size() > dim)
        throw ConfigError(field, "expected at most " + std::to_string(dim) + " lengthscales");
    while (k.lengthscales.size() < dim) k.lengthscales.push_back(k.lengthscales.back());
    return k;
}

HyperBounds pad_bounds(HyperBounds b, std::size_t dim, const char* field) {
    if (b.lengthscales.empty()) throw ConfigError(field, "at least one interval required");
    if (b.lengthscales.size() > dim)
        throw ConfigError(field, "expected at most " + std::to_string(dim) + " intervals");
    while (b.lengthscales.size() < dim) b.lengthscales.push_back(b.lengthscales.back());
    return b;
}

} // namespace

std::string_view to_string(MealSize size) {
    switch (size) {
    case MealSize::S: return "S";
    case MealSize::M: return "M";
    case MealSize::L: return "L";
    case MealSize::XL: return "XL";
    }
    return "?";
}

MealSize meal_size_from_string(std::string_view s) {
    if (s == "S") return MealSize::S;
    if (s == "M") return MealSize::M;
    if (s == "L") return MealSize::L;
    if (s == "XL") return MealSize::XL;
    throw ConfigError("size_category", "expected one of S, M, L, XL; got '" + std::string(s) + "'");
}

void AdvisorConfig::validate() const {
    try {
        bo.validate();
    } catch (const ConfigError& e) {
        throw ConfigError("safe_bo." + e.field(), e.message());
    }
    const std::size_t dim = 1 + context_dim();
    try {
        pad_kernel(reward_kernel, dim, "lengthscales").validate();
    } catch (const ConfigError& e) {
        throw ConfigError("advisor.reward_kernel." + e.field(), e.message());
    }
    try {
        pad_kernel(constraint_kernel, dim, "lengthscales").validate();
    } catch (const ConfigError& e) {
        throw ConfigError("advisor.constraint_kernel." + e.field(), e.message());
    }
    pad_bounds(reward_bounds, dim, "advisor.reward_bounds.lengthscales");
    pad_bounds(constraint_bounds, dim, "advisor.constraint_bounds.lengthscales");
    if (!(reward_noise_std >= 0.0)) throw ConfigError("advisor.reward_noise_std", "must be >= 0");
    if (!(constraint_noise_std >= 0.0))
        throw ConfigError("advisor.constraint_noise_std", "must be >= 0");
    if (!(output_scale_floor > 0.0))
        throw ConfigError("advisor.output_scale_floor", "must be > 0");
    if (!(jitter_rel >= 0.0)) throw ConfigError("advisor.jitter_rel", "must be >= 0");
    if (refit_enabled && refit_every == 0) throw ConfigError("advisor.refit_every", "must be >= 1");
    for (std::size_t i = 0; i < kMealSizeCount; ++i) {
        if (!(category_grams[i] > 0.0))
            throw ConfigError("advisor.category_grams[" + std::to_string(i) + "]", "must be > 0");
        if (i > 0 && !(category_grams[i] > category_grams[i - 1]))
            throw ConfigError("advisor.category_grams[" + std::to_string(i) + "]",
                              "must be strictly ascending");
    }
    if (!(cho_max > 0.0)) throw ConfigError("advisor.cho_max", "must be > 0");
    if (!(window_cap > 0.0)) throw ConfigError("advisor.window_cap", "must be > 0");
    if (!(min_window >= 0.0 && min_window <= window_cap))
        throw ConfigError("advisor.min_window", "must lie in [0, window_cap]");
    if (min_samples < 1) throw ConfigError("advisor.min_samples", "must be >= 1");
    if (!(premeal_buffer >= 0.0)) throw ConfigError("advisor.premeal_buffer", "must be >= 0");
}

Context encode_context(const MealAnnouncement& meal, bool mealtime_enabled, double cho_max) {
    if (!(meal.cho_grams > 0.0)) throw PreconditionError("cho_grams must be > 0");
    if (!(meal.time >= 0.0)) throw PreconditionError("meal time must be >= 0");
    Context c;
    double size = meal.cho_grams / cho_max;
    if (size > 1.0) {
        spdlog::warn("meal of {} g exceeds the {} g context ceiling; clamped to 1.0",
                     meal.cho_grams, cho_max);
        size = 1.0;
    }
    c.features.push_back(size);
    if (mealtime_enabled) c.features.push_back(std::fmod(meal.time, 1440.0) / 1440.0);
    return c;
}

std::pair<double, double> window_bounds(double meal_time, std::optional<double> next_meal_time,
                                        double cap) {
    if (next_meal_time && !(*next_meal_time > meal_time))
        throw PreconditionError("next meal must come after the current meal");
    double end = meal_time + cap;
    if (next_meal_time) end = std::min(end, *next_meal_time);
    return {meal_time, end};
}

DoseAdvisor::DoseAdvisor(AdvisorConfig config) : config_(std::move(config)) {
    config_.validate();
    const std::size_t dim = 1 + config_.context_dim();
    config_.reward_kernel = pad_kernel(config_.reward_kernel, dim, "reward_kernel");
    config_.constraint_kernel = pad_kernel(config_.constraint_kernel, dim, "constraint_kernel");
    config_.reward_bounds = pad_bounds(config_.reward_bounds, dim, "reward_bounds");
    config_.constraint_bounds = pad_bounds(config_.constraint_bounds, dim, "constraint_bounds");

    GpOptions base;
    base.dose_lo = config_.bo.dose_grid.front();
    base.dose_hi = config_.bo.dose_grid.back();
    if (!(base.dose_hi > base.dose_lo)) base.dose_hi = base.dose_lo + 1.0;
    base.context_dim = config_.context_dim();
    base.jitter_rel = config_.jitter_rel;
    base.output_scale_floor = config_.output_scale_floor;

    GpOptions reward_opts = base;
    reward_opts.normalize_output = config_.normalize_reward;
    GpOptions constraint_opts = base;
    constraint_opts.normalize_output = false;
    constraint_opts.prior_mean = 0.0;

    const std::size_t n_slots =
        config_.context_mode == ContextMode::per_category ? kMealSizeCount : 1;
    for (std::size_t i = 0; i < n_slots; ++i)
        slots_.push_back({GaussianProcess(config_.reward_kernel, reward_opts),
                          GaussianProcess(config_.constraint_kernel, constraint_opts)});
}

std::size_t DoseAdvisor::slot(MealSize size) const {
    return config_.context_mode == ContextMode::per_category ? static_cast<std::size_t>(size) : 0;
}

Context DoseAdvisor::context_for(const MealAnnouncement& meal) const {
    return encode_context(meal, config_.mealtime_context, config_.cho_max);
}

void DoseAdvisor::check_meal(const MealAnnouncement& meal) const {
    if (!(meal.time >= 0.0)) throw PreconditionError("meal time must be >= 0");
    if (!(meal.cho_grams > 0.0)) throw PreconditionError("cho_grams must be > 0");
    // The announced grams must fall in the category's band: halfway to each neighbour.
    const auto idx = static_cast<std::size_t>(meal.size);
    const auto& g = config_.category_grams;
    const double lo = idx == 0 ? 0.0 : 0.5 * (g[idx - 1] + g[idx]);
    const double hi = idx + 1 == kMealSizeCount ? std::numeric_limits<double>::infinity() : 0.5 * (g[idx] + g[idx + 1]);
    if (meal.cho_grams < lo || meal.cho_grams >= hi)
        throw PreconditionError(std::to_string(meal.cho_grams) + " g is inconsistent with category " +
                                std::string(to_string(meal.size)));
}

const Episode* DoseAdvisor::open_episode() const {
    return open_ ? &episodes_[*open_] : nullptr;
}

DoseDecision DoseAdvisor::recommend_dose(const MealAnnouncement& meal) {
    if (open_)
        throw ProtocolError("an episode is already open (meal at t=" +
                            std::to_string(episodes_[*open_].meal_time) + "); close it first");
    check_meal(meal);
    const Context ctx = context_for(meal);
    const Slot& s = slots_[slot(meal.size)];
    DoseDecision decision =
        select_dose(s.reward, std::span<const GaussianProcess>(&s.constraint, 1), ctx.features,
                    config_.bo, iteration(), incumbents_[static_cast<std::size_t>(meal.size)]);

    Episode ep;
    ep.k = iteration();
    ep.meal_time = meal.time;
    ep.size = meal.size;
    ep.cho_grams = meal.cho_grams;
    ep.context = ctx;
    ep.dose = decision.dose;
    ep.fallback_used = decision.fallback_used;
    episodes_.push_back(std::move(ep));
    open_ = episodes_.size() - 1;
    return decision;
}

void DoseAdvisor::ingest_cgm(double t, double glucose) {
    if (!std::isfinite(t) || !std::isfinite(glucose))
        throw PreconditionError("CGM sample must be finite");
    if (last_t_ && !(t > *last_t_))
        throw SequencingError("CGM sample at t=" + std::to_string(t) +
                              " does not follow the previous sample at t=" +
                              std::to_string(*last_t_));
    last_t_ = t;
    const CgmSample sample{t, std::clamp(glucose, 20.0, 600.0)};
    if (open_) {
        Episode& ep = episodes_[*open_];
        if (t >= ep.meal_time && t <= ep.meal_time + config_.window_cap) {
            ep.cgm_window.push_back(sample);
            return;
        }
    }
    buffer_.push_back(sample);
    while (!buffer_.empty() && buffer_.front().t < t - config_.premeal_buffer) buffer_.pop_front();
}

std::optional<EpisodeOutcome> DoseAdvisor::close_episode(double now, bool next_meal_announced) {
    if (!open_) throw ProtocolError("no open episode to close");
    Episode& ep = episodes_[*open_];
    if (!next_meal_announced && now < ep.meal_time + config_.min_window)
        throw ProtocolError("postprandial window still open: " +
                            std::to_string(now - ep.meal_time) + " of " +
                            std::to_string(config_.min_window) + " minutes elapsed");
    open_.reset();
    ep.closed = true;
    if (ep.cgm_window.size() < config_.min_samples) {
        spdlog::warn("episode at t={} discarded: {} CGM samples (need {})", ep.meal_time,
                     ep.cgm_window.size(), config_.min_samples);
        ep.discarded = true;
        return std::nullopt;
    }

    double peak = ep.cgm_window.front().glucose;
    double trough = peak;
    for (const auto& s : ep.cgm_window) {
        peak = std::max(peak, s.glucose);
        trough = std::min(trough, s.glucose);
    }
    const EpisodeOutcome out{-peak, trough - config_.hypo_threshold};
    ep.reward_obs = out.reward_obs;
    ep.constraint_obs = out.constraint_obs;

    Slot& s = slots_[slot(ep.size)];
    const InputPoint x{ep.dose, ep.context.features};
    s.reward = s.reward.condition({x, out.reward_obs, config_.reward_noise_std});
    s.constraint = s.constraint.condition({x, out.constraint_obs, config_.constraint_noise_std});
    auto& inc = incumbents_[static_cast<std::size_t>(ep.size)];
    inc = inc ? std::max(*inc, out.reward_obs) : out.reward_obs;
    ++closed_;

    if (config_.refit_enabled && s.reward.size() % config_.refit_every == 0) {
        s.reward = s.reward.with_kernel(
            fit_hyperparameters(s.reward, config_.reward_bounds, config_.refit_starts));
        s.constraint = s.constraint.with_kernel(
            fit_hyperparameters(s.constraint, config_.constraint_bounds, config_.refit_starts));
    }
    return out;
}

PosteriorView DoseAdvisor::posterior_view(const MealAnnouncement& meal) const {
    check_meal(meal);
    return posterior_view(meal.size, context_for(meal));
}

PosteriorView DoseAdvisor::posterior_view(MealSize size, const Context& context) const {
    const Slot& s = slots_[slot(size)];
    const std::span<const GaussianProcess> constraints(&s.constraint, 1);
    const std::size_t k = iteration();
    const SafeRegionView region = reveal_safe_region(constraints, context.features, config_.bo, k);
    const DoseDecision decision = select_dose(s.reward, constraints, context.features, config_.bo,
                                              k, incumbents_[static_cast<std::size_t>(size)]);
    PosteriorView view;
    view.fallback = decision.fallback_used;
    view.recommended_dose = decision.dose;
    const auto& grid = config_.bo.dose_grid;
    view.points.reserve(grid.size());
    for (std::size_t j = 0; j < grid.size(); ++j) {
        const Posterior r = s.reward.posterior({grid[j], context.features});
        view.points.push_back({grid[j], r.mean, r.std, region.lcb_values[0][j],
                               static_cast<bool>(region.safe_mask[j]),
                               decision.acquisition_trace[j]});
    }
    return view;
}

void write_episode_log(std::ostream& out, std::string_view patient_id,
                       const std::vector<Episode>& episodes) {
    for (const auto& ep : episodes) {
        nlohmann::ordered_json j;
        j["patient_id"] = patient_id;
        j["k"] = ep.k;
        j["meal_time"] = ep.meal_time;
        j["category"] = to_string(ep.size);
        j["cho_g"] = ep.cho_grams;
        j["dose_U"] = ep.dose;
        j["fallback_used"] = ep.fallback_used;
        j["reward_obs"] = ep.reward_obs ? nlohmann::ordered_json(*ep.reward_obs) : nullptr;
        j["constraint_obs"] =
            ep.constraint_obs ? nlohmann::ordered_json(*ep.constraint_obs) : nullptr;
        out << j.dump() << '\n';
    }
}

} // namespace safedose
