#pragma once

#include <array>
#include <cstddef>
#include <deque>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "safedose/gp.hpp"
#include "safedose/safe_acquisition.hpp"

namespace safedose {

enum class MealSize { S = 0, M = 1, L = 2, XL = 3 };
inline constexpr std::size_t kMealSizeCount = 4;

std::string_view to_string(MealSize size);
/// Parses "S", "M", "L", "XL"; throws ConfigError otherwise.
MealSize meal_size_from_string(std::string_view s);

struct MealAnnouncement {
    double time = 0.0;  // minutes since trial start
    MealSize size = MealSize::M;
    double cho_grams = 60.0;
};

struct Context {
    std::vector<double> features;
};

struct CgmSample {
    double t = 0.0;
    double glucose = 0.0;
};

struct Episode {
    std::size_t k = 0;  // iteration index at announcement
    double meal_time = 0.0;
    MealSize size = MealSize::M;
    double cho_grams = 0.0;
    Context context;
    double dose = 0.0;
    bool fallback_used = true;
    std::vector<CgmSample> cgm_window;
    std::optional<double> reward_obs;
    std::optional<double> constraint_obs;
    bool closed = false;
    bool discarded = false;
};

enum class ContextMode { per_category, shared };

struct AdvisorConfig {
    SafeBOConfig bo{};

    /// Lengthscales: dose first, then context features. Missing context entries are
    /// padded with the last given value.
    KernelSpec reward_kernel{KernelFamily::squared_exponential, 1.0, {0.15, 0.2}};
    KernelSpec constraint_kernel{KernelFamily::squared_exponential, 40.0, {0.125, 0.2}};
    double reward_noise_std = 2.0;       // mg/dl
    /// Covers meal-to-meal spread of the window minimum (carry-over from the
    /// previous meal, timing), not only sensor noise.
    double constraint_noise_std = 10.0;  // mg/dl
    /// Reward outputs are centered/scaled by running statistics; the constraint
    /// keeps a zero prior mean in mg/dl so an untrained surrogate reveals nothing.
    bool normalize_reward = true;
    double output_scale_floor = 1.0;
    double jitter_rel = 1e-8;

    bool refit_enabled = true;
    std::size_t refit_every = 5;
    std::size_t refit_starts = 8;
    HyperBounds reward_bounds{{0.2, 5.0}, {{0.05, 1.0}, {0.05, 1.0}}};
    HyperBounds constraint_bounds{{20.0, 80.0}, {{0.05, 0.2}, {0.1, 0.5}}};

    std::array<double, kMealSizeCount> category_grams{30.0, 60.0, 90.0, 120.0};
    double cho_max = 150.0;
    bool mealtime_context = false;
    ContextMode context_mode = ContextMode::per_category;

    double window_cap = 300.0;     // min
    double min_window = 120.0;     // min
    std::size_t min_samples = 6;
    double premeal_buffer = 60.0;  // min
    double hypo_threshold = 70.0;  // mg/dl

    std::size_t context_dim() const { return mealtime_context ? 2 : 1; }
    /// Throws ConfigError naming the offending field.
    void validate() const;
};

/// Meal-size feature cho/cho_max (clamped to 1 with a warning), plus minute-of-day/1440.
Context encode_context(const MealAnnouncement& meal, bool mealtime_enabled, double cho_max = 150.0);

/// [meal_time, min(meal_time + cap, next_meal_time)].
std::pair<double, double> window_bounds(double meal_time, std::optional<double> next_meal_time,
                                        double cap = 300.0);

struct EpisodeOutcome {
    double reward_obs = 0.0;
    double constraint_obs = 0.0;
};

struct PosteriorPoint {
    double dose = 0.0;
    double reward_mean = 0.0;
    double reward_std = 0.0;
    double constraint_lcb = 0.0;
    bool safe = false;
    double acquisition_value = 0.0;  // -inf where unsafe
};

struct PosteriorView {
    std::vector<PosteriorPoint> points;
    bool fallback = true;
    double recommended_dose = 0.0;
};

/// Per-patient bolus learner. One writer at a time; copies are independent.
class DoseAdvisor {
public:
    explicit DoseAdvisor(AdvisorConfig config);

    /// Opens an episode. Throws ProtocolError if one is already open.
    DoseDecision recommend_dose(const MealAnnouncement& meal);

    /// Throws SequencingError unless t is strictly after the previous sample.
    void ingest_cgm(double t, double glucose);

    /// Extracts reward = -max(window) and constraint = min(window) - threshold and
    /// conditions the surrogates. Returns nullopt when the window had too few samples
    /// (episode discarded). Throws ProtocolError when no episode is open or the window
    /// is shorter than min_window and the next meal has not been announced.
    std::optional<EpisodeOutcome> close_episode(double now, bool next_meal_announced = false);

    /// Grid diagnostics for a prospective meal, without opening an episode.
    PosteriorView posterior_view(const MealAnnouncement& meal) const;
    PosteriorView posterior_view(MealSize size, const Context& context) const;

    const AdvisorConfig& config() const noexcept { return config_; }
    const std::vector<Episode>& episodes() const noexcept { return episodes_; }
    const Episode* open_episode() const;
    std::size_t iteration() const noexcept { return closed_ + 1; }
    std::optional<double> last_sample_time() const { return last_t_; }
    const std::deque<CgmSample>& premeal_buffer() const noexcept { return buffer_; }

    const GaussianProcess& reward_gp(MealSize size) const { return slots_[slot(size)].reward; }
    const GaussianProcess& constraint_gp(MealSize size) const {
        return slots_[slot(size)].constraint;
    }
    /// Closed-episode count per slot.
    std::size_t observations(MealSize size) const { return slots_[slot(size)].reward.size(); }

private:
    struct Slot {
        GaussianProcess reward;
        GaussianProcess constraint;
    };

    std::size_t slot(MealSize size) const;
    Context context_for(const MealAnnouncement& meal) const;
    void check_meal(const MealAnnouncement& meal) const;

    AdvisorConfig config_;
    std::vector<Slot> slots_;
    std::array<std::optional<double>, kMealSizeCount> incumbents_{};
    std::vector<Episode> episodes_;
    std::optional<std::size_t> open_;
    std::deque<CgmSample> buffer_;
    std::optional<double> last_t_;
    std::size_t closed_ = 0;
};

/// One JSON record per line: patient_id, k, meal_time, category, cho_g, dose_U,
/// fallback_used, reward_obs, constraint_obs (null when not observed).
void write_episode_log(std::ostream& out, std::string_view patient_id,
                       const std::vector<Episode>& episodes);

} // namespace safedose
