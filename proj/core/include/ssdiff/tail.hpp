#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ssdiff/exp_family.hpp"
#include "ssdiff/random.hpp"
#include "ssdiff/schedule.hpp"

namespace ssdiff::tail {

using exp_family::FamilySpec;
using exp_family::Matrix;
using exp_family::Vector;
using schedule::NoiseSchedule;

// G_t for the realized tail x_t..x_T. `raw` is the plain sum of A_s T(x_s);
// `g` equals raw except for the Gaussian family, where it carries the
// DDPM-equivalent rescaling (1 - ab_t) / sqrt(ab_t) with ab_t the DDPM
// cumulative product implied by the schedule.
struct TailState {
  int t = 0;
  Vector raw;
  Vector g;
  std::uint64_t schedule_hash = 0;  // 0 when the caller did not stamp it
};

// A_t T(x_t) for a single step. Categorical blocks hold log q_bar(i, x_t) for
// each candidate x0 = i.
[[nodiscard]] Vector tail_term(const FamilySpec& spec, const exp_family::SchedulePoint& point,
                               const Vector& x);

// Multiplier applied to `raw` at step t (1 except for the Gaussian family).
[[nodiscard]] double tail_scale(const NoiseSchedule& schedule, int t);

// x_tail[0] is x_t, x_tail.back() is x_T.
[[nodiscard]] TailState tail_statistic(const NoiseSchedule& schedule, std::span<const Vector> x_tail);
[[nodiscard]] TailState tail_update(const NoiseSchedule& schedule, const TailState& state,
                                    const Vector& x_prev);

// Draws x_1..x_T from q(x_t | x0) and returns G_t for every t (index t - 1).
[[nodiscard]] std::vector<Vector> sample_all_tails(const NoiseSchedule& schedule, const Vector& x0,
                                                   Rng& rng);

enum class NormalizeMode { ZScore, MatchTOfX0, Softmax };

[[nodiscard]] std::string_view to_string(NormalizeMode mode) noexcept;
[[nodiscard]] NormalizeMode normalize_mode_from_string(std::string_view name);
// Softmax for Categorical, z-score otherwise.
[[nodiscard]] NormalizeMode default_mode(const FamilySpec& spec) noexcept;

inline constexpr double kStdFloor = 1e-8;

struct TailNormalizer {
  FamilySpec spec;
  int T = 0;
  std::uint64_t schedule_hash = 0;
  int n_mc = 0;
  std::vector<Vector> mean;  // mean[t - 1]
  std::vector<Vector> std;   // std[t - 1], floored at kStdFloor
  Vector target_mean;        // of T(x0) over the dataset
  Vector target_std;
};

[[nodiscard]] TailNormalizer fit_tail_normalizer(const NoiseSchedule& schedule,
                                                 std::span<const Vector> dataset, int n_mc, Rng& rng);

[[nodiscard]] Vector normalize_tail(const TailState& state, const TailNormalizer& normalizer,
                                    NormalizeMode mode);
// Network input: normalize_tail with the family's default mode.
[[nodiscard]] Vector normalize_for_model(const TailState& state, const TailNormalizer& normalizer);

// Visualization map through the inverse statistic. Categorical is unsupported.
[[nodiscard]] Vector tail_to_domain(const FamilySpec& spec, const Vector& normalized_g);

[[nodiscard]] std::string to_json(const TailNormalizer& normalizer);
[[nodiscard]] TailNormalizer normalizer_from_json(const std::string& text);
// Throws HashMismatch when the normalizer was fitted on another schedule.
void check_compatible(const TailNormalizer& normalizer, const NoiseSchedule& schedule);

struct SufficiencyReport {
  double max_discrepancy = 0.0;     // worst over both checks below
  double max_group_discrepancy = 0.0;  // tails sharing a quantized G_t
  double max_g_only_discrepancy = 0.0;  // enumeration vs posterior from G_t alone
  long tails = 0;
  long groups = 0;
};

inline constexpr long kSufficiencyCap = 1'000'000;

// Exhaustive check that q(x_{t-1} | x_{t:T}) depends on the tail only through
// G_t, for one Categorical token with transitions q_bars[t - 1] = Q_t and
// data law p(x0). Covers every t in 1..T (t = 1 compares posteriors of x0).
[[nodiscard]] SufficiencyReport verify_sufficiency(std::span<const Matrix> q_bars,
                                                   const Eigen::VectorXd& data_law);

}  // namespace ssdiff::tail
