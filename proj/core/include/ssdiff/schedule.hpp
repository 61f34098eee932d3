#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ssdiff/exp_family.hpp"
#include "ssdiff/random.hpp"

namespace ssdiff::schedule {

using exp_family::FamilySpec;
using exp_family::Matrix;
using exp_family::SchedulePoint;
using exp_family::Vector;

enum class Provenance { AnalyticTransform, MiMatched, UserSupplied };

[[nodiscard]] std::string_view to_string(Provenance p) noexcept;

struct NoiseSchedule {
  FamilySpec spec;
  int T = 0;
  std::vector<SchedulePoint> points;  // points[t - 1]
  Provenance provenance = Provenance::UserSupplied;
  std::vector<double> mi_trace;  // per t, filled for MI-matched schedules

  [[nodiscard]] const SchedulePoint& at(int t) const;
};

void validate(const NoiseSchedule& schedule);

[[nodiscard]] std::string to_json(const NoiseSchedule& schedule);
[[nodiscard]] NoiseSchedule schedule_from_json(const std::string& text);
void save_schedule(const NoiseSchedule& schedule, const std::filesystem::path& path);
[[nodiscard]] NoiseSchedule load_schedule(const std::filesystem::path& path);
// FNV-1a over the canonical JSON form.
[[nodiscard]] std::uint64_t schedule_hash(const NoiseSchedule& schedule);

// ---------------------------------------------------------------------------
// Gaussian reference schedules
// ---------------------------------------------------------------------------

// alpha_bar_t for t = 1..T (index t - 1). Per-step betas are clipped at max_beta.
[[nodiscard]] std::vector<double> cosine_ddpm_schedule(int T, double s = 0.008,
                                                       double max_beta = 0.999);
[[nodiscard]] std::vector<double> ddpm_to_ss_gaussian(std::span<const double> alpha_bar_ddpm);
// Inverse of ddpm_to_ss_gaussian by summing odds from the tail.
[[nodiscard]] std::vector<double> ss_to_ddpm_gaussian(std::span<const double> alpha_bar_ss);
[[nodiscard]] NoiseSchedule gaussian_schedule(std::span<const double> alpha_bar_ss, int dim,
                                              Provenance provenance);

[[nodiscard]] std::vector<double> mi_gaussian_reference(std::span<const double> alpha_bar,
                                                        double data_variance);

struct GaussianMixture1D {
  std::vector<double> weights;
  std::vector<double> means;
  std::vector<double> stddevs;
};
// I(x0; sqrt(ab) x0 + sqrt(1 - ab) eps) for mixture data, by quadrature.
[[nodiscard]] double mi_gaussian_mixture_reference(double alpha_bar, const GaussianMixture1D& data);

// ---------------------------------------------------------------------------
// Mutual-information estimators
// ---------------------------------------------------------------------------

using DataSampler = std::function<Vector(Rng&)>;

struct KsgResult {
  double mi = 0.0;
  bool jittered = false;
};

// KSG estimator (variant 1, max-norm). Rows are samples.
[[nodiscard]] KsgResult mi_kraskov(const Matrix& x, const Matrix& y, int k,
                                   std::uint64_t jitter_seed = 0x6a177e5);

struct DsiviResult {
  double lower = 0.0;
  double upper = 0.0;
  double se_lower = 0.0;
  double se_upper = 0.0;
  double cond_entropy = 0.0;  // closed-form E H[x_t | x0] over the drawn x0
  int K = 0;
  long M = 0;

  [[nodiscard]] double estimate() const { return 0.5 * (lower + upper); }
};

// Sandwich bounds on I(x0; x_t) from the semi-implicit entropy bounds. Both
// bounds share samples; the conditional term is paired with each draw.
[[nodiscard]] DsiviResult mi_dsivi_bounds(const FamilySpec& spec, const SchedulePoint& point,
                                          const DataSampler& data, int K, long M, Rng& rng);

// I(x0; G_t) for a single Categorical token whose tail uses q_bars = (Q_t, ..., Q_T).
[[nodiscard]] double mi_categorical(std::span<const Matrix> q_bars,
                                    const Eigen::VectorXd& token_frequencies, long M, Rng& rng);

// ---------------------------------------------------------------------------
// Lookup tables and matching
// ---------------------------------------------------------------------------

enum class Estimator { Zero, Analytic, Kraskov, DsiviHigh, DsiviMid, ExpFit, CategoricalMc };

[[nodiscard]] std::string_view to_string(Estimator e) noexcept;
[[nodiscard]] Estimator estimator_from_string(std::string_view name);

// One-parameter path nu -> schedule parameters. nu = 0 is the stationary law.
// Gaussian/Categorical: alpha_bar = nu / (1 + nu). Beta/Dirichlet/vM/vMF: nu is
// the concentration. Gamma/Wishart: shape (dof) = base + nu, xi = base / (base + nu),
// so the tail coefficient equals nu.
struct ParamPath {
  double gamma_alpha_base = 1.0;
  double wishart_n_base = 0.0;  // 0 selects p + 1
  bool categorical_absorbing = false;
  int absorbing_token = 0;
};

[[nodiscard]] exp_family::Params params_from_nu(const FamilySpec& spec, double nu,
                                                const ParamPath& path = {});
[[nodiscard]] double nu_from_point(const FamilySpec& spec, const SchedulePoint& point,
                                   const ParamPath& path = {});

struct MiRow {
  double nu = 0.0;
  double mi = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  Estimator estimator = Estimator::Zero;
};

struct MiTable {
  FamilySpec spec;
  ParamPath path;
  std::vector<MiRow> rows;  // increasing nu
  int K_high = 0;
  int K_mid = 0;
  int K_low = 0;
  long budget = 0;
};

struct RegimeConfig {
  double high = 2.0;
  double mid = 0.5;
  double low = 0.002;
  int K_high = 1000;
  int K_mid = 100;
  int K_low = 50;
  long budget = 100'000'000;  // M = budget / K in the DSIVI regimes
  long M_low = 100'000;
  long kraskov_n = 100'000;
  int kraskov_k = 10;
  int pilot_K = 50;
  long pilot_M = 20'000;
  std::uint64_t seed = 20230217;
  // Closed-form MI for the Gaussian family with data of this variance.
  std::optional<double> analytic_gaussian_variance;
};

[[nodiscard]] std::vector<double> log_grid(double lo, double hi, int n);
// Pool-adjacent-violators fit of a non-decreasing sequence.
[[nodiscard]] std::vector<double> isotonic_increasing(std::span<const double> values);

[[nodiscard]] MiTable build_mi_table(const FamilySpec& spec, std::span<const double> nu_grid,
                                     const DataSampler& data, const RegimeConfig& config = {},
                                     const ParamPath& path = {});
// Table MI at nu by interpolation in (log nu, log MI).
[[nodiscard]] double table_mi_at(const MiTable& table, double nu);
// Inverse of table_mi_at; targets outside the table are clamped with a warning.
[[nodiscard]] double table_nu_for(const MiTable& table, double target_mi);

[[nodiscard]] NoiseSchedule match_schedule(const MiTable& table, std::span<const double> target_mi);

[[nodiscard]] std::string to_csv(const MiTable& table);
[[nodiscard]] MiTable mi_table_from_csv(const std::string& text, const FamilySpec& spec,
                                        const ParamPath& path = {});

}  // namespace ssdiff::schedule
