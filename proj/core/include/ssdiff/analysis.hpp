#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ssdiff/engine.hpp"
#include "ssdiff/exp_family.hpp"
#include "ssdiff/nnet.hpp"
#include "ssdiff/random.hpp"
#include "ssdiff/schedule.hpp"
#include "ssdiff/tail.hpp"

namespace ssdiff::analysis {

using exp_family::FamilySpec;
using exp_family::Matrix;
using exp_family::Vector;
using schedule::NoiseSchedule;

// ---------------------------------------------------------------------------
// Markov gap for standard-normal data
// ---------------------------------------------------------------------------

// All quantities in nats for one schedule alpha_bar^SS_1..T (alpha_bar_0 = 1).
struct GapReport {
  int T = 0;
  double gap = 0.0;  // l_star - l_markov
  double l_star = 0.0;
  double l_markov = 0.0;
  double h_x0 = 0.0;            // H[q(x0)]
  double h_joint = 0.0;         // H[q(x_{0:T})]
  double h_xT = 0.0;            // H[q(x_T)]
  double markov_penalty = 0.0;  // 1/2 sum [1 + log(2 pi (1 - ab_{t-1} ab_t))]
  // L* recomputed from the chain rule over q(x_{t-1} | x_{t:T}); equals l_star.
  double l_star_chain = 0.0;
};

[[nodiscard]] GapReport markov_gap_gaussian(std::span<const double> alpha_bar_ss);

struct GapEstimate {
  double gap = 0.0;
  double se = 0.0;
  long n = 0;
};

// Monte Carlo estimate of E sum_t KL(q(x_{t-1} | x_{t:T}) || q(x_{t-1} | x_t)).
[[nodiscard]] GapEstimate markov_gap_mc(std::span<const double> alpha_bar_ss, long n, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Gaussian star-shaped / DDPM equivalence
// ---------------------------------------------------------------------------

struct ForwardCheck {
  int t = 0;
  double mean = 0.0;
  double variance = 0.0;
  double expected_mean = 0.0;
  double expected_variance = 0.0;
  double z_mean = 0.0;  // |mean - expected| in standard errors
  double z_variance = 0.0;
};

struct EquivalenceOptions {
  double x0 = 0.7;
  int n_pairs = 1000;      // random (x0, x0_hat, x_t) triples per t for checks (b) and (c)
  std::vector<int> check_t;  // forward-moment steps; empty = {1, T/2, T}
  std::uint64_t seed = 7;
};

struct EquivalenceReport {
  int T = 0;
  long n_mc = 0;
  std::vector<ForwardCheck> forward;
  double forward_max_z = 0.0;
  // max |L - R| / max(1, |L|) between the star-shaped KL term and the DDPM
  // posterior KL term.
  double kl_identity_max = 0.0;
  // max |engine - closed form| / max(1, |closed form|) over reverse means and variances.
  double reverse_max = 0.0;
};

[[nodiscard]] EquivalenceReport gaussian_equivalence_report(std::span<const double> alpha_bar_ddpm, long n_mc,
                                                            const EquivalenceOptions& options = {});

// ---------------------------------------------------------------------------
// kNN divergence to data
// ---------------------------------------------------------------------------

// Map from a family's domain to unconstrained Euclidean coordinates: additive
// log-ratio (Dirichlet), logit (Beta), log (Gamma), log-Cholesky (Wishart),
// stereographic projection from the antipode of the reference mean direction
// (VonMisesFisher, VonMises). Categorical has no map.
struct CoordinateMap {
  FamilySpec spec;
  Vector pole;        // VonMisesFisher: projection pole
  Matrix basis;       // VonMisesFisher: orthonormal basis of the pole's complement (columns)
  Vector mean_angle;  // VonMises: per-coordinate circular mean
};

[[nodiscard]] CoordinateMap make_coordinate_map(const FamilySpec& spec, const Matrix& reference_rows);
[[nodiscard]] Matrix to_unconstrained(const CoordinateMap& map, const Matrix& rows);

struct KlEstimate {
  double nats = 0.0;
  long n = 0;  // samples from the first argument
  long m = 0;
  int dim = 0;
  bool jittered = false;
};

// Wang-Kulkarni-Verdu k-NN estimate of KL(P || Q) from rows of p and q in R^d.
[[nodiscard]] KlEstimate knn_kl_divergence(const Matrix& p, const Matrix& q, int k,
                                           std::uint64_t jitter_seed = 0x5eed);

inline constexpr long kMinKlSamples = 1000;

// KL(data || model) after mapping both sample sets through the coordinate map
// fitted on the data. Rows outside the domain are dropped with a warning.
[[nodiscard]] KlEstimate kl_to_data(const FamilySpec& spec, const Matrix& model_samples, const Matrix& data_samples,
                                    int k);

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct MixtureComponent {
  double weight = 0.0;
  Vector center;
  std::function<double(const Vector&)> log_density;
};

struct Dataset {
  std::string id;
  FamilySpec spec;
  std::vector<Vector> train;
  std::vector<Vector> test;
  std::vector<MixtureComponent> modes;  // empty for CSV-backed data
  Eigen::VectorXd token_frequencies;    // Categorical only
};

[[nodiscard]] std::span<const std::string_view> experiment_ids() noexcept;
// Desk-scale configuration for a built-in experiment id.
[[nodiscard]] engine::ExperimentConfig preset_config(std::string_view id);

// Draws (or loads) train and test sets; the family in the config must match
// the generator's family.
[[nodiscard]] Dataset make_dataset(const engine::ExperimentConfig& config);
// Reads "lat,lon" rows in degrees (optional header) as unit vectors in R^3.
[[nodiscard]] std::vector<Vector> read_lat_lon_csv(const std::filesystem::path& path);

[[nodiscard]] Matrix stack_rows(std::span<const Vector> rows);

// Fraction of samples assigned to each mode by the largest posterior responsibility.
[[nodiscard]] std::vector<double> mode_fractions(const Dataset& data, const Matrix& samples);

// ---------------------------------------------------------------------------
// Schedules for experiments
// ---------------------------------------------------------------------------

// Estimator budget for experiment-time MI tables (far below the full regime).
[[nodiscard]] schedule::RegimeConfig desk_regime();

// I(x0; x_t) of the Gaussian star-shaped process on a Gaussian with the
// data's covariance, for the schedule transformed from cosine(T).
[[nodiscard]] std::vector<double> cosine_mi_target(const Dataset& data, int T);

struct ScheduleBuild {
  NoiseSchedule schedule;
  std::optional<schedule::MiTable> table;
};

// MI matching uses desk_regime() unless a regime is given.
[[nodiscard]] ScheduleBuild build_schedule(const engine::ExperimentConfig& config, const Dataset& data,
                                           const std::optional<schedule::RegimeConfig>& regime = {});

// ---------------------------------------------------------------------------
// Experiment driver
// ---------------------------------------------------------------------------

struct Prepared {
  Dataset data;
  ScheduleBuild schedule;
  tail::TailNormalizer normalizer;
};

[[nodiscard]] Prepared prepare(const engine::ExperimentConfig& config);

struct TrainHooks {
  // Called every step; returning false stops training.
  std::function<bool(long step, const engine::StepResult&)> on_step;
  // Called after every checkpoint_every completed steps (0 disables).
  long checkpoint_every = 0;
  std::function<void(long steps_done, const engine::Model&)> on_checkpoint;
};

[[nodiscard]] engine::Model train_model(const engine::ExperimentConfig& config, const Prepared& prepared,
                                        const TrainHooks& hooks = {}, long* steps_run = nullptr);

[[nodiscard]] nnet::Checkpoint make_checkpoint(const engine::ExperimentConfig& config, const engine::Model& model);
// Rebuilds the model; throws HashMismatch when the checkpoint was written for
// another schedule or its normalizer does not match.
[[nodiscard]] engine::Model model_from_checkpoint(const nnet::Checkpoint& ckpt, const NoiseSchedule& schedule);

// Samples with every step (sample_steps = 0) or a uniform plan of that many evaluations.
[[nodiscard]] Matrix draw_samples(const engine::ExperimentConfig& config, const engine::Model& model, int n,
                                  int sample_steps, std::uint64_t stream);

struct SampleMetrics {
  long n = 0;
  long valid = 0;
  double max_unit_norm_error = 0.0;  // VonMisesFisher
  double min_eigenvalue = 0.0;       // Wishart, over all samples
  std::vector<double> mode_fractions;
  bool kl_available = false;
  KlEstimate kl;
};

[[nodiscard]] SampleMetrics evaluate_samples(const engine::ExperimentConfig& config, const Dataset& data,
                                             const Matrix& samples);

[[nodiscard]] engine::ElboResult evaluate_elbo(const engine::ExperimentConfig& config, const Dataset& data,
                                               const engine::Model& model);

struct SyntheticResult {
  long steps = 0;
  double final_loss = 0.0;  // mean over the last 1000 accepted steps
  SampleMetrics metrics;
  engine::ElboResult elbo;
  std::string metrics_json;
  std::filesystem::path output_dir;
};

// Generates data, builds the schedule, trains, samples and evaluates. Writes
// metrics.json, samples.csv, data.csv, schedule.json, checkpoint.json and the
// plot CSV for the family into output_dir/experiment.
[[nodiscard]] SyntheticResult run_synthetic(const engine::ExperimentConfig& config, const TrainHooks& hooks = {});

// Header line stamped on every CSV output.
[[nodiscard]] std::string csv_stamp(const engine::ExperimentConfig& config);
[[nodiscard]] std::string samples_csv(const engine::ExperimentConfig& config, const Matrix& rows);
[[nodiscard]] Matrix samples_from_csv(const std::string& text, int cols);
// Histogram (or ellipse rows for Wishart, token counts for Categorical) of
// data and samples for plotting.
[[nodiscard]] std::string plot_csv(const engine::ExperimentConfig& config, const Matrix& data, const Matrix& samples);

}  // namespace ssdiff::analysis
