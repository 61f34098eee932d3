#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ssdiff/exp_family.hpp"
#include "ssdiff/nnet.hpp"
#include "ssdiff/random.hpp"
#include "ssdiff/schedule.hpp"
#include "ssdiff/tail.hpp"

namespace ssdiff::engine {

using exp_family::FamilySpec;
using exp_family::Matrix;
using exp_family::Vector;
using schedule::NoiseSchedule;
using tail::TailNormalizer;

// vlb: w_t = T, so the batch mean estimates the KL sum. simple: w_t = 1.
// reweighted: explicit per-t weights (Wishart defaults to 1 / n_t).
enum class LossMode { Vlb, Simple, Reweighted };

[[nodiscard]] std::string_view to_string(LossMode mode) noexcept;
[[nodiscard]] LossMode loss_mode_from_string(std::string_view name);

struct LossSpec {
  LossMode mode = LossMode::Simple;
  std::vector<double> weights;  // weights[t - 1], reweighted mode only
};

[[nodiscard]] LossSpec make_loss(LossMode mode, const NoiseSchedule& schedule);
void validate(const LossSpec& loss, const NoiseSchedule& schedule);
[[nodiscard]] double loss_weight(const LossSpec& loss, const NoiseSchedule& schedule, int t);

// Schedule point whose KL trains the prediction made from G_t. t = 1 has no
// KL term in the bound; the t = 1 point stands in for it.
[[nodiscard]] const exp_family::SchedulePoint& kl_point(const NoiseSchedule& schedule, int t);

// Maps normalized tails (one per row) and their timesteps to predicted x0
// rows in the data domain.
using Predictor = std::function<Matrix(const Matrix& g_normalized, std::span<const int> t)>;

struct Model {
  NoiseSchedule schedule;
  TailNormalizer normalizer;
  nnet::Mlp net;
  nnet::OptimState opt;
};

[[nodiscard]] Model make_model(const NoiseSchedule& schedule, const TailNormalizer& normalizer,
                               nnet::MlpConfig mlp, const nnet::AdamConfig& adam, Rng& rng);
// Network head followed by map_to_domain. With use_ema the EMA shadow weights
// are used; the predictor holds its own copy of the network.
[[nodiscard]] Predictor net_predictor(const Model& model, bool use_ema);

// Per-row w_t * KL(q(x_{t-1}|x0) || q(x_{t-1}|x_pred)).
[[nodiscard]] Vector batch_losses(const NoiseSchedule& schedule, const LossSpec& loss,
                                  std::span<const Vector> x0, std::span<const Vector> x_pred,
                                  std::span<const int> t);

struct TrainBatch {
  Matrix g_normalized;  // rows
  std::vector<int> t;
};

// Draws t ~ U{1..T} and a fresh tail x_{t:T} for every datum.
[[nodiscard]] TrainBatch sample_train_batch(const NoiseSchedule& schedule, const TailNormalizer& normalizer,
                                            std::span<const Vector> x0, Rng& rng);

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
  bool accepted = false;
  std::vector<int> t;
  Vector per_row;
};

[[nodiscard]] StepResult train_step(Model& model, std::span<const Vector> batch, const LossSpec& loss, Rng& rng);

struct TrainOptions {
  int batch_size = 128;
  long iterations = 20'000;
  LossSpec loss;
};

// Runs iterations of train_step drawing batches with replacement. The callback
// sees every step and may return false to stop early.
long train(Model& model, std::span<const Vector> data, const TrainOptions& options, Rng& rng,
           const std::function<bool(long step, const StepResult&)>& on_step = {});

// Ancestral sampling through the tail statistic for n independent chains (rows).
[[nodiscard]] Matrix sample(const Predictor& predictor, const NoiseSchedule& schedule,
                            const TailNormalizer& normalizer, int n, Rng& rng);
// Evaluates the predictor only at eval_steps (must contain T and 1); between
// evaluations intermediate x_s are drawn from q(x_s | x0_hat) with x0_hat frozen.
[[nodiscard]] Matrix sample_reduced(const Predictor& predictor, const NoiseSchedule& schedule,
                                    const TailNormalizer& normalizer, std::span<const int> eval_steps, int n,
                                    Rng& rng);
// k evaluation steps spread uniformly over 1..T, always including T and 1.
[[nodiscard]] std::vector<int> uniform_plan(int T, int k);

enum class Reconstruction { FamilyKernel, Gaussian, CategoricalExact };

struct ElboOptions {
  int n_mc = 16;
  Reconstruction reconstruction = Reconstruction::FamilyKernel;
  double gaussian_variance = 1e-4;    // Reconstruction::Gaussian
  Eigen::VectorXd token_frequencies;  // Reconstruction::CategoricalExact
};

struct ElboResult {
  double elbo_nats = 0.0;
  double se = 0.0;
  double kl_sum = 0.0;
  double reconstruction = 0.0;
  double bits_per_dim = 0.0;  // elbo / ln 2 / (tokens for Categorical, dims otherwise), negated
};

// Monte Carlo estimate of log p(x0|x_{1:T}) - sum_{t>=2} KL_t; the x_T prior
// term is dropped.
[[nodiscard]] ElboResult elbo(const Predictor& predictor, const NoiseSchedule& schedule,
                              const TailNormalizer& normalizer, const Vector& x0, const ElboOptions& options,
                              Rng& rng);

// Gaussian family: moments of G_{t_low} given G_{t_high} and a frozen x0_hat,
// obtained by pushing the intermediate q(x_s | x0_hat) draws through the tail
// statistic. t_low = t_high - 1 is a single reverse step.
struct GaussianMoments {
  double mean = 0.0;
  double variance = 0.0;
};
[[nodiscard]] GaussianMoments gaussian_tail_transition(const NoiseSchedule& schedule, int t_high, int t_low,
                                                       double g_high, double x0_hat);

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct ScheduleSource {
  std::string kind = "default";  // default | cosine_transform | mi_match | file
  std::string path;              // file
  double nu_min = 1e-2;          // mi_match grid
  double nu_max = 1e4;
  int grid = 64;
};

struct DatasetSpec {
  std::string id;  // generator id, see analysis::make_dataset
  long n_train = 20'000;
  long n_test = 5'000;
  std::string csv_path;  // optional lat/lon CSV for vmf_sphere
};

struct ExperimentConfig {
  int version = 1;
  std::string experiment;
  FamilySpec family;
  int T = 64;
  ScheduleSource schedule;
  DatasetSpec dataset;
  nnet::MlpConfig mlp{1, 1, 256, 3, 32, true};
  nnet::AdamConfig adam;
  int batch_size = 128;
  long iterations = 20'000;
  LossMode loss = LossMode::Simple;
  int normalizer_n_mc = 4;
  bool use_ema = true;
  std::uint64_t seed = 0;
  std::string output_dir = "runs";
  int sample_count = 2'000;
  int sample_steps = 0;  // 0 = every step
  int knn_k = 5;
  int elbo_n_mc = 4;
  int elbo_points = 200;
};

void validate(const ExperimentConfig& config);
[[nodiscard]] std::string to_json(const ExperimentConfig& config);
// Parses, applies dotted `key=value` overrides, then validates.
[[nodiscard]] ExperimentConfig config_from_json(const std::string& text,
                                                std::span<const std::string> overrides = {});
[[nodiscard]] std::uint64_t config_hash(const ExperimentConfig& config);

}  // namespace ssdiff::engine
