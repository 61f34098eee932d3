#include "ssdiff/engine.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include <fmt/format.h>
#include <json.hpp>

#include "ssdiff/error.hpp"
#include "ssdiff/io.hpp"
#include "ssdiff/log.hpp"

namespace ssdiff::engine {

using exp_family::FamilyId;
using nlohmann::json;

namespace {

Vector row_of(const Matrix& m, Eigen::Index i) { return m.row(i).transpose(); }

Vector log_softmax_pick(const Vector& g, const Eigen::VectorXd& log_freq, int offset, int d, int pick) {
  Vector a(d);
  for (int i = 0; i < d; ++i) a[i] = g[offset + i] + log_freq[i];
  const double m = a.maxCoeff();
  double s = 0.0;
  for (int i = 0; i < d; ++i) s += std::isfinite(a[i]) ? std::exp(a[i] - m) : 0.0;
  Vector out(1);
  out[0] = a[pick] - m - std::log(s);
  return out;
}

int token_at(const Vector& x, int offset, int d) {
  Eigen::Index k = 0;
  x.segment(offset, d).maxCoeff(&k);
  return static_cast<int>(k);
}

// Tail states advanced one step for every chain; rows of x are the new x_{t-1}.
void advance(const NoiseSchedule& schedule, std::vector<tail::TailState>& states, const Matrix& x) {
  for (std::size_t i = 0; i < states.size(); ++i) {
    states[i] = tail::tail_update(schedule, states[i], row_of(x, static_cast<Eigen::Index>(i)));
  }
}

Matrix normalized_rows(const std::vector<tail::TailState>& states, const TailNormalizer& nz) {
  Matrix g(static_cast<Eigen::Index>(states.size()), exp_family::stat_size(nz.spec));
  for (std::size_t i = 0; i < states.size(); ++i) {
    g.row(static_cast<Eigen::Index>(i)) = tail::normalize_for_model(states[i], nz).transpose();
  }
  return g;
}

Matrix predict_checked(const Predictor& predictor, const Matrix& g, std::span<const int> t, Eigen::Index cols) {
  Matrix out = predictor(g, t);
  if (out.rows() != g.rows() || out.cols() != cols) {
    throw Error(ErrorCode::Shape, fmt::format("predictor returned {}x{}, expected {}x{}", out.rows(), out.cols(),
                                              g.rows(), cols));
  }
  return out;
}

Matrix draw_rows(const FamilySpec& spec, const Matrix& x0_hat, const exp_family::SchedulePoint& point, Rng& rng) {
  Matrix out(x0_hat.rows(), exp_family::point_size(spec));
  for (Eigen::Index i = 0; i < x0_hat.rows(); ++i) {
    out.row(i) = exp_family::sample_forward(spec, row_of(x0_hat, i), point, rng).transpose();
  }
  return out;
}

std::vector<tail::TailState> initial_states(const NoiseSchedule& schedule, int n, Rng& rng, Matrix& x_T) {
  const FamilySpec& spec = schedule.spec;
  x_T.resize(n, exp_family::point_size(spec));
  std::vector<tail::TailState> states;
  states.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const Vector x = exp_family::sample_stationary(spec, schedule.at(schedule.T), rng);
    x_T.row(i) = x.transpose();
    states.push_back(tail::tail_statistic(schedule, std::span<const Vector>(&x, 1)));
  }
  return states;
}

}  // namespace

std::string_view to_string(LossMode mode) noexcept {
  switch (mode) {
    case LossMode::Vlb: return "vlb";
    case LossMode::Simple: return "simple";
    case LossMode::Reweighted: return "reweighted";
  }
  return "unknown";
}

LossMode loss_mode_from_string(std::string_view name) {
  for (LossMode m : {LossMode::Vlb, LossMode::Simple, LossMode::Reweighted}) {
    if (to_string(m) == name) return m;
  }
  throw Error(ErrorCode::Config, fmt::format("unknown loss mode '{}'", name));
}

LossSpec make_loss(LossMode mode, const NoiseSchedule& schedule) {
  LossSpec loss{mode, {}};
  if (mode == LossMode::Reweighted) {
    loss.weights.assign(static_cast<std::size_t>(schedule.T), 1.0);
    if (schedule.spec.id == FamilyId::Wishart) {
      for (int t = 1; t <= schedule.T; ++t) loss.weights[t - 1] = 1.0 / exp_family::wishart(kl_point(schedule, t)).n;
    }
  }
  return loss;
}

void validate(const LossSpec& loss, const NoiseSchedule& schedule) {
  if (loss.mode != LossMode::Reweighted) return;
  if (static_cast<int>(loss.weights.size()) != schedule.T) {
    throw Error(ErrorCode::Config, fmt::format("loss has {} weights for T = {}", loss.weights.size(), schedule.T));
  }
  for (double w : loss.weights) {
    if (!(w > 0.0) || !std::isfinite(w)) throw Error(ErrorCode::Config, "loss weights must be positive and finite");
  }
}

double loss_weight(const LossSpec& loss, const NoiseSchedule& schedule, int t) {
  switch (loss.mode) {
    case LossMode::Vlb: return static_cast<double>(schedule.T);
    case LossMode::Simple: return 1.0;
    case LossMode::Reweighted: return loss.weights.at(static_cast<std::size_t>(t - 1));
  }
  return 1.0;
}

const exp_family::SchedulePoint& kl_point(const NoiseSchedule& schedule, int t) {
  return schedule.at(std::max(t - 1, 1));
}

Model make_model(const NoiseSchedule& schedule, const TailNormalizer& normalizer, nnet::MlpConfig mlp,
                 const nnet::AdamConfig& adam, Rng& rng) {
  tail::check_compatible(normalizer, schedule);
  mlp.input_dim = exp_family::stat_size(schedule.spec);
  mlp.output_dim = exp_family::raw_size(schedule.spec);
  Model m{schedule, normalizer, nnet::Mlp(mlp, rng), {}};
  // The zero output layer would leave two heads degenerate: a zero direction
  // for vMF and a zero Cholesky factor (whose gradient vanishes) for Wishart.
  nnet::Parameter& bias = m.net.params().back();
  if (schedule.spec.id == FamilyId::VonMisesFisher) {
    bias.value.setConstant(1.0 / std::sqrt(static_cast<double>(mlp.output_dim)));
  } else if (schedule.spec.id == FamilyId::Wishart) {
    int k = 0;
    for (int i = 0; i < schedule.spec.dim; ++i) {
      for (int j = 0; j <= i; ++j, ++k) bias.value(0, k) = i == j ? 1.0 : 0.0;
    }
  }
  m.opt = nnet::make_optimizer(m.net.params(), adam);
  return m;
}

Predictor net_predictor(const Model& model, bool use_ema) {
  auto net = std::make_shared<nnet::Mlp>(model.net);
  if (use_ema) nnet::load_ema(model.opt, net->params());
  const FamilySpec spec = model.schedule.spec;
  const int T = model.schedule.T;
  return [net, spec, T](const Matrix& g, std::span<const int> t) {
    const Matrix raw = net->predict(g, nnet::time_embedding(t, T, net->config().time_dim));
    Matrix out(raw.rows(), exp_family::point_size(spec));
    for (Eigen::Index i = 0; i < raw.rows(); ++i) out.row(i) = exp_family::map_to_domain(spec, row_of(raw, i)).transpose();
    return out;
  };
}

Vector batch_losses(const NoiseSchedule& schedule, const LossSpec& loss, std::span<const Vector> x0,
                    std::span<const Vector> x_pred, std::span<const int> t) {
  if (x0.size() != x_pred.size() || x0.size() != t.size()) throw Error(ErrorCode::Shape, "batch sizes differ");
  Vector out(static_cast<Eigen::Index>(x0.size()));
  for (std::size_t i = 0; i < x0.size(); ++i) {
    out[static_cast<Eigen::Index>(i)] =
        loss_weight(loss, schedule, t[i]) * exp_family::kl_step(schedule.spec, x0[i], x_pred[i], kl_point(schedule, t[i]));
  }
  return out;
}

TrainBatch sample_train_batch(const NoiseSchedule& schedule, const TailNormalizer& normalizer,
                              std::span<const Vector> x0, Rng& rng) {
  TrainBatch b;
  b.g_normalized.resize(static_cast<Eigen::Index>(x0.size()), exp_family::stat_size(schedule.spec));
  b.t.resize(x0.size());
  std::uniform_int_distribution<int> pick_t(1, schedule.T);
  std::vector<Vector> tail;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const int t = pick_t(rng);
    tail.clear();
    for (int s = t; s <= schedule.T; ++s) tail.push_back(exp_family::sample_forward(schedule.spec, x0[i], schedule.at(s), rng));
    const tail::TailState st = tail::tail_statistic(schedule, tail);
    b.g_normalized.row(static_cast<Eigen::Index>(i)) = tail::normalize_for_model(st, normalizer).transpose();
    b.t[i] = t;
  }
  return b;
}

StepResult train_step(Model& model, std::span<const Vector> batch, const LossSpec& loss, Rng& rng) {
  const NoiseSchedule& schedule = model.schedule;
  const FamilySpec& spec = schedule.spec;
  StepResult res;
  const TrainBatch tb = sample_train_batch(schedule, model.normalizer, batch, rng);
  res.t = tb.t;
  const auto n = static_cast<Eigen::Index>(batch.size());

  nnet::Tape tape;
  model.net.zero_grad();
  nnet::Tape::Id out;
  try {
    out = model.net.forward(tape, tb.g_normalized, nnet::time_embedding(tb.t, schedule.T, model.net.config().time_dim));
  } catch (const Error& e) {
    if (e.code() != ErrorCode::NumericalOverflow) throw;
    log::warn(fmt::format("step {} rejected: {}", model.opt.step, e.what()));
    return res;
  }
  const Matrix raw = tape.value(out);
  std::vector<Vector> x_hat(static_cast<std::size_t>(n));
  Matrix losses(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    x_hat[i] = exp_family::map_to_domain(spec, row_of(raw, i));
    const int t = tb.t[i];
    losses(i, 0) = loss_weight(loss, schedule, t) * exp_family::kl_step(spec, batch[i], x_hat[i], kl_point(schedule, t));
    if (!std::isfinite(losses(i, 0))) {
      log::warn(fmt::format("step {} rejected: non-finite loss at t={} for datum {}", model.opt.step, t, i));
      res.per_row = losses.col(0);
      return res;
    }
  }
  res.per_row = losses.col(0);
  res.loss = losses.mean();
  const auto vjp = [&](const Matrix& up) {
    Matrix g(n, raw.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      const int t = tb.t[i];
      const Vector dk = exp_family::kl_grad_pred(spec, batch[i], x_hat[i], kl_point(schedule, t));
      g.row(i) = (up(i, 0) * loss_weight(loss, schedule, t) * exp_family::map_to_domain_vjp(spec, row_of(raw, i), dk)).transpose();
    }
    return g;
  };
  const nnet::Tape::Id l = tape.mean(tape.custom(out, losses, vjp, "kl_head"));
  tape.backward(l);
  res.grad_norm = nnet::clip_gradients(model.net.params(), model.opt.config.clip_norm);
  res.accepted = nnet::adam_step(model.opt, model.net.params());
  if (!res.accepted) {
    log::warn(fmt::format("step {} rejected: non-finite gradient", model.opt.step));
    return res;
  }
  nnet::ema_update(model.opt, model.net.params());
  return res;
}

long train(Model& model, std::span<const Vector> data, const TrainOptions& options, Rng& rng,
           const std::function<bool(long, const StepResult&)>& on_step) {
  if (data.empty()) throw Error(ErrorCode::InvalidInput, "training set is empty");
  if (options.batch_size < 1) throw Error(ErrorCode::Config, "batch_size must be >= 1");
  validate(options.loss, model.schedule);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::vector<Vector> batch(static_cast<std::size_t>(options.batch_size));
  long done = 0;
  for (; done < options.iterations; ++done) {
    for (Vector& x : batch) x = data[pick(rng)];
    const StepResult r = train_step(model, batch, options.loss, rng);
    if (on_step && !on_step(done, r)) {
      ++done;
      break;
    }
  }
  return done;
}

Matrix sample(const Predictor& predictor, const NoiseSchedule& schedule, const TailNormalizer& normalizer, int n,
              Rng& rng) {
  if (n < 1) throw Error(ErrorCode::InvalidInput, "sample count must be >= 1");
  const FamilySpec& spec = schedule.spec;
  const int cols = exp_family::point_size(spec);
  Matrix x;
  std::vector<tail::TailState> states = initial_states(schedule, n, rng, x);
  std::vector<int> ts(static_cast<std::size_t>(n));
  for (int t = schedule.T; t >= 2; --t) {
    std::fill(ts.begin(), ts.end(), t);
    const Matrix x0_hat = predict_checked(predictor, normalized_rows(states, normalizer), ts, cols);
    x = draw_rows(spec, x0_hat, schedule.at(t - 1), rng);
    advance(schedule, states, x);
  }
  std::fill(ts.begin(), ts.end(), 1);
  return predict_checked(predictor, normalized_rows(states, normalizer), ts, cols);
}

Matrix sample_reduced(const Predictor& predictor, const NoiseSchedule& schedule, const TailNormalizer& normalizer,
                      std::span<const int> eval_steps, int n, Rng& rng) {
  if (n < 1) throw Error(ErrorCode::InvalidInput, "sample count must be >= 1");
  std::vector<int> plan(eval_steps.begin(), eval_steps.end());
  std::sort(plan.begin(), plan.end(), std::greater<>());
  plan.erase(std::unique(plan.begin(), plan.end()), plan.end());
  if (plan.empty() || plan.front() != schedule.T) throw Error(ErrorCode::InvalidPlan, "evaluation plan must include T");
  if (plan.back() != 1) throw Error(ErrorCode::InvalidPlan, "evaluation plan must include t = 1");
  if (plan.back() < 1 || plan.front() > schedule.T) throw Error(ErrorCode::InvalidPlan, "evaluation plan leaves 1..T");

  const FamilySpec& spec = schedule.spec;
  const int cols = exp_family::point_size(spec);
  Matrix x;
  std::vector<tail::TailState> states = initial_states(schedule, n, rng, x);
  std::vector<int> ts(static_cast<std::size_t>(n));
  for (std::size_t k = 0; k + 1 < plan.size(); ++k) {
    const int t_high = plan[k];
    const int t_low = plan[k + 1];
    std::fill(ts.begin(), ts.end(), t_high);
    const Matrix x0_hat = predict_checked(predictor, normalized_rows(states, normalizer), ts, cols);
    for (int s = t_high - 1; s >= t_low; --s) {
      x = draw_rows(spec, x0_hat, schedule.at(s), rng);
      advance(schedule, states, x);
    }
  }
  std::fill(ts.begin(), ts.end(), 1);
  return predict_checked(predictor, normalized_rows(states, normalizer), ts, cols);
}

std::vector<int> uniform_plan(int T, int k) {
  if (T < 1 || k < 2) throw Error(ErrorCode::InvalidPlan, "a plan needs T >= 1 and at least two steps");
  std::vector<int> plan;
  for (int i = 0; i < k; ++i) {
    plan.push_back(static_cast<int>(std::lround(T - static_cast<double>(T - 1) * i / (k - 1))));
  }
  plan.erase(std::unique(plan.begin(), plan.end()), plan.end());
  return plan;
}

ElboResult elbo(const Predictor& predictor, const NoiseSchedule& schedule, const TailNormalizer& normalizer,
                const Vector& x0, const ElboOptions& options, Rng& rng) {
  if (options.n_mc < 1) throw Error(ErrorCode::InvalidInput, "n_mc must be >= 1");
  const FamilySpec& spec = schedule.spec;
  exp_family::require_domain(spec, x0, "x0");
  const int T = schedule.T;
  const int cols = exp_family::point_size(spec);
  Eigen::VectorXd log_freq;
  if (options.reconstruction == Reconstruction::CategoricalExact) {
    if (spec.id != FamilyId::Categorical || options.token_frequencies.size() != spec.dim) {
      throw Error(ErrorCode::InvalidInput, "exact reconstruction needs a Categorical family and D token frequencies");
    }
    log_freq = options.token_frequencies.array().log();
  }
  if (options.reconstruction == Reconstruction::Gaussian && !(options.gaussian_variance > 0.0)) {
    throw Error(ErrorCode::InvalidInput, "gaussian reconstruction variance must be positive");
  }

  std::vector<int> ts(static_cast<std::size_t>(T));
  for (int t = 1; t <= T; ++t) ts[t - 1] = t;
  std::vector<double> values, kls, recs;
  for (int m = 0; m < options.n_mc; ++m) {
    std::vector<Vector> tails = tail::sample_all_tails(schedule, x0, rng);
    Matrix g(T, exp_family::stat_size(spec));
    for (int t = 1; t <= T; ++t) {
      tail::TailState st{t, tails[t - 1], tails[t - 1], 0};
      g.row(t - 1) = tail::normalize_for_model(st, normalizer).transpose();
    }
    const Matrix x_hat = predict_checked(predictor, g, ts, cols);
    double kl = 0.0;
    for (int t = 2; t <= T; ++t) kl += exp_family::kl_step(spec, x0, row_of(x_hat, t - 1), schedule.at(t - 1));
    double rec = 0.0;
    const Vector x1_hat = row_of(x_hat, 0);
    switch (options.reconstruction) {
      case Reconstruction::FamilyKernel: rec = exp_family::log_pdf(spec, x0, x1_hat, schedule.at(1)); break;
      case Reconstruction::Gaussian: {
        const double v = options.gaussian_variance;
        rec = -0.5 * cols * std::log(2.0 * std::numbers::pi * v) - (x0 - x1_hat).squaredNorm() / (2.0 * v);
        break;
      }
      case Reconstruction::CategoricalExact: {
        const int d = spec.dim;
        for (int k = 0; k < spec.tokens; ++k) rec += log_softmax_pick(tails[0], log_freq, k * d, d, token_at(x0, k * d, d))[0];
        break;
      }
    }
    values.push_back(rec - kl);
    kls.push_back(kl);
    recs.push_back(rec);
  }
  const double n = static_cast<double>(values.size());
  ElboResult r;
  for (std::size_t i = 0; i < values.size(); ++i) {
    r.elbo_nats += values[i] / n;
    r.kl_sum += kls[i] / n;
    r.reconstruction += recs[i] / n;
  }
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - r.elbo_nats) * (v - r.elbo_nats);
    r.se = std::sqrt(ss / (n - 1.0) / n);
  }
  const double units = spec.id == FamilyId::Categorical ? spec.tokens : cols;
  r.bits_per_dim = -r.elbo_nats / std::numbers::ln2 / units;
  return r;
}

GaussianMoments gaussian_tail_transition(const NoiseSchedule& schedule, int t_high, int t_low, double g_high,
                                         double x0_hat) {
  if (schedule.spec.id != FamilyId::Gaussian || schedule.spec.dim != 1) {
    throw Error(ErrorCode::UnsupportedFamily, "tail transition moments are defined for the scalar Gaussian family");
  }
  if (!(1 <= t_low && t_low < t_high && t_high <= schedule.T)) throw Error(ErrorCode::Step, "need 1 <= t_low < t_high <= T");
  const double c_high = tail::tail_scale(schedule, t_high);
  const double c_low = tail::tail_scale(schedule, t_low);
  double mean_raw = g_high / c_high;
  double var_raw = 0.0;
  for (int s = t_high - 1; s >= t_low; --s) {
    const auto& p = schedule.at(s);
    const double ab = exp_family::gaussian(p).alpha_bar;
    mean_raw += p.a * std::sqrt(ab) * x0_hat;
    var_raw += p.a * p.a * (1.0 - ab);
  }
  return {c_low * mean_raw, c_low * c_low * var_raw};
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

namespace {

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["version"] = c.version;
  j["experiment"] = c.experiment;
  j["family"] = {{"id", std::string(exp_family::to_string(c.family.id))}, {"dim", c.family.dim}, {"tokens", c.family.tokens}};
  j["T"] = c.T;
  j["schedule"] = {{"kind", c.schedule.kind}, {"path", c.schedule.path}, {"nu_min", c.schedule.nu_min},
                   {"nu_max", c.schedule.nu_max}, {"grid", c.schedule.grid}};
  j["dataset"] = {{"id", c.dataset.id}, {"n_train", c.dataset.n_train}, {"n_test", c.dataset.n_test},
                  {"csv_path", c.dataset.csv_path}};
  j["mlp"] = {{"width", c.mlp.width}, {"hidden_layers", c.mlp.hidden_layers}, {"time_dim", c.mlp.time_dim},
              {"residual", c.mlp.residual}};
  j["adam"] = {{"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps},
               {"lr_decay", c.adam.lr_decay}, {"clip_norm", c.adam.clip_norm}, {"ema_decay", c.adam.ema_decay},
               {"ema_warmup", c.adam.ema_warmup}};
  j["batch_size"] = c.batch_size;
  j["iterations"] = c.iterations;
  j["loss"] = std::string(to_string(c.loss));
  j["normalizer_n_mc"] = c.normalizer_n_mc;
  j["use_ema"] = c.use_ema;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["sample_count"] = c.sample_count;
  j["sample_steps"] = c.sample_steps;
  j["knn_k"] = c.knn_k;
  j["elbo_n_mc"] = c.elbo_n_mc;
  j["elbo_points"] = c.elbo_points;
  return j;
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

ExperimentConfig config_from(const json& j) {
  ExperimentConfig c;
  read(j, "version", c.version);
  read(j, "experiment", c.experiment);
  if (j.contains("family")) {
    const json& f = j.at("family");
    if (f.contains("id")) c.family.id = exp_family::family_from_string(f.at("id").get<std::string>());
    read(f, "dim", c.family.dim);
    read(f, "tokens", c.family.tokens);
  }
  read(j, "T", c.T);
  if (j.contains("schedule")) {
    const json& s = j.at("schedule");
    read(s, "kind", c.schedule.kind);
    read(s, "path", c.schedule.path);
    read(s, "nu_min", c.schedule.nu_min);
    read(s, "nu_max", c.schedule.nu_max);
    read(s, "grid", c.schedule.grid);
  }
  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    read(d, "id", c.dataset.id);
    read(d, "n_train", c.dataset.n_train);
    read(d, "n_test", c.dataset.n_test);
    read(d, "csv_path", c.dataset.csv_path);
  }
  if (j.contains("mlp")) {
    const json& m = j.at("mlp");
    read(m, "width", c.mlp.width);
    read(m, "hidden_layers", c.mlp.hidden_layers);
    read(m, "time_dim", c.mlp.time_dim);
    read(m, "residual", c.mlp.residual);
  }
  if (j.contains("adam")) {
    const json& a = j.at("adam");
    read(a, "lr", c.adam.lr);
    read(a, "beta1", c.adam.beta1);
    read(a, "beta2", c.adam.beta2);
    read(a, "eps", c.adam.eps);
    read(a, "lr_decay", c.adam.lr_decay);
    read(a, "clip_norm", c.adam.clip_norm);
    read(a, "ema_decay", c.adam.ema_decay);
    read(a, "ema_warmup", c.adam.ema_warmup);
  }
  read(j, "batch_size", c.batch_size);
  read(j, "iterations", c.iterations);
  if (j.contains("loss")) c.loss = loss_mode_from_string(j.at("loss").get<std::string>());
  read(j, "normalizer_n_mc", c.normalizer_n_mc);
  read(j, "use_ema", c.use_ema);
  read(j, "seed", c.seed);
  read(j, "output_dir", c.output_dir);
  read(j, "sample_count", c.sample_count);
  read(j, "sample_steps", c.sample_steps);
  read(j, "knn_k", c.knn_k);
  read(j, "elbo_n_mc", c.elbo_n_mc);
  read(j, "elbo_points", c.elbo_points);
  return c;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error(ErrorCode::Config, fmt::format("override '{}' is not key=value", assignment));
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw Error(ErrorCode::Config, fmt::format("override key '{}' has an empty part", key));
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    if (!node->is_object()) *node = json::object();
    start = dot + 1;
  }
}

}  // namespace

void validate(const ExperimentConfig& c) {
  const auto bad = [](const std::string& field, const std::string& why) {
    throw Error(ErrorCode::Config, fmt::format("config field '{}': {}", field, why));
  };
  if (c.version != 1) bad("version", fmt::format("unsupported version {}", c.version));
  exp_family::validate(c.family);
  if (c.T < 1) bad("T", "must be >= 1");
  if (c.batch_size < 1) bad("batch_size", "must be >= 1");
  if (c.iterations < 0) bad("iterations", "must be >= 0");
  if (c.normalizer_n_mc < 1) bad("normalizer_n_mc", "must be >= 1");
  if (c.sample_count < 1) bad("sample_count", "must be >= 1");
  if (c.sample_steps < 0 || c.sample_steps == 1 || c.sample_steps > c.T) bad("sample_steps", "must be 0 or in 2..T");
  if (c.knn_k < 1) bad("knn_k", "must be >= 1");
  if (c.elbo_n_mc < 1) bad("elbo_n_mc", "must be >= 1");
  if (c.dataset.n_train < 1) bad("dataset.n_train", "must be >= 1");
  if (c.dataset.n_test < 0) bad("dataset.n_test", "must be >= 0");
  const std::string& k = c.schedule.kind;
  if (k != "default" && k != "cosine_transform" && k != "mi_match" && k != "file") {
    bad("schedule.kind", fmt::format("unknown kind '{}'", k));
  }
  if (k == "file" && c.schedule.path.empty()) bad("schedule.path", "required for kind 'file'");
  if (!(c.schedule.nu_min > 0.0 && c.schedule.nu_max > c.schedule.nu_min)) bad("schedule.nu_min", "need 0 < nu_min < nu_max");
  if (c.schedule.grid < 2) bad("schedule.grid", "must be >= 2");
  nnet::MlpConfig m = c.mlp;
  m.input_dim = m.output_dim = 1;
  try {
    nnet::validate(m);
  } catch (const Error& e) {
    bad("mlp", e.what());
  }
  if (!(c.adam.lr > 0.0)) bad("adam.lr", "must be positive");
  if (!(c.adam.lr_decay > 0.0 && c.adam.lr_decay <= 1.0)) bad("adam.lr_decay", "must be in (0, 1]");
  if (!(c.adam.ema_decay >= 0.0 && c.adam.ema_decay < 1.0)) bad("adam.ema_decay", "must be in [0, 1)");
}

std::string to_json(const ExperimentConfig& config) { return config_to_json(config).dump(1); }

ExperimentConfig config_from_json(const std::string& text, std::span<const std::string> overrides) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Config, fmt::format("config does not parse: {}", e.what()));
  }
  if (!doc.is_object()) throw Error(ErrorCode::Config, "config must be a JSON object");
  if (!doc.contains("version")) throw Error(ErrorCode::Config, "config field 'version' is missing");
  for (const std::string& o : overrides) apply_override(doc, o);
  ExperimentConfig c;
  try {
    c = config_from(doc);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Config, fmt::format("config has a field of the wrong type: {}", e.what()));
  } catch (const Error& e) {
    throw Error(ErrorCode::Config, e.what());
  }
  validate(c);
  return c;
}

std::uint64_t config_hash(const ExperimentConfig& config) { return io::fnv1a(config_to_json(config).dump()); }

}  // namespace ssdiff::engine
