#include "ssdiff/nnet.hpp"

#include <cmath>

#include <fmt/format.h>
#include <json.hpp>

#include "ssdiff/error.hpp"

namespace ssdiff::nnet {

using nlohmann::json;

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Matrix swish_of(const Matrix& x) {
  return x.unaryExpr([](double v) { return v * sigmoid(v); });
}

Matrix swish_grad(const Matrix& x) {
  return x.unaryExpr([](double v) {
    const double s = sigmoid(v);
    return s * (1.0 + v * (1.0 - s));
  });
}

void check_finite(const Matrix& m, std::string_view where) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      if (!std::isfinite(m(i, j))) {
        throw Error(ErrorCode::NumericalOverflow,
                    fmt::format("non-finite value {} in {} at row {}, column {}", m(i, j), where, i, j));
      }
    }
  }
}

[[noreturn]] void shape_error(std::string_view op, const Matrix& a, const Matrix& b) {
  throw Error(ErrorCode::Shape,
              fmt::format("{}: shapes {}x{} and {}x{} do not fit", op, a.rows(), a.cols(), b.rows(), b.cols()));
}

json matrix_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

Matrix matrix_from(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw Error(ErrorCode::Shape, "matrix payload size mismatch");
  return Eigen::Map<const Matrix>(data.data(), rows, cols);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

const Tape::Node& Tape::node(Id id) const {
  if (id >= nodes_.size()) {
    throw Error(ErrorCode::GraphIntegrity, fmt::format("node {} is not on this tape ({} nodes)", id, nodes_.size()));
  }
  return nodes_[id];
}

Tape::Id Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

Tape::Id Tape::constant(Matrix value) {
  Node n{Op::Constant};
  n.value = std::move(value);
  return push(std::move(n));
}

Tape::Id Tape::parameter(Parameter& p) {
  Node n{Op::Parameter};
  n.value = p.value;
  n.param = &p;
  n.name = p.name;
  if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) p.grad.setZero(p.value.rows(), p.value.cols());
  return push(std::move(n));
}

Tape::Id Tape::matmul(Id x, Id w) {
  const Matrix& a = node(x).value;
  const Matrix& b = node(w).value;
  if (a.cols() != b.rows()) shape_error("matmul", a, b);
  Node n{Op::MatMul, x, w};
  n.value.noalias() = a * b;
  return push(std::move(n));
}

Tape::Id Tape::add_bias(Id x, Id b) {
  const Matrix& a = node(x).value;
  const Matrix& bias = node(b).value;
  if (bias.rows() != 1 || bias.cols() != a.cols()) shape_error("add_bias", a, bias);
  Node n{Op::AddBias, x, b};
  n.value = a.rowwise() + bias.row(0);
  return push(std::move(n));
}

Tape::Id Tape::add(Id a, Id b) {
  const Matrix& va = node(a).value;
  const Matrix& vb = node(b).value;
  if (va.rows() != vb.rows() || va.cols() != vb.cols()) shape_error("add", va, vb);
  Node n{Op::Add, a, b};
  n.value = va + vb;
  return push(std::move(n));
}

Tape::Id Tape::swish(Id x) {
  Node n{Op::Swish, x};
  n.value = swish_of(node(x).value);
  return push(std::move(n));
}

Tape::Id Tape::scale(Id x, double c) {
  Node n{Op::Scale, x};
  n.c = c;
  n.value = c * node(x).value;
  return push(std::move(n));
}

Tape::Id Tape::sum(Id x) {
  Node n{Op::Sum, x};
  n.value = Matrix::Constant(1, 1, node(x).value.sum());
  return push(std::move(n));
}

Tape::Id Tape::mean(Id x) {
  const Matrix& v = node(x).value;
  if (v.size() == 0) throw Error(ErrorCode::Shape, "mean of an empty matrix");
  Node n{Op::Mean, x};
  n.value = Matrix::Constant(1, 1, v.mean());
  return push(std::move(n));
}

Tape::Id Tape::custom(Id x, Matrix value, Vjp vjp, std::string name) {
  node(x);
  if (!vjp) throw Error(ErrorCode::GraphIntegrity, fmt::format("custom node '{}' has no backward rule", name));
  Node n{Op::Custom, x};
  n.value = std::move(value);
  n.vjp = std::move(vjp);
  n.name = std::move(name);
  return push(std::move(n));
}

const Matrix& Tape::value(Id id) const { return node(id).value; }

const Matrix& Tape::grad(Id id) const {
  const Node& n = node(id);
  if (!n.reached) throw Error(ErrorCode::GraphIntegrity, fmt::format("node {} received no gradient", id));
  return n.grad;
}

void Tape::backward(Id loss, bool require_connected) {
  const Node& l = node(loss);
  if (l.value.size() != 1) throw Error(ErrorCode::Shape, "backward needs a scalar loss");
  for (Node& n : nodes_) {
    n.reached = false;
    n.grad.resize(0, 0);
  }
  const auto accumulate = [&](Id target, const Matrix& g) {
    Node& t = nodes_[target];
    if (!t.reached) {
      t.grad = g;
      t.reached = true;
    } else {
      t.grad += g;
    }
  };
  nodes_[loss].grad = Matrix::Ones(1, 1);
  nodes_[loss].reached = true;
  for (Id i = loss + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.reached) continue;
    const Matrix& g = n.grad;
    switch (n.op) {
      case Op::Constant: break;
      case Op::Parameter: n.param->grad += g; break;
      case Op::MatMul:
        accumulate(n.a, g * nodes_[n.b].value.transpose());
        accumulate(n.b, nodes_[n.a].value.transpose() * g);
        break;
      case Op::AddBias:
        accumulate(n.a, g);
        accumulate(n.b, g.colwise().sum());
        break;
      case Op::Add:
        accumulate(n.a, g);
        accumulate(n.b, g);
        break;
      case Op::Swish: accumulate(n.a, g.cwiseProduct(swish_grad(nodes_[n.a].value))); break;
      case Op::Scale: accumulate(n.a, n.c * g); break;
      case Op::Sum: {
        const Matrix& v = nodes_[n.a].value;
        accumulate(n.a, Matrix::Constant(v.rows(), v.cols(), g(0, 0)));
        break;
      }
      case Op::Mean: {
        const Matrix& v = nodes_[n.a].value;
        accumulate(n.a, Matrix::Constant(v.rows(), v.cols(), g(0, 0) / static_cast<double>(v.size())));
        break;
      }
      case Op::Custom: {
        Matrix back = n.vjp(g);
        const Matrix& in = nodes_[n.a].value;
        if (back.rows() != in.rows() || back.cols() != in.cols()) {
          throw Error(ErrorCode::GraphIntegrity, fmt::format("custom node '{}' returned a gradient of shape {}x{}",
                                                             n.name, back.rows(), back.cols()));
        }
        accumulate(n.a, back);
        break;
      }
    }
  }
  if (require_connected) {
    for (Id i = 0; i <= loss; ++i) {
      if (nodes_[i].op == Op::Parameter && !nodes_[i].reached) {
        throw Error(ErrorCode::GraphIntegrity, fmt::format("parameter '{}' is detached from the loss", nodes_[i].name));
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Time embedding and MLP
// ---------------------------------------------------------------------------

Vector time_embedding(double t, int T, int dim) {
  if (dim < 2 || dim % 2 != 0) throw Error(ErrorCode::InvalidInput, "time embedding dim must be even and >= 2");
  if (T < 1 || t < 0.0 || t > T) throw Error(ErrorCode::Step, fmt::format("time {} outside [0, {}]", t, T));
  const int half = dim / 2;
  Vector e(dim);
  for (int k = 0; k < half; ++k) {
    const double freq = std::pow(1e4, -static_cast<double>(k) / half);
    e[k] = std::sin(t * freq);
    e[half + k] = std::cos(t * freq);
  }
  return e;
}

Matrix time_embedding(std::span<const int> t, int T, int dim) {
  Matrix out(static_cast<Eigen::Index>(t.size()), dim);
  for (std::size_t i = 0; i < t.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = time_embedding(t[i], T, dim).transpose();
  return out;
}

void validate(const MlpConfig& c) {
  if (c.input_dim < 1 || c.output_dim < 1 || c.width < 1 || c.hidden_layers < 1 || c.time_dim < 0 ||
      c.time_dim % 2 != 0) {
    throw Error(ErrorCode::Config, "MLP config needs positive sizes and an even time_dim");
  }
}

Mlp::Mlp(const MlpConfig& config, Rng& rng) : config_(config) {
  validate(config);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const auto kaiming = [&](int fan_in, int fan_out) {
    const double bound = std::sqrt(6.0 / fan_in);
    Matrix w(fan_in, fan_out);
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = bound * u(rng);
    }
    return w;
  };
  const int in = config.input_dim + config.time_dim;
  params_.push_back({"w0", kaiming(in, config.width), {}});
  params_.push_back({"b0", Matrix::Zero(1, config.width), {}});
  for (int l = 1; l < config.hidden_layers; ++l) {
    params_.push_back({fmt::format("w{}", l), kaiming(config.width, config.width), {}});
    params_.push_back({fmt::format("b{}", l), Matrix::Zero(1, config.width), {}});
  }
  params_.push_back({"w_out", Matrix::Zero(config.width, config.output_dim), {}});
  params_.push_back({"b_out", Matrix::Zero(1, config.output_dim), {}});
  zero_grad();
}

std::size_t Mlp::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

Tape::Id Mlp::forward(Tape& tape, const Matrix& g, const Matrix& t_embed) {
  if (g.cols() != config_.input_dim || t_embed.cols() != config_.time_dim || g.rows() != t_embed.rows()) {
    throw Error(ErrorCode::Shape, fmt::format("MLP input {}x{} + {}x{} does not match config ({} + {})", g.rows(),
                                              g.cols(), t_embed.rows(), t_embed.cols(), config_.input_dim,
                                              config_.time_dim));
  }
  Matrix in(g.rows(), g.cols() + t_embed.cols());
  in << g, t_embed;
  check_finite(in, "network input");
  Tape::Id h = tape.constant(std::move(in));
  std::size_t k = 0;
  for (int l = 0; l < config_.hidden_layers; ++l) {
    const Tape::Id w = tape.parameter(params_[k++]);
    const Tape::Id b = tape.parameter(params_[k++]);
    const Tape::Id act = tape.swish(tape.add_bias(tape.matmul(h, w), b));
    check_finite(tape.value(act), fmt::format("hidden layer {}", l));
    h = (l > 0 && config_.residual) ? tape.add(h, act) : act;
  }
  const Tape::Id w = tape.parameter(params_[k++]);
  const Tape::Id b = tape.parameter(params_[k++]);
  const Tape::Id out = tape.add_bias(tape.matmul(h, w), b);
  check_finite(tape.value(out), "output layer");
  return out;
}

Matrix Mlp::predict(const Matrix& g, const Matrix& t_embed) const {
  if (g.cols() != config_.input_dim || t_embed.cols() != config_.time_dim || g.rows() != t_embed.rows()) {
    throw Error(ErrorCode::Shape, "MLP input does not match config");
  }
  Matrix h(g.rows(), g.cols() + t_embed.cols());
  h << g, t_embed;
  check_finite(h, "network input");
  std::size_t k = 0;
  for (int l = 0; l < config_.hidden_layers; ++l) {
    Matrix z = h * params_[k].value;
    z.rowwise() += params_[k + 1].value.row(0);
    k += 2;
    Matrix act = swish_of(z);
    check_finite(act, fmt::format("hidden layer {}", l));
    if (l > 0 && config_.residual) {
      h += act;
    } else {
      h = std::move(act);
    }
  }
  Matrix out = h * params_[k].value;
  out.rowwise() += params_[k + 1].value.row(0);
  check_finite(out, "output layer");
  return out;
}

void Mlp::zero_grad() {
  for (Parameter& p : params_) p.grad.setZero(p.value.rows(), p.value.cols());
}

Vector Mlp::flat_values() const {
  Vector out(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index off = 0;
  for (const Parameter& p : params_) {
    out.segment(off, p.value.size()) = Eigen::Map<const Vector>(p.value.data(), p.value.size());
    off += p.value.size();
  }
  return out;
}

void Mlp::set_flat_values(const Vector& flat) {
  if (flat.size() != static_cast<Eigen::Index>(parameter_count())) throw Error(ErrorCode::Shape, "flat parameter size mismatch");
  Eigen::Index off = 0;
  for (Parameter& p : params_) {
    Eigen::Map<Vector>(p.value.data(), p.value.size()) = flat.segment(off, p.value.size());
    off += p.value.size();
  }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

OptimState make_optimizer(std::span<const Parameter> params, const AdamConfig& config) {
  if (!(config.lr > 0.0) || !(config.lr_decay > 0.0 && config.lr_decay <= 1.0) || !(config.ema_decay >= 0.0 && config.ema_decay < 1.0)) {
    throw Error(ErrorCode::Config, "optimizer needs lr > 0, lr_decay in (0, 1], ema_decay in [0, 1)");
  }
  OptimState opt;
  opt.config = config;
  for (const Parameter& p : params) {
    opt.m.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    opt.v.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    opt.ema.push_back(p.value);
  }
  return opt;
}

double global_grad_norm(std::span<const Parameter> params) {
  double s = 0.0;
  for (const Parameter& p : params) s += p.grad.squaredNorm();
  return std::sqrt(s);
}

double clip_gradients(std::span<Parameter> params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm && std::isfinite(norm)) {
    const double f = max_norm / norm;
    for (Parameter& p : params) p.grad *= f;
  }
  return norm;
}

double current_lr(const OptimState& opt) {
  return opt.config.lr * std::pow(opt.config.lr_decay, static_cast<double>(opt.step));
}

bool adam_step(OptimState& opt, std::span<Parameter> params) {
  if (params.size() != opt.m.size()) throw Error(ErrorCode::Shape, "optimizer state does not match parameters");
  for (const Parameter& p : params) {
    if (!p.grad.allFinite()) return false;
  }
  const AdamConfig& c = opt.config;
  const double lr = current_lr(opt);
  const double n = static_cast<double>(opt.step + 1);
  const double bc1 = 1.0 - std::pow(c.beta1, n);
  const double bc2 = 1.0 - std::pow(c.beta2, n);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    opt.m[i] = c.beta1 * opt.m[i] + (1.0 - c.beta1) * p.grad;
    opt.v[i] = c.beta2 * opt.v[i] + (1.0 - c.beta2) * p.grad.cwiseAbs2();
    p.value.array() -= lr * (opt.m[i].array() / bc1) / ((opt.v[i].array() / bc2).sqrt() + c.eps);
  }
  ++opt.step;
  return true;
}

void ema_update(OptimState& opt, std::span<const Parameter> params) {
  double d = opt.config.ema_decay;
  if (opt.config.ema_warmup) {
    const double s = static_cast<double>(opt.step);
    d = std::min(d, (1.0 + s) / (10.0 + s));
  }
  for (std::size_t i = 0; i < params.size(); ++i) opt.ema[i] = d * opt.ema[i] + (1.0 - d) * params[i].value;
}

void load_ema(const OptimState& opt, std::span<Parameter> params) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i].value = opt.ema[i];
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

std::string checkpoint_to_json(const Checkpoint& c) {
  json j;
  j["format"] = "ssdiff-checkpoint";
  j["version"] = 1;
  j["config"] = c.config_json.empty() ? json::object() : json::parse(c.config_json);
  j["mlp"] = {{"input_dim", c.mlp.input_dim}, {"output_dim", c.mlp.output_dim}, {"width", c.mlp.width},
              {"hidden_layers", c.mlp.hidden_layers}, {"time_dim", c.mlp.time_dim}, {"residual", c.mlp.residual}};
  json params = json::array();
  for (const Parameter& p : c.net.params()) params.push_back({{"name", p.name}, {"value", matrix_json(p.value)}});
  j["params"] = params;
  const AdamConfig& a = c.opt.config;
  json opt = {{"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}, {"lr_decay", a.lr_decay},
              {"clip_norm", a.clip_norm}, {"ema_decay", a.ema_decay}, {"ema_warmup", a.ema_warmup},
              {"step", c.opt.step}};
  json m = json::array(), v = json::array(), ema = json::array();
  for (std::size_t i = 0; i < c.opt.m.size(); ++i) {
    m.push_back(matrix_json(c.opt.m[i]));
    v.push_back(matrix_json(c.opt.v[i]));
    ema.push_back(matrix_json(c.opt.ema[i]));
  }
  opt["m"] = m;
  opt["v"] = v;
  j["opt"] = opt;
  j["ema"] = ema;
  j["schedule_hash"] = fmt::format("{:016x}", c.schedule_hash);
  j["normalizer_hash"] = fmt::format("{:016x}", c.normalizer_hash);
  j["normalizer"] = c.normalizer_json.empty() ? json() : json::parse(c.normalizer_json);
  return j.dump();
}

Checkpoint checkpoint_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    if (j.value("format", "") != "ssdiff-checkpoint") throw Error(ErrorCode::InvalidInput, "not an ssdiff checkpoint");
    Checkpoint c;
    c.config_json = j.at("config").dump();
    const json& mj = j.at("mlp");
    c.mlp.input_dim = mj.at("input_dim").get<int>();
    c.mlp.output_dim = mj.at("output_dim").get<int>();
    c.mlp.width = mj.at("width").get<int>();
    c.mlp.hidden_layers = mj.at("hidden_layers").get<int>();
    c.mlp.time_dim = mj.at("time_dim").get<int>();
    c.mlp.residual = mj.at("residual").get<bool>();
    Rng rng(0);
    c.net = Mlp(c.mlp, rng);
    const json& pj = j.at("params");
    if (pj.size() != c.net.params().size()) throw Error(ErrorCode::Shape, "checkpoint parameter count mismatch");
    for (std::size_t i = 0; i < pj.size(); ++i) {
      Parameter& p = c.net.params()[i];
      Matrix value = matrix_from(pj[i].at("value"));
      if (value.rows() != p.value.rows() || value.cols() != p.value.cols()) {
        throw Error(ErrorCode::Shape, fmt::format("checkpoint tensor '{}' has the wrong shape", p.name));
      }
      p.value = std::move(value);
    }
    const json& oj = j.at("opt");
    AdamConfig a;
    a.lr = oj.at("lr").get<double>();
    a.beta1 = oj.at("beta1").get<double>();
    a.beta2 = oj.at("beta2").get<double>();
    a.eps = oj.at("eps").get<double>();
    a.lr_decay = oj.at("lr_decay").get<double>();
    a.clip_norm = oj.at("clip_norm").get<double>();
    a.ema_decay = oj.at("ema_decay").get<double>();
    a.ema_warmup = oj.at("ema_warmup").get<bool>();
    c.opt = make_optimizer(c.net.params(), a);
    c.opt.step = oj.at("step").get<long>();
    for (std::size_t i = 0; i < c.opt.m.size(); ++i) {
      c.opt.m[i] = matrix_from(oj.at("m").at(i));
      c.opt.v[i] = matrix_from(oj.at("v").at(i));
      c.opt.ema[i] = matrix_from(j.at("ema").at(i));
    }
    c.schedule_hash = std::stoull(j.at("schedule_hash").get<std::string>(), nullptr, 16);
    c.normalizer_hash = std::stoull(j.at("normalizer_hash").get<std::string>(), nullptr, 16);
    if (!j.at("normalizer").is_null()) c.normalizer_json = j.at("normalizer").dump();
    return c;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidInput, fmt::format("checkpoint JSON: {}", e.what()));
  }
}

}  // namespace ssdiff::nnet
