#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ssdiff/random.hpp"

namespace ssdiff::nnet {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
};

// Matrix-level reverse-mode tape. Rows are batch entries.
class Tape {
 public:
  using Id = std::size_t;
  // Maps the upstream gradient of a custom node to the gradient of its input.
  using Vjp = std::function<Matrix(const Matrix& upstream)>;

  Id constant(Matrix value);
  Id parameter(Parameter& p);
  Id matmul(Id x, Id w);    // x (n x k) * w (k x m)
  Id add_bias(Id x, Id b);  // b is 1 x m, broadcast over rows
  Id add(Id a, Id b);
  Id swish(Id x);
  Id scale(Id x, double c);
  Id sum(Id x);   // 1 x 1
  Id mean(Id x);  // 1 x 1
  Id custom(Id x, Matrix value, Vjp vjp, std::string name);

  [[nodiscard]] const Matrix& value(Id id) const;
  [[nodiscard]] const Matrix& grad(Id id) const;
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  // Accumulates d loss / d p into every parameter reached from `loss`. With
  // require_connected, a parameter on the tape that the loss never reaches
  // raises GraphIntegrity.
  void backward(Id loss, bool require_connected = true);
  void clear() noexcept { nodes_.clear(); }

 private:
  enum class Op { Constant, Parameter, MatMul, AddBias, Add, Swish, Scale, Sum, Mean, Custom };
  struct Node {
    explicit Node(Op o, Id x = 0, Id y = 0) : op(o), a(x), b(y) {}
    Op op;
    Id a = 0;
    Id b = 0;
    double c = 0.0;
    Matrix value;
    Matrix grad;
    bool reached = false;
    Parameter* param = nullptr;
    Vjp vjp;
    std::string name;
  };
  const Node& node(Id id) const;
  Id push(Node n);
  std::vector<Node> nodes_;
};

// Sinusoidal embedding with geometric frequencies base^(-k / (dim/2)):
// the first dim/2 entries are sines, the rest cosines.
[[nodiscard]] Vector time_embedding(double t, int T, int dim);
[[nodiscard]] Matrix time_embedding(std::span<const int> t, int T, int dim);

struct MlpConfig {
  int input_dim = 1;  // normalized tail statistic
  int output_dim = 1;
  int width = 512;
  int hidden_layers = 3;
  int time_dim = 32;
  bool residual = true;
};

void validate(const MlpConfig& config);

// in = [g, embed(t)] -> swish(W0 in + b0) -> (hidden_layers - 1) residual swish
// layers -> linear output. The output layer starts at zero; hidden layers use
// Kaiming-uniform weights and zero biases.
class Mlp {
 public:
  Mlp() = default;
  Mlp(const MlpConfig& config, Rng& rng);

  [[nodiscard]] const MlpConfig& config() const noexcept { return config_; }
  [[nodiscard]] std::vector<Parameter>& params() noexcept { return params_; }
  [[nodiscard]] const std::vector<Parameter>& params() const noexcept { return params_; }
  [[nodiscard]] std::size_t parameter_count() const noexcept;

  // Records the forward pass; throws NumericalOverflow naming the layer when a
  // non-finite activation appears.
  Tape::Id forward(Tape& tape, const Matrix& g, const Matrix& t_embed);
  // Same computation without a tape.
  [[nodiscard]] Matrix predict(const Matrix& g, const Matrix& t_embed) const;

  void zero_grad();
  [[nodiscard]] Vector flat_values() const;
  void set_flat_values(const Vector& flat);

 private:
  MlpConfig config_;
  std::vector<Parameter> params_;  // W0, b0, W1, b1, ..., Wout, bout
};

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr_decay = 1.0;  // lr_t = lr * lr_decay^step
  double clip_norm = 1.0;  // <= 0 disables clipping
  double ema_decay = 0.9999;
  bool ema_warmup = true;  // decay_t = min(decay, (1 + step) / (10 + step))
};

struct OptimState {
  AdamConfig config;
  long step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::vector<Matrix> ema;
};

[[nodiscard]] OptimState make_optimizer(std::span<const Parameter> params, const AdamConfig& config);
[[nodiscard]] double global_grad_norm(std::span<const Parameter> params);
// Rescales so the global norm is at most max_norm; returns the norm before clipping.
double clip_gradients(std::span<Parameter> params, double max_norm);
[[nodiscard]] double current_lr(const OptimState& opt);
// One bias-corrected Adam update. Non-finite gradients leave params and the
// step counter untouched and return false.
bool adam_step(OptimState& opt, std::span<Parameter> params);
void ema_update(OptimState& opt, std::span<const Parameter> params);
// Copies EMA shadows into the parameter values.
void load_ema(const OptimState& opt, std::span<Parameter> params);

struct Checkpoint {
  std::string config_json;  // opaque experiment configuration
  MlpConfig mlp;
  Mlp net;
  OptimState opt;
  std::uint64_t schedule_hash = 0;
  std::uint64_t normalizer_hash = 0;
  std::string normalizer_json;
};

[[nodiscard]] std::string checkpoint_to_json(const Checkpoint& ckpt);
[[nodiscard]] Checkpoint checkpoint_from_json(const std::string& text);

}  // namespace ssdiff::nnet
