#pragma once

#include <string>
#include <string_view>
#include <variant>

#include <Eigen/Dense>

#include "ssdiff/random.hpp"

namespace ssdiff::exp_family {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class FamilyId {
  Gaussian,
  Beta,
  Dirichlet,
  Categorical,
  VonMises,
  VonMisesFisher,
  Gamma,
  Wishart,
};

[[nodiscard]] std::string_view to_string(FamilyId id) noexcept;
[[nodiscard]] FamilyId family_from_string(std::string_view name);

// dim is the number of independent coordinates for Gaussian/Beta/VonMises/Gamma,
// the ambient dimension for Dirichlet and VonMisesFisher, the matrix side p for
// Wishart and the vocabulary size D for Categorical.
struct FamilySpec {
  FamilyId id = FamilyId::Gaussian;
  int dim = 1;
  int tokens = 1;  // Categorical only: tokens per datum.
};

void validate(const FamilySpec& spec);

// Flattened sizes of a domain point, of T(x) (and of G_t), and of the
// unconstrained predictor output consumed by map_to_domain.
[[nodiscard]] int point_size(const FamilySpec& spec);
[[nodiscard]] int stat_size(const FamilySpec& spec);
[[nodiscard]] int raw_size(const FamilySpec& spec);

// Coordinates closer than this to 0 or 1 are rejected by the Beta/Dirichlet
// statistics; forward samples are clamped into the interior.
inline constexpr double kBoundaryEps = 1e-12;
inline constexpr double kWishartJitter = 1e-4;
inline constexpr double kGammaHeadMin = 1e-6;
inline constexpr double kGammaHeadMax = 1e6;
inline constexpr long kRejectionCap = 1'000'000;

struct GaussianParams {
  double alpha_bar = 0.0;
};
// nu for Beta/Dirichlet, kappa for VonMises/VonMisesFisher.
struct ConcentrationParams {
  double value = 0.0;
};
struct GammaParams {
  double alpha = 1.0;
  double xi = 1.0;
};
struct WishartParams {
  double n = 1.0;
  double xi = 1.0;
};
struct CategoricalParams {
  Matrix q_bar;           // D x D, row-stochastic
  Eigen::RowVectorXd stationary;  // limit law of q_bar rows as t -> T
};

using Params =
    std::variant<GaussianParams, ConcentrationParams, GammaParams, WishartParams, CategoricalParams>;

struct SchedulePoint {
  int t = 0;
  Params params;
  // Scalar coefficient of the tail statistic (the families table's A_t).
  // Categorical uses log q_bar instead and stores 1 here.
  double a = 0.0;
};

[[nodiscard]] SchedulePoint make_point(const FamilySpec& spec, int t, Params params);
void validate(const FamilySpec& spec, const SchedulePoint& point);
[[nodiscard]] double tail_coefficient(const FamilySpec& spec, const Params& params);

[[nodiscard]] const GaussianParams& gaussian(const SchedulePoint& point);
[[nodiscard]] double concentration(const SchedulePoint& point);
[[nodiscard]] const GammaParams& gamma(const SchedulePoint& point);
[[nodiscard]] const WishartParams& wishart(const SchedulePoint& point);
[[nodiscard]] const CategoricalParams& categorical(const SchedulePoint& point);

// The x0-independent law the schedule approaches at t = T.
[[nodiscard]] SchedulePoint stationary_point(const FamilySpec& spec, const SchedulePoint& point);

[[nodiscard]] bool in_domain(const FamilySpec& spec, const Vector& x, double tol = 1e-9);
void require_domain(const FamilySpec& spec, const Vector& x, std::string_view what);

// Exponential-family form: log q(x|x0) = <eta(x0), T(x)> + log_base(x) - log_partition(x0).
[[nodiscard]] Vector natural_params(const FamilySpec& spec, const Vector& x0,
                                    const SchedulePoint& point);
[[nodiscard]] Vector sufficient_stat(const FamilySpec& spec, const Vector& x);
[[nodiscard]] double log_partition(const FamilySpec& spec, const Vector& x0,
                                   const SchedulePoint& point);
[[nodiscard]] double log_base(const FamilySpec& spec, const Vector& x, const SchedulePoint& point);
// <eta, T> with the convention 0 * (-inf) = 0 (Categorical zero-probability entries).
[[nodiscard]] double stat_dot(const Vector& eta, const Vector& stat);

[[nodiscard]] Vector sample_forward(const FamilySpec& spec, const Vector& x0,
                                    const SchedulePoint& point, Rng& rng);
[[nodiscard]] Vector sample_stationary(const FamilySpec& spec, const SchedulePoint& point,
                                       Rng& rng);

[[nodiscard]] double log_pdf(const FamilySpec& spec, const Vector& x, const Vector& x0,
                             const SchedulePoint& point);
[[nodiscard]] double entropy(const FamilySpec& spec, const Vector& x0, const SchedulePoint& point);

[[nodiscard]] double kl_step(const FamilySpec& spec, const Vector& x0, const Vector& x_pred,
                             const SchedulePoint& point);
// d kl_step / d x_pred in ambient coordinates.
[[nodiscard]] Vector kl_grad_pred(const FamilySpec& spec, const Vector& x0, const Vector& x_pred,
                                  const SchedulePoint& point);

[[nodiscard]] Vector map_to_domain(const FamilySpec& spec, const Vector& raw);
// Vector-Jacobian product of map_to_domain at raw with upstream d loss / d output.
[[nodiscard]] Vector map_to_domain_vjp(const FamilySpec& spec, const Vector& raw,
                                       const Vector& upstream);

}  // namespace ssdiff::exp_family
