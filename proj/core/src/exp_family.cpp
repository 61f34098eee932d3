#include "ssdiff/exp_family.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <fmt/format.h>
#include <boost/math/special_functions/polygamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include "ssdiff/error.hpp"
#include "ssdiff/special.hpp"

namespace ssdiff::exp_family {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kLog2Pi = 1.8378770664093454836;

[[noreturn]] void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

using MatMap = Eigen::Map<const Matrix>;

Matrix as_matrix(const Vector& x, int p) { return MatMap(x.data(), p, p); }

Vector flatten(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

// lgamma(b) - lgamma(a) - (b - a) digamma(a), accurate when b is close to a.
double lgamma_bregman(double a, double b) {
  const double d = b - a;
  if (std::abs(d) <= 1e-3 * a) {
    const double d2 = d * d;
    return 0.5 * boost::math::trigamma(a) * d2 + boost::math::polygamma(2, a) * d2 * d / 6.0 +
           boost::math::polygamma(3, a) * d2 * d2 / 24.0;
  }
  return special::lgamma(b) - special::lgamma(a) - d * special::digamma(a);
}

// r - 1 - log r, the Bregman divergence of -log.
double log_bregman(double r) {
  const double u = r - 1.0;
  return u - std::log1p(u);
}

double wrap_angle(double x) {
  double y = std::remainder(x, 2.0 * kPi);
  if (y <= -kPi) y += 2.0 * kPi;
  return y;
}

int token_of(const Vector& x, int offset, int d) {
  int best = 0;
  for (int j = 1; j < d; ++j) {
    if (x[offset + j] > x[offset + best]) best = j;
  }
  return best;
}

Matrix wishart_mu(const Matrix& x0, double xi) {
  const int p = static_cast<int>(x0.rows());
  return xi * Matrix::Identity(p, p) + (1.0 - xi) * x0.inverse();
}

double log_det_spd(const Matrix& m) {
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) fail(ErrorCode::DomainBoundary, "matrix is not positive definite");
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

double vmf_log_normalizer(int k, double kappa) {
  // log of 1 / C_K(kappa) for the density C_K(kappa) exp(kappa mu^T x).
  const double half = 0.5 * k;
  if (kappa == 0.0) {
    return std::log(2.0) + half * std::log(kPi) - special::lgamma(half);
  }
  return half * kLog2Pi + special::log_bessel_i(half - 1.0, kappa) - (half - 1.0) * std::log(kappa);
}

double vm_log_normalizer(double kappa) { return kLog2Pi + special::log_bessel_i(0.0, kappa); }

Vector softmax_block(const Vector& raw, int offset, int d) {
  Vector out(d);
  const double m = raw.segment(offset, d).maxCoeff();
  double s = 0.0;
  for (int j = 0; j < d; ++j) {
    out[j] = std::exp(raw[offset + j] - m);
    s += out[j];
  }
  return out / s;
}

double vm_sample_offset(double kappa, Rng& rng) {
  if (kappa < 1e-8) return kPi * (2.0 * uniform01(rng) - 1.0);
  const double tau = 1.0 + std::sqrt(1.0 + 4.0 * kappa * kappa);
  const double rho = (tau - std::sqrt(2.0 * tau)) / (2.0 * kappa);
  const double r = (1.0 + rho * rho) / (2.0 * rho);
  for (long it = 0; it < kRejectionCap; ++it) {
    const double z = std::cos(kPi * uniform01(rng));
    const double f = (1.0 + r * z) / (r + z);
    const double c = kappa * (r - f);
    const double u2 = uniform01(rng);
    const double u3 = uniform01(rng);
    if (c * (2.0 - c) - u2 > 0.0 || std::log(c / u2) + 1.0 - c >= 0.0) {
      const double theta = std::acos(std::clamp(f, -1.0, 1.0));
      return u3 > 0.5 ? theta : -theta;
    }
  }
  throw SamplerError(kappa, fmt::format("von Mises sampler exceeded {} draws at kappa={}",
                                        kRejectionCap, kappa));
}

Vector random_direction(int k, Rng& rng) {
  Vector v(k);
  for (;;) {
    for (int i = 0; i < k; ++i) v[i] = standard_normal(rng);
    const double n = v.norm();
    if (n > 1e-300) return v / n;
  }
}

Vector vmf_sample(const Vector& mu, double kappa, Rng& rng) {
  const int m = static_cast<int>(mu.size());
  if (kappa < 1e-12) return random_direction(m, rng);
  const double mm1 = m - 1.0;
  const double b = mm1 / (2.0 * kappa + std::sqrt(4.0 * kappa * kappa + mm1 * mm1));
  const double x0 = (1.0 - b) / (1.0 + b);
  const double c = kappa * x0 + mm1 * std::log1p(-x0 * x0);
  const double half = 0.5 * mm1;
  for (long it = 0; it < kRejectionCap; ++it) {
    const double ga = gamma_variate(rng, half);
    const double gb = gamma_variate(rng, half);
    const double z = ga / (ga + gb);
    const double denom = 1.0 - (1.0 - b) * z;
    const double w = (1.0 - (1.0 + b) * z) / denom;
    const double one_minus_w = 2.0 * b * z / denom;
    const double u = uniform01(rng);
    if (kappa * w + mm1 * std::log1p(-x0 * w) - c >= std::log(u)) {
      Vector v = random_direction(m, rng);
      v -= mu * mu.dot(v);
      const double vn = v.norm();
      const double s = std::sqrt(std::max(0.0, one_minus_w * (1.0 + w)));
      Vector x = w * mu;
      if (vn > 1e-300) x += s * v / vn;
      return x / x.norm();
    }
  }
  throw SamplerError(kappa, fmt::format("von Mises-Fisher sampler exceeded {} draws at kappa={}",
                                        kRejectionCap, kappa));
}

Matrix wishart_sample(double n, const Matrix& scale, Rng& rng) {
  const int p = static_cast<int>(scale.rows());
  Eigen::LLT<Matrix> llt(scale);
  if (llt.info() != Eigen::Success) fail(ErrorCode::DomainBoundary, "Wishart scale is not positive definite");
  Matrix a = Matrix::Zero(p, p);
  for (int i = 0; i < p; ++i) {
    a(i, i) = std::sqrt(2.0 * gamma_variate(rng, 0.5 * (n - i)));
    for (int j = 0; j < i; ++j) a(i, j) = standard_normal(rng);
  }
  const Matrix la = llt.matrixL() * a;
  Matrix x = la * la.transpose();
  return 0.5 * (x + x.transpose());
}

void check_kl(double value, std::string_view family) {
  if (!(value >= -1e-10)) {
    fail(ErrorCode::FormulaViolation, fmt::format("{} KL evaluated to {} (< -1e-10)", family, value));
  }
}

double categorical_token_prob_log(const CategoricalParams& c, const Vector& x0, int offset, int d,
                                  int j) {
  double p = 0.0;
  for (int i = 0; i < d; ++i) p += x0[offset + i] * c.q_bar(i, j);
  return std::log(p);
}

}  // namespace

std::string_view to_string(FamilyId id) noexcept {
  switch (id) {
    case FamilyId::Gaussian: return "gaussian";
    case FamilyId::Beta: return "beta";
    case FamilyId::Dirichlet: return "dirichlet";
    case FamilyId::Categorical: return "categorical";
    case FamilyId::VonMises: return "von_mises";
    case FamilyId::VonMisesFisher: return "von_mises_fisher";
    case FamilyId::Gamma: return "gamma";
    case FamilyId::Wishart: return "wishart";
  }
  return "unknown";
}

FamilyId family_from_string(std::string_view name) {
  for (FamilyId id : {FamilyId::Gaussian, FamilyId::Beta, FamilyId::Dirichlet,
                      FamilyId::Categorical, FamilyId::VonMises, FamilyId::VonMisesFisher,
                      FamilyId::Gamma, FamilyId::Wishart}) {
    if (to_string(id) == name) return id;
  }
  if (name == "vm") return FamilyId::VonMises;
  if (name == "vmf") return FamilyId::VonMisesFisher;
  fail(ErrorCode::InvalidInput, fmt::format("unknown family '{}'", name));
}

void validate(const FamilySpec& spec) {
  if (spec.dim < 1) fail(ErrorCode::InvalidInput, "family dim must be positive");
  if (spec.tokens < 1) fail(ErrorCode::InvalidInput, "family tokens must be positive");
  if ((spec.id == FamilyId::Dirichlet || spec.id == FamilyId::Categorical ||
       spec.id == FamilyId::VonMisesFisher) &&
      spec.dim < 2) {
    fail(ErrorCode::InvalidInput, fmt::format("{} needs dim >= 2", to_string(spec.id)));
  }
}

int point_size(const FamilySpec& spec) {
  switch (spec.id) {
    case FamilyId::Categorical: return spec.dim * spec.tokens;
    case FamilyId::Wishart: return spec.dim * spec.dim;
    default: return spec.dim;
  }
}

int stat_size(const FamilySpec& spec) {
  switch (spec.id) {
    case FamilyId::VonMises: return 2 * spec.dim;
    default: return point_size(spec);
  }
}

int raw_size(const FamilySpec& spec) {
  switch (spec.id) {
    case FamilyId::Wishart: return spec.dim * (spec.dim + 1) / 2;
    default: return point_size(spec);
  }
}

double tail_coefficient(const FamilySpec& spec, const Params& params) {
  switch (spec.id) {
    case FamilyId::Gaussian: {
      const double ab = std::get<GaussianParams>(params).alpha_bar;
      return std::sqrt(ab) / (1.0 - ab);
    }
    case FamilyId::Beta:
    case FamilyId::Dirichlet:
    case FamilyId::VonMises:
    case FamilyId::VonMisesFisher: return std::get<ConcentrationParams>(params).value;
    case FamilyId::Gamma: {
      const auto& g = std::get<GammaParams>(params);
      return g.alpha * (1.0 - g.xi);
    }
    case FamilyId::Wishart: {
      const auto& w = std::get<WishartParams>(params);
      return w.n * (1.0 - w.xi);
    }
    case FamilyId::Categorical: return 1.0;
  }
  return 0.0;
}

SchedulePoint make_point(const FamilySpec& spec, int t, Params params) {
  SchedulePoint point{t, std::move(params), 0.0};
  validate(spec, point);
  point.a = tail_coefficient(spec, point.params);
  return point;
}

void validate(const FamilySpec& spec, const SchedulePoint& point) {
  const auto bad = [&](const std::string& what) {
    fail(ErrorCode::InvalidInput,
         fmt::format("{} schedule point t={}: {}", to_string(spec.id), point.t, what));
  };
  switch (spec.id) {
    case FamilyId::Gaussian: {
      const auto* g = std::get_if<GaussianParams>(&point.params);
      if (!g) bad("expected alpha_bar");
      if (!(g->alpha_bar >= 0.0 && g->alpha_bar <= 1.0)) bad("alpha_bar outside [0, 1]");
      break;
    }
    case FamilyId::Beta:
    case FamilyId::Dirichlet:
    case FamilyId::VonMises:
    case FamilyId::VonMisesFisher: {
      const auto* c = std::get_if<ConcentrationParams>(&point.params);
      if (!c) bad("expected a concentration");
      if (!(c->value >= 0.0) || !std::isfinite(c->value)) bad("concentration must be finite and >= 0");
      break;
    }
    case FamilyId::Gamma: {
      const auto* g = std::get_if<GammaParams>(&point.params);
      if (!g) bad("expected (alpha, xi)");
      if (!(g->alpha > 0.0) || !(g->xi >= 0.0 && g->xi <= 1.0)) bad("need alpha > 0, xi in [0, 1]");
      break;
    }
    case FamilyId::Wishart: {
      const auto* w = std::get_if<WishartParams>(&point.params);
      if (!w) bad("expected (n, xi)");
      if (!(w->n > spec.dim - 1.0)) bad(fmt::format("degrees of freedom {} must exceed p - 1 = {}", w->n, spec.dim - 1));
      if (!(w->xi >= 0.0 && w->xi <= 1.0)) bad("xi outside [0, 1]");
      break;
    }
    case FamilyId::Categorical: {
      const auto* c = std::get_if<CategoricalParams>(&point.params);
      if (!c) bad("expected q_bar");
      if (c->q_bar.rows() != spec.dim || c->q_bar.cols() != spec.dim) bad("q_bar must be D x D");
      if ((c->q_bar.array() < 0.0).any()) bad("q_bar has negative entries");
      for (int i = 0; i < spec.dim; ++i) {
        if (std::abs(c->q_bar.row(i).sum() - 1.0) > 1e-12) bad(fmt::format("row {} does not sum to 1", i));
      }
      if (c->stationary.size() != spec.dim || std::abs(c->stationary.sum() - 1.0) > 1e-12) {
        bad("stationary law must be a distribution over D tokens");
      }
      break;
    }
  }
}

const GaussianParams& gaussian(const SchedulePoint& point) { return std::get<GaussianParams>(point.params); }
double concentration(const SchedulePoint& point) { return std::get<ConcentrationParams>(point.params).value; }
const GammaParams& gamma(const SchedulePoint& point) { return std::get<GammaParams>(point.params); }
const WishartParams& wishart(const SchedulePoint& point) { return std::get<WishartParams>(point.params); }
const CategoricalParams& categorical(const SchedulePoint& point) {
  return std::get<CategoricalParams>(point.params);
}

SchedulePoint stationary_point(const FamilySpec& spec, const SchedulePoint& point) {
  SchedulePoint out = point;
  switch (spec.id) {
    case FamilyId::Gaussian: out.params = GaussianParams{0.0}; break;
    case FamilyId::Beta:
    case FamilyId::Dirichlet:
    case FamilyId::VonMises:
    case FamilyId::VonMisesFisher: out.params = ConcentrationParams{0.0}; break;
    case FamilyId::Gamma: out.params = GammaParams{gamma(point).alpha, 1.0}; break;
    case FamilyId::Wishart: out.params = WishartParams{wishart(point).n, 1.0}; break;
    case FamilyId::Categorical: {
      const auto& c = categorical(point);
      out.params = CategoricalParams{c.stationary.replicate(spec.dim, 1), c.stationary};
      break;
    }
  }
  out.a = tail_coefficient(spec, out.params);
  return out;
}

bool in_domain(const FamilySpec& spec, const Vector& x, double tol) {
  if (x.size() != point_size(spec) || !x.allFinite()) return false;
  switch (spec.id) {
    case FamilyId::Gaussian:
    case FamilyId::VonMises: return true;
    case FamilyId::Beta: return (x.array() >= 0.0).all() && (x.array() <= 1.0).all();
    case FamilyId::Dirichlet:
      return (x.array() >= 0.0).all() && std::abs(x.sum() - 1.0) <= tol;
    case FamilyId::Categorical:
      for (int k = 0; k < spec.tokens; ++k) {
        const auto block = x.segment(k * spec.dim, spec.dim);
        if ((block.array() < 0.0).any() || std::abs(block.sum() - 1.0) > tol) return false;
      }
      return true;
    case FamilyId::VonMisesFisher: return std::abs(x.norm() - 1.0) <= tol;
    case FamilyId::Gamma: return (x.array() > 0.0).all();
    case FamilyId::Wishart: {
      const Matrix m = as_matrix(x, spec.dim);
      const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
      if ((m - m.transpose()).cwiseAbs().maxCoeff() > tol * scale) return false;
      Eigen::SelfAdjointEigenSolver<Matrix> eig(m, Eigen::EigenvaluesOnly);
      return eig.eigenvalues().minCoeff() > 0.0;
    }
  }
  return false;
}

void require_domain(const FamilySpec& spec, const Vector& x, std::string_view what) {
  if (!in_domain(spec, x)) {
    fail(ErrorCode::InvalidInput,
         fmt::format("{} is outside the {} domain", what, to_string(spec.id)));
  }
}

double stat_dot(const Vector& eta, const Vector& stat) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    if (stat[i] != 0.0) s += eta[i] * stat[i];
  }
  return s;
}

Vector natural_params(const FamilySpec& spec, const Vector& x0, const SchedulePoint& point) {
  require_domain(spec, x0, "x0");
  switch (spec.id) {
    case FamilyId::Gaussian:
    case FamilyId::Beta:
    case FamilyId::Dirichlet:
    case FamilyId::VonMisesFisher: return point.a * x0;
    case FamilyId::VonMises: {
      const double kappa = concentration(point);
      Vector eta(2 * spec.dim);
      for (int i = 0; i < spec.dim; ++i) {
        eta[2 * i] = kappa * std::cos(x0[i]);
        eta[2 * i + 1] = kappa * std::sin(x0[i]);
      }
      return eta;
    }
    case FamilyId::Gamma: {
      const auto& g = gamma(point);
      return (-g.alpha * (g.xi + (1.0 - g.xi) / x0.array())).matrix();
    }
    case FamilyId::Wishart: {
      const auto& w = wishart(point);
      return flatten(-0.5 * w.n * wishart_mu(as_matrix(x0, spec.dim), w.xi));
    }
    case FamilyId::Categorical: {
      const Matrix log_q = categorical(point).q_bar.array().log().matrix();
      const int d = spec.dim;
      Vector eta = Vector::Zero(point_size(spec));
      for (int k = 0; k < spec.tokens; ++k) {
        for (int j = 0; j < d; ++j) {
          double s = 0.0;
          for (int i = 0; i < d; ++i) {
            if (x0[k * d + i] != 0.0) s += x0[k * d + i] * log_q(i, j);
          }
          eta[k * d + j] = s;
        }
      }
      return eta;
    }
  }
  return {};
}

Vector sufficient_stat(const FamilySpec& spec, const Vector& x) {
  if (x.size() != point_size(spec)) {
    fail(ErrorCode::Shape, fmt::format("point has {} entries, {} expects {}", x.size(),
                                       to_string(spec.id), point_size(spec)));
  }
  switch (spec.id) {
    case FamilyId::Beta:
    case FamilyId::Dirichlet: {
      const double lo = kBoundaryEps * (1.0 - 1e-6);
      const double hi = 1.0 - lo;
      Vector out(x.size());
      for (Eigen::Index i = 0; i < x.size(); ++i) {
        if (!(x[i] >= lo && (spec.id == FamilyId::Dirichlet || x[i] <= hi))) {
          fail(ErrorCode::DomainBoundary,
               fmt::format("{} statistic diverges at coordinate {} = {}", to_string(spec.id), i, x[i]));
        }
        out[i] = spec.id == FamilyId::Beta ? special::logit(x[i]) : std::log(x[i]);
      }
      return out;
    }
    case FamilyId::VonMises: {
      Vector out(2 * spec.dim);
      for (int i = 0; i < spec.dim; ++i) {
        out[2 * i] = std::cos(x[i]);
        out[2 * i + 1] = std::sin(x[i]);
      }
      return out;
    }
    default: return x;
  }
}

double log_partition(const FamilySpec& spec, const Vector& x0, const SchedulePoint& point) {
  switch (spec.id) {
    case FamilyId::Gaussian: {
      const double ab = gaussian(point).alpha_bar;
      return ab * x0.squaredNorm() / (2.0 * (1.0 - ab));
    }
    case FamilyId::Beta: {
      const double nu = concentration(point);
      double s = 0.0;
      for (Eigen::Index i = 0; i < x0.size(); ++i) {
        s += special::log_beta(1.0 + nu * x0[i], 1.0 + nu * (1.0 - x0[i]));
      }
      return s;
    }
    case FamilyId::Dirichlet: {
      const double nu = concentration(point);
      double s = -special::lgamma(spec.dim + nu);
      for (Eigen::Index i = 0; i < x0.size(); ++i) s += special::lgamma(1.0 + nu * x0[i]);
      return s;
    }
    case FamilyId::Categorical: return 0.0;
    case FamilyId::VonMises: return spec.dim * vm_log_normalizer(concentration(point));
    case FamilyId::VonMisesFisher: return vmf_log_normalizer(spec.dim, concentration(point));
    case FamilyId::Gamma: {
      const auto& g = gamma(point);
      return -g.alpha * (g.xi + (1.0 - g.xi) / x0.array()).log().sum();
    }
    case FamilyId::Wishart: {
      const auto& w = wishart(point);
      return -0.5 * w.n * log_det_spd(w.n * wishart_mu(as_matrix(x0, spec.dim), w.xi));
    }
  }
  return 0.0;
}

double log_base(const FamilySpec& spec, const Vector& x, const SchedulePoint& point) {
  switch (spec.id) {
    case FamilyId::Gaussian: {
      const double v = 1.0 - gaussian(point).alpha_bar;
      return -x.squaredNorm() / (2.0 * v) - 0.5 * spec.dim * (kLog2Pi + std::log(v));
    }
    case FamilyId::Beta: return concentration(point) * (1.0 - x.array()).log().sum();
    case FamilyId::Gamma: {
      const double a = gamma(point).alpha;
      return (a - 1.0) * x.array().log().sum() - spec.dim * special::lgamma(a);
    }
    case FamilyId::Wishart: {
      const double n = wishart(point).n;
      const int p = spec.dim;
      return 0.5 * (n - p - 1.0) * log_det_spd(as_matrix(x, p)) - 0.5 * n * p * std::log(2.0) -
             special::lmvgamma(p, 0.5 * n);
    }
    default: return 0.0;
  }
}

Vector sample_forward(const FamilySpec& spec, const Vector& x0, const SchedulePoint& point, Rng& rng) {
  const int n = point_size(spec);
  if (x0.size() != n) fail(ErrorCode::Shape, "x0 has the wrong size for the family");
  switch (spec.id) {
    case FamilyId::Gaussian: {
      const double ab = gaussian(point).alpha_bar;
      if (ab == 1.0) return x0;
      const double sa = std::sqrt(ab);
      const double sn = std::sqrt(1.0 - ab);
      Vector out(n);
      for (int i = 0; i < n; ++i) out[i] = sa * x0[i] + sn * standard_normal(rng);
      return out;
    }
    case FamilyId::Beta: {
      const double nu = concentration(point);
      Vector out(n);
      for (int i = 0; i < n; ++i) {
        const double ga = gamma_variate(rng, 1.0 + nu * x0[i]);
        const double gb = gamma_variate(rng, 1.0 + nu * (1.0 - x0[i]));
        out[i] = std::clamp(ga / (ga + gb), kBoundaryEps, 1.0 - kBoundaryEps);
      }
      return out;
    }
    case FamilyId::Dirichlet: {
      const double nu = concentration(point);
      Vector out(n);
      for (int i = 0; i < n; ++i) out[i] = gamma_variate(rng, 1.0 + nu * x0[i]);
      out /= out.sum();
      for (int i = 0; i < n; ++i) out[i] = std::max(out[i], kBoundaryEps);
      return out / out.sum();
    }
    case FamilyId::Categorical: {
      const auto& c = categorical(point);
      const int d = spec.dim;
      Vector out = Vector::Zero(n);
      for (int k = 0; k < spec.tokens; ++k) {
        const Eigen::RowVectorXd p = x0.segment(k * d, d).transpose() * c.q_bar;
        const double u = uniform01(rng) * p.sum();
        double acc = 0.0;
        int pick = d - 1;
        for (int j = 0; j < d; ++j) {
          acc += p[j];
          if (u < acc) {
            pick = j;
            break;
          }
        }
        while (p[pick] <= 0.0 && pick > 0) --pick;
        out[k * d + pick] = 1.0;
      }
      return out;
    }
    case FamilyId::VonMises: {
      const double kappa = concentration(point);
      Vector out(n);
      for (int i = 0; i < n; ++i) out[i] = wrap_angle(x0[i] + vm_sample_offset(kappa, rng));
      return out;
    }
    case FamilyId::VonMisesFisher: return vmf_sample(x0, concentration(point), rng);
    case FamilyId::Gamma: {
      const auto& g = gamma(point);
      Vector out(n);
      for (int i = 0; i < n; ++i) {
        const double rate = g.alpha * (g.xi + (1.0 - g.xi) / x0[i]);
        out[i] = std::max(gamma_variate(rng, g.alpha) / rate, std::numeric_limits<double>::min());
      }
      return out;
    }
    case FamilyId::Wishart: {
      const auto& w = wishart(point);
      const Matrix mu = wishart_mu(as_matrix(x0, spec.dim), w.xi);
      const Matrix scale = (w.n * mu).inverse();
      return flatten(wishart_sample(w.n, 0.5 * (scale + scale.transpose()), rng));
    }
  }
  return {};
}

Vector sample_stationary(const FamilySpec& spec, const SchedulePoint& point, Rng& rng) {
  const SchedulePoint stat = stationary_point(spec, point);
  Vector x0;
  switch (spec.id) {
    case FamilyId::Gaussian:
    case FamilyId::VonMises: x0 = Vector::Zero(point_size(spec)); break;
    case FamilyId::Beta: x0 = Vector::Constant(spec.dim, 0.5); break;
    case FamilyId::Dirichlet: x0 = Vector::Constant(spec.dim, 1.0 / spec.dim); break;
    case FamilyId::VonMisesFisher: x0 = Vector::Unit(spec.dim, 0); break;
    case FamilyId::Gamma: x0 = Vector::Ones(spec.dim); break;
    case FamilyId::Wishart: x0 = flatten(Matrix::Identity(spec.dim, spec.dim)); break;
    case FamilyId::Categorical:
      x0 = Vector::Zero(point_size(spec));
      for (int k = 0; k < spec.tokens; ++k) x0[k * spec.dim] = 1.0;
      break;
  }
  return sample_forward(spec, x0, stat, rng);
}

double log_pdf(const FamilySpec& spec, const Vector& x, const Vector& x0, const SchedulePoint& point) {
  double out = 0.0;
  switch (spec.id) {
    case FamilyId::Gaussian: {
      const double ab = gaussian(point).alpha_bar;
      const double v = 1.0 - ab;
      out = -0.5 * spec.dim * (kLog2Pi + std::log(v)) -
            (x - std::sqrt(ab) * x0).squaredNorm() / (2.0 * v);
      break;
    }
    case FamilyId::Beta: {
      const double nu = concentration(point);
      for (int i = 0; i < spec.dim; ++i) {
        const double a = 1.0 + nu * x0[i];
        const double b = 1.0 + nu * (1.0 - x0[i]);
        out += (a - 1.0) * std::log(x[i]) + (b - 1.0) * std::log1p(-x[i]) - special::log_beta(a, b);
      }
      break;
    }
    case FamilyId::Dirichlet: {
      const double nu = concentration(point);
      double asum = 0.0;
      for (int i = 0; i < spec.dim; ++i) {
        const double a = 1.0 + nu * x0[i];
        asum += a;
        out += (a - 1.0) * std::log(x[i]) - special::lgamma(a);
      }
      out += special::lgamma(asum);
      break;
    }
    case FamilyId::Categorical: {
      const auto& c = categorical(point);
      const int d = spec.dim;
      for (int k = 0; k < spec.tokens; ++k) {
        out += categorical_token_prob_log(c, x0, k * d, d, token_of(x, k * d, d));
      }
      break;
    }
    case FamilyId::VonMises: {
      const double kappa = concentration(point);
      for (int i = 0; i < spec.dim; ++i) {
        out += kappa * std::cos(x[i] - x0[i]) - vm_log_normalizer(kappa);
      }
      break;
    }
    case FamilyId::VonMisesFisher: {
      const double kappa = concentration(point);
      out = kappa * x0.dot(x) - vmf_log_normalizer(spec.dim, kappa);
      break;
    }
    case FamilyId::Gamma: {
      const auto& g = gamma(point);
      for (int i = 0; i < spec.dim; ++i) {
        const double rate = g.alpha * (g.xi + (1.0 - g.xi) / x0[i]);
        out += g.alpha * std::log(rate) - special::lgamma(g.alpha) + (g.alpha - 1.0) * std::log(x[i]) -
               rate * x[i];
      }
      break;
    }
    case FamilyId::Wishart: {
      const auto& w = wishart(point);
      const int p = spec.dim;
      const Matrix prec = w.n * wishart_mu(as_matrix(x0, p), w.xi);  // V^{-1}
      const Matrix xm = as_matrix(x, p);
      out = 0.5 * (w.n - p - 1.0) * log_det_spd(xm) - 0.5 * (prec.cwiseProduct(xm)).sum() -
            0.5 * w.n * p * std::log(2.0) + 0.5 * w.n * log_det_spd(prec) -
            special::lmvgamma(p, 0.5 * w.n);
      break;
    }
  }
  if (!std::isfinite(out)) {
    fail(ErrorCode::NumericalOverflow,
         fmt::format("{} log density is not finite at t={}", to_string(spec.id), point.t));
  }
  return out;
}

double entropy(const FamilySpec& spec, const Vector& x0, const SchedulePoint& point) {
  switch (spec.id) {
    case FamilyId::Gaussian:
      return 0.5 * spec.dim * (kLog2Pi + 1.0 + std::log(1.0 - gaussian(point).alpha_bar));
    case FamilyId::Beta: {
      const double nu = concentration(point);
      double h = 0.0;
      for (int i = 0; i < spec.dim; ++i) {
        const double a = 1.0 + nu * x0[i];
        const double b = 1.0 + nu * (1.0 - x0[i]);
        h += special::log_beta(a, b) - (a - 1.0) * special::digamma(a) -
             (b - 1.0) * special::digamma(b) + (a + b - 2.0) * special::digamma(a + b);
      }
      return h;
    }
    case FamilyId::Dirichlet: {
      const double nu = concentration(point);
      const double a0 = spec.dim + nu;
      double h = -special::lgamma(a0) + (a0 - spec.dim) * special::digamma(a0);
      for (int i = 0; i < spec.dim; ++i) {
        const double a = 1.0 + nu * x0[i];
        h += special::lgamma(a) - (a - 1.0) * special::digamma(a);
      }
      return h;
    }
    case FamilyId::Categorical: {
      const auto& c = categorical(point);
      const int d = spec.dim;
      double h = 0.0;
      for (int k = 0; k < spec.tokens; ++k) {
        const Eigen::RowVectorXd p = x0.segment(k * d, d).transpose() * c.q_bar;
        for (int j = 0; j < d; ++j) {
          if (p[j] > 0.0) h -= p[j] * std::log(p[j]);
        }
      }
      return h;
    }
    case FamilyId::VonMises: {
      const double kappa = concentration(point);
      return spec.dim * (vm_log_normalizer(kappa) - kappa * special::bessel_ratio(1.0, kappa));
    }
    case FamilyId::VonMisesFisher: {
      const double kappa = concentration(point);
      return vmf_log_normalizer(spec.dim, kappa) -
             kappa * special::bessel_ratio(0.5 * spec.dim, kappa);
    }
    case FamilyId::Gamma: {
      const auto& g = gamma(point);
      double h = 0.0;
      for (int i = 0; i < spec.dim; ++i) {
        const double rate = g.alpha * (g.xi + (1.0 - g.xi) / x0[i]);
        h += g.alpha - std::log(rate) + special::lgamma(g.alpha) +
             (1.0 - g.alpha) * special::digamma(g.alpha);
      }
      return h;
    }
    case FamilyId::Wishart: {
      const auto& w = wishart(point);
      const int p = spec.dim;
      const double log_det_v = -log_det_spd(w.n * wishart_mu(as_matrix(x0, p), w.xi));
      double psi_p = 0.0;
      for (int j = 0; j < p; ++j) psi_p += special::digamma(0.5 * (w.n - j));
      return 0.5 * (p + 1.0) * log_det_v + 0.5 * p * (p + 1.0) * std::log(2.0) +
             special::lmvgamma(p, 0.5 * w.n) - 0.5 * (w.n - p - 1.0) * psi_p + 0.5 * w.n * p;
    }
  }
  return 0.0;
}

double kl_step(const FamilySpec& spec, const Vector& x0, const Vector& x_pred, const SchedulePoint& point) {
  double kl = 0.0;
  switch (spec.id) {
    case FamilyId::Gaussian: {
      const double ab = gaussian(point).alpha_bar;
      kl = ab * (x_pred - x0).squaredNorm() / (2.0 * (1.0 - ab));
      break;
    }
    case FamilyId::Beta:
    case FamilyId::Dirichlet: {
      const double nu = concentration(point);
      for (Eigen::Index i = 0; i < x0.size(); ++i) {
        kl += lgamma_bregman(1.0 + nu * x0[i], 1.0 + nu * x_pred[i]);
        if (spec.id == FamilyId::Beta) {
          kl += lgamma_bregman(1.0 + nu * (1.0 - x0[i]), 1.0 + nu * (1.0 - x_pred[i]));
        }
      }
      break;
    }
    case FamilyId::Categorical: {
      const auto& c = categorical(point);
      const int d = spec.dim;
      for (int k = 0; k < spec.tokens; ++k) {
        const Eigen::RowVectorXd p0 = x0.segment(k * d, d).transpose() * c.q_bar;
        const Eigen::RowVectorXd pp = x_pred.segment(k * d, d).transpose() * c.q_bar;
        for (int j = 0; j < d; ++j) {
          if (p0[j] > 0.0) kl += p0[j] * std::log(p0[j] / pp[j]) - p0[j] + pp[j];
          else kl += pp[j];
        }
      }
      break;
    }
    case FamilyId::VonMises: {
      const double kappa = concentration(point);
      const double coef = kappa * special::bessel_ratio(1.0, kappa);
      for (int i = 0; i < spec.dim; ++i) {
        const double s = std::sin(0.5 * (x0[i] - x_pred[i]));
        kl += coef * 2.0 * s * s;
      }
      break;
    }
    case FamilyId::VonMisesFisher: {
      const double kappa = concentration(point);
      kl = kappa * special::bessel_ratio(0.5 * spec.dim, kappa) * 0.5 * (x0 - x_pred).squaredNorm();
      break;
    }
    case FamilyId::Gamma: {
      const auto& g = gamma(point);
      for (int i = 0; i < spec.dim; ++i) {
        const double b0 = g.xi + (1.0 - g.xi) / x0[i];
        const double bp = g.xi + (1.0 - g.xi) / x_pred[i];
        kl += g.alpha * log_bregman(bp / b0);
      }
      break;
    }
    case FamilyId::Wishart: {
      const auto& w = wishart(point);
      const int p = spec.dim;
      const Matrix mu0 = wishart_mu(as_matrix(x0, p), w.xi);
      const Matrix mup = wishart_mu(as_matrix(x_pred, p), w.xi);
      Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> ges(0.5 * (mup + mup.transpose()),
                                                          0.5 * (mu0 + mu0.transpose()),
                                                          Eigen::EigenvaluesOnly);
      for (Eigen::Index i = 0; i < ges.eigenvalues().size(); ++i) kl += log_bregman(ges.eigenvalues()[i]);
      kl *= 0.5 * w.n;
      break;
    }
  }
  check_kl(kl, to_string(spec.id));
  return kl;
}

Vector kl_grad_pred(const FamilySpec& spec, const Vector& x0, const Vector& x_pred,
                    const SchedulePoint& point) {
  const int n = point_size(spec);
  Vector g = Vector::Zero(n);
  switch (spec.id) {
    case FamilyId::Gaussian: {
      const double ab = gaussian(point).alpha_bar;
      g = ab / (1.0 - ab) * (x_pred - x0);
      break;
    }
    case FamilyId::Beta: {
      const double nu = concentration(point);
      for (int i = 0; i < n; ++i) {
        g[i] = nu * (special::digamma(1.0 + nu * x_pred[i]) - special::digamma(1.0 + nu * (1.0 - x_pred[i])) -
                     special::digamma(1.0 + nu * x0[i]) + special::digamma(1.0 + nu * (1.0 - x0[i])));
      }
      break;
    }
    case FamilyId::Dirichlet: {
      const double nu = concentration(point);
      for (int i = 0; i < n; ++i) {
        g[i] = nu * (special::digamma(1.0 + nu * x_pred[i]) - special::digamma(1.0 + nu * x0[i]));
      }
      break;
    }
    case FamilyId::Categorical: {
      const auto& c = categorical(point);
      const int d = spec.dim;
      for (int k = 0; k < spec.tokens; ++k) {
        const Eigen::RowVectorXd p0 = x0.segment(k * d, d).transpose() * c.q_bar;
        const Eigen::RowVectorXd pp = x_pred.segment(k * d, d).transpose() * c.q_bar;
        for (int j = 0; j < d; ++j) {
          double s = 0.0;
          for (int i = 0; i < d; ++i) {
            s += c.q_bar(j, i) * (1.0 - (p0[i] > 0.0 ? p0[i] / pp[i] : 0.0));
          }
          g[k * d + j] = s;
        }
      }
      break;
    }
    case FamilyId::VonMises: {
      const double kappa = concentration(point);
      const double coef = kappa * special::bessel_ratio(1.0, kappa);
      for (int i = 0; i < n; ++i) g[i] = -coef * std::sin(x0[i] - x_pred[i]);
      break;
    }
    case FamilyId::VonMisesFisher: {
      const double kappa = concentration(point);
      g = kappa * special::bessel_ratio(0.5 * spec.dim, kappa) * (x_pred - x0);
      break;
    }
    case FamilyId::Gamma: {
      const auto& gm = gamma(point);
      for (int i = 0; i < n; ++i) {
        const double b0 = gm.alpha * (gm.xi + (1.0 - gm.xi) / x0[i]);
        const double bp = gm.alpha * (gm.xi + (1.0 - gm.xi) / x_pred[i]);
        const double dkl_dbp = gm.alpha * (1.0 / b0 - 1.0 / bp);
        g[i] = dkl_dbp * (-gm.alpha * (1.0 - gm.xi) / (x_pred[i] * x_pred[i]));
      }
      break;
    }
    case FamilyId::Wishart: {
      const auto& w = wishart(point);
      const int p = spec.dim;
      const Matrix xp_inv = as_matrix(x_pred, p).inverse();
      const Matrix mu0 = wishart_mu(as_matrix(x0, p), w.xi);
      const Matrix mup = w.xi * Matrix::Identity(p, p) + (1.0 - w.xi) * xp_inv;
      const Matrix dmu = 0.5 * w.n * (mu0.inverse() - mup.inverse());
      g = flatten(-(1.0 - w.xi) * xp_inv * dmu * xp_inv);
      break;
    }
  }
  return g;
}

Vector map_to_domain(const FamilySpec& spec, const Vector& raw) {
  if (raw.size() != raw_size(spec)) {
    fail(ErrorCode::Shape, fmt::format("{} head expects {} raw values, got {}", to_string(spec.id),
                                       raw_size(spec), raw.size()));
  }
  switch (spec.id) {
    case FamilyId::Gaussian: return raw;
    case FamilyId::Beta: return raw.unaryExpr([](double r) { return special::sigmoid(r); });
    case FamilyId::Dirichlet: return softmax_block(raw, 0, spec.dim);
    case FamilyId::Categorical: {
      Vector out(raw.size());
      for (int k = 0; k < spec.tokens; ++k) out.segment(k * spec.dim, spec.dim) = softmax_block(raw, k * spec.dim, spec.dim);
      return out;
    }
    case FamilyId::VonMises: return raw.unaryExpr([](double r) { return 2.0 * std::atan(r); });
    case FamilyId::VonMisesFisher: {
      const double n = raw.norm();
      if (!(n > 1e-300)) fail(ErrorCode::DegenerateDirection, "cannot normalize a zero-norm direction");
      return raw / n;
    }
    case FamilyId::Gamma:
      return raw.unaryExpr([](double r) { return std::clamp(std::exp(r), kGammaHeadMin, kGammaHeadMax); });
    case FamilyId::Wishart: {
      const int p = spec.dim;
      Matrix l = Matrix::Zero(p, p);
      int k = 0;
      for (int i = 0; i < p; ++i) {
        for (int j = 0; j <= i; ++j) l(i, j) = raw[k++];
      }
      return flatten(l * l.transpose() + kWishartJitter * Matrix::Identity(p, p));
    }
  }
  return {};
}

Vector map_to_domain_vjp(const FamilySpec& spec, const Vector& raw, const Vector& upstream) {
  switch (spec.id) {
    case FamilyId::Gaussian: return upstream;
    case FamilyId::Beta: {
      Vector g(raw.size());
      for (Eigen::Index i = 0; i < raw.size(); ++i) {
        const double s = special::sigmoid(raw[i]);
        g[i] = s * (1.0 - s) * upstream[i];
      }
      return g;
    }
    case FamilyId::Dirichlet:
    case FamilyId::Categorical: {
      const int d = spec.dim;
      const int blocks = spec.id == FamilyId::Dirichlet ? 1 : spec.tokens;
      Vector g(raw.size());
      for (int k = 0; k < blocks; ++k) {
        const Vector s = softmax_block(raw, k * d, d);
        const auto up = upstream.segment(k * d, d);
        g.segment(k * d, d) = s.cwiseProduct(up - Vector::Constant(d, s.dot(up)));
      }
      return g;
    }
    case FamilyId::VonMises: {
      Vector g(raw.size());
      for (Eigen::Index i = 0; i < raw.size(); ++i) g[i] = 2.0 / (1.0 + raw[i] * raw[i]) * upstream[i];
      return g;
    }
    case FamilyId::VonMisesFisher: {
      const double n = raw.norm();
      if (!(n > 1e-300)) fail(ErrorCode::DegenerateDirection, "cannot normalize a zero-norm direction");
      const Vector y = raw / n;
      return (upstream - y * y.dot(upstream)) / n;
    }
    case FamilyId::Gamma: {
      Vector g(raw.size());
      for (Eigen::Index i = 0; i < raw.size(); ++i) {
        const double e = std::exp(raw[i]);
        g[i] = (e > kGammaHeadMin && e < kGammaHeadMax) ? e * upstream[i] : 0.0;
      }
      return g;
    }
    case FamilyId::Wishart: {
      const int p = spec.dim;
      Matrix l = Matrix::Zero(p, p);
      int k = 0;
      for (int i = 0; i < p; ++i) {
        for (int j = 0; j <= i; ++j) l(i, j) = raw[k++];
      }
      const Matrix u = as_matrix(upstream, p);
      const Matrix dl = (u + u.transpose()) * l;
      Vector g(raw.size());
      k = 0;
      for (int i = 0; i < p; ++i) {
        for (int j = 0; j <= i; ++j) g[k++] = dl(i, j);
      }
      return g;
    }
  }
  return {};
}

}  // namespace ssdiff::exp_family
