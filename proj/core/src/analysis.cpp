#include "ssdiff/analysis.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <numbers>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "ssdiff/error.hpp"
#include "ssdiff/io.hpp"
#include "ssdiff/knn.hpp"
#include "ssdiff/log.hpp"
#include "ssdiff/nnet.hpp"
#include "ssdiff/parallel.hpp"
#include "ssdiff/special.hpp"

namespace ssdiff::analysis {

using exp_family::FamilyId;
using nlohmann::json;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double normal_entropy(double var) { return 0.5 * std::log(kTwoPi * std::numbers::e * var); }

double normal_log_pdf(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * std::log(kTwoPi * var) - d * d / (2.0 * var);
}

void check_open_unit(std::span<const double> ab, const char* what) {
  if (ab.empty()) throw Error(ErrorCode::InvalidInput, fmt::format("{} schedule is empty", what));
  for (std::size_t i = 0; i < ab.size(); ++i) {
    if (!(ab[i] > 0.0 && ab[i] < 1.0)) {
      throw Error(ErrorCode::DomainBoundary, fmt::format("{} alpha_bar at t={} is {}, outside (0, 1)", what, i + 1, ab[i]));
    }
  }
}

double odds(double ab) { return ab / (1.0 - ab); }

double relative_gap(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(a)); }

}  // namespace

// ---------------------------------------------------------------------------
// Markov gap
// ---------------------------------------------------------------------------

GapReport markov_gap_gaussian(std::span<const double> ab) {
  check_open_unit(ab, "star-shaped");
  const int T = static_cast<int>(ab.size());
  const auto prev = [&](int t) { return t == 1 ? 1.0 : ab[t - 2]; };

  GapReport r;
  r.T = T;
  r.h_x0 = normal_entropy(1.0);
  r.h_xT = normal_entropy(1.0);
  r.h_joint = r.h_x0;
  double cond = 0.0;  // sum_t H[q(x_t | x0)]
  for (int t = 1; t <= T; ++t) {
    cond += normal_entropy(1.0 - ab[t - 1]);
    r.markov_penalty += 0.5 * (1.0 + std::log(kTwoPi * (1.0 - prev(t) * ab[t - 1])));
  }
  r.h_joint += cond;
  r.l_star = -r.h_x0;
  r.l_markov = -r.h_x0 + r.h_joint - r.h_xT - r.markov_penalty;
  r.gap = r.l_star - r.l_markov;

  // Chain rule: H[x_{0:T}] = H[x_T] + sum_t H[x_{t-1} | x_{t:T}], where x0 | x_{t:T}
  // has variance v_t = 1 / (1 + sum_{s>=t} odds_s).
  double h_chain = r.h_xT;
  double precision = 1.0;
  for (int t = T; t >= 1; --t) {
    precision += odds(ab[t - 1]);
    const double v = 1.0 / precision;
    const double a = prev(t);
    h_chain += normal_entropy(t == 1 ? v : a * v + 1.0 - a);
  }
  r.l_star_chain = -h_chain + cond;
  return r;
}

GapEstimate markov_gap_mc(std::span<const double> ab, long n, std::uint64_t seed) {
  check_open_unit(ab, "star-shaped");
  if (n < 2) throw Error(ErrorCode::InvalidInput, "gap Monte Carlo needs n >= 2");
  const int T = static_cast<int>(ab.size());
  constexpr long kChunk = 10'000;
  const std::size_t chunks = static_cast<std::size_t>((n + kChunk - 1) / kChunk);
  std::vector<double> sums(chunks, 0.0), squares(chunks, 0.0);
  parallel_for(chunks, [&](std::size_t c) {
    Rng rng = make_stream(seed, c);
    const long begin = static_cast<long>(c) * kChunk;
    const long end = std::min(n, begin + kChunk);
    std::vector<double> x(static_cast<std::size_t>(T + 1));
    for (long i = begin; i < end; ++i) {
      x[0] = standard_normal(rng);
      for (int t = 1; t <= T; ++t) {
        x[t] = std::sqrt(ab[t - 1]) * x[0] + std::sqrt(1.0 - ab[t - 1]) * standard_normal(rng);
      }
      double total = 0.0;
      double precision = 1.0;
      double weighted = 0.0;
      for (int t = T; t >= 1; --t) {
        const double a_t = ab[t - 1];
        precision += odds(a_t);
        weighted += std::sqrt(a_t) * x[t] / (1.0 - a_t);
        const double m = weighted / precision;
        const double a_prev = t == 1 ? 1.0 : ab[t - 2];
        const double lp_tail = normal_log_pdf(x[t - 1], std::sqrt(a_prev) * m, a_prev / precision + 1.0 - a_prev);
        const double lp_markov =
            normal_log_pdf(x[t - 1], std::sqrt(a_prev * a_t) * x[t], 1.0 - a_prev * a_t);
        total += lp_tail - lp_markov;
      }
      sums[c] += total;
      squares[c] += total * total;
    }
  });
  const double s = std::accumulate(sums.begin(), sums.end(), 0.0);
  const double ss = std::accumulate(squares.begin(), squares.end(), 0.0);
  const double nn = static_cast<double>(n);
  GapEstimate e;
  e.n = n;
  e.gap = s / nn;
  e.se = std::sqrt(std::max(0.0, ss / nn - e.gap * e.gap) / (nn - 1.0));
  return e;
}

// ---------------------------------------------------------------------------
// Equivalence report
// ---------------------------------------------------------------------------

EquivalenceReport gaussian_equivalence_report(std::span<const double> ab_ddpm, long n_mc,
                                              const EquivalenceOptions& options) {
  check_open_unit(ab_ddpm, "DDPM");
  if (n_mc < 2) throw Error(ErrorCode::InvalidInput, "equivalence report needs n_mc >= 2");
  const int T = static_cast<int>(ab_ddpm.size());
  const NoiseSchedule ss =
      schedule::gaussian_schedule(schedule::ddpm_to_ss_gaussian(ab_ddpm), 1, schedule::Provenance::AnalyticTransform);
  EquivalenceReport r;
  r.T = T;
  r.n_mc = n_mc;

  // (a) forward moments of G_t | x0.
  std::vector<int> ts = options.check_t;
  if (ts.empty()) ts = {1, std::max(1, T / 2), T};
  for (int t : ts) {
    if (t < 1 || t > T) throw Error(ErrorCode::Step, fmt::format("forward check step {} outside 1..{}", t, T));
  }
  const Vector x0 = Vector::Constant(1, options.x0);
  constexpr long kChunk = 5'000;
  const std::size_t chunks = static_cast<std::size_t>((n_mc + kChunk - 1) / kChunk);
  std::vector<std::vector<double>> s1(chunks, std::vector<double>(ts.size(), 0.0));
  std::vector<std::vector<double>> s2 = s1;
  parallel_for(chunks, [&](std::size_t c) {
    Rng rng = make_stream(options.seed, c);
    const long begin = static_cast<long>(c) * kChunk;
    const long end = std::min(n_mc, begin + kChunk);
    for (long i = begin; i < end; ++i) {
      const std::vector<Vector> g = tail::sample_all_tails(ss, x0, rng);
      for (std::size_t j = 0; j < ts.size(); ++j) {
        const double v = g[static_cast<std::size_t>(ts[j] - 1)][0];
        s1[c][j] += v;
        s2[c][j] += v * v;
      }
    }
  });
  const double n = static_cast<double>(n_mc);
  for (std::size_t j = 0; j < ts.size(); ++j) {
    double a = 0.0, b = 0.0;
    for (std::size_t c = 0; c < chunks; ++c) {
      a += s1[c][j];
      b += s2[c][j];
    }
    ForwardCheck f;
    f.t = ts[j];
    f.mean = a / n;
    f.variance = (b - n * f.mean * f.mean) / (n - 1.0);
    const double abt = ab_ddpm[static_cast<std::size_t>(f.t - 1)];
    f.expected_mean = std::sqrt(abt) * options.x0;
    f.expected_variance = 1.0 - abt;
    f.z_mean = std::abs(f.mean - f.expected_mean) / std::sqrt(f.expected_variance / n);
    f.z_variance = std::abs(f.variance - f.expected_variance) / (f.expected_variance * std::sqrt(2.0 / (n - 1.0)));
    r.forward_max_z = std::max({r.forward_max_z, f.z_mean, f.z_variance});
    r.forward.push_back(f);
  }

  // (b) KL-term identity and (c) reverse moments on random triples.
  Rng rng = make_stream(options.seed, 0xb0b);
  const exp_family::FamilySpec spec{FamilyId::Gaussian, 1, 1};
  for (int t = 2; t <= T; ++t) {
    const double a_t = ab_ddpm[t - 1];
    const double a_prev = ab_ddpm[t - 2];
    const double alpha_t = a_t / a_prev;
    const double beta_t = 1.0 - alpha_t;
    const double beta_tilde = (1.0 - a_prev) / (1.0 - a_t) * beta_t;
    const double c0 = std::sqrt(a_prev) * beta_t / (1.0 - a_t);
    const double ct = std::sqrt(alpha_t) * (1.0 - a_prev) / (1.0 - a_t);
    const int t_skip = std::max(1, t / 2);
    for (int i = 0; i < options.n_pairs; ++i) {
      const double x0v = 2.0 * standard_normal(rng);
      const double xh = 2.0 * standard_normal(rng);
      const double xt = standard_normal(rng) * 3.0;

      const double left = exp_family::kl_step(spec, Vector::Constant(1, x0v), Vector::Constant(1, xh), ss.at(t - 1));
      const double mu_true = c0 * x0v + ct * xt;
      const double mu_pred = c0 * xh + ct * xt;
      const double right = (mu_true - mu_pred) * (mu_true - mu_pred) / (2.0 * beta_tilde);
      r.kl_identity_max = std::max(r.kl_identity_max, relative_gap(left, right));

      const engine::GaussianMoments step = engine::gaussian_tail_transition(ss, t, t - 1, xt, xh);
      r.reverse_max = std::max(r.reverse_max, relative_gap(mu_pred, step.mean));
      r.reverse_max = std::max(r.reverse_max, relative_gap(beta_tilde, step.variance));

      // Multi-step skip t -> t_skip with x0_hat frozen.
      if (t_skip < t - 1) {
        const double a1 = ab_ddpm[t_skip - 1];
        const double mean = std::sqrt(a1) * (1.0 - a_t / a1) / (1.0 - a_t) * xh +
                            std::sqrt(a_t / a1) * (1.0 - a1) / (1.0 - a_t) * xt;
        const double var = (1.0 - a1) * (a1 - a_t) / ((1.0 - a_t) * a1);
        const engine::GaussianMoments skip = engine::gaussian_tail_transition(ss, t, t_skip, xt, xh);
        r.reverse_max = std::max(r.reverse_max, relative_gap(mean, skip.mean));
        r.reverse_max = std::max(r.reverse_max, relative_gap(var, skip.variance));
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Coordinate maps and kNN divergence
// ---------------------------------------------------------------------------

namespace {

double wrap(double a) { return std::remainder(a, 2.0 * std::numbers::pi); }

}  // namespace

CoordinateMap make_coordinate_map(const FamilySpec& spec, const Matrix& reference) {
  exp_family::validate(spec);
  if (spec.id == FamilyId::Categorical) {
    throw Error(ErrorCode::UnsupportedFamily, "categorical data has no continuous coordinates for kNN divergence");
  }
  if (reference.cols() != exp_family::point_size(spec) || reference.rows() < 1) {
    throw Error(ErrorCode::Shape, fmt::format("reference rows have {} columns, expected {}", reference.cols(),
                                              exp_family::point_size(spec)));
  }
  CoordinateMap map;
  map.spec = spec;
  if (spec.id == FamilyId::VonMisesFisher) {
    const Vector mean = reference.colwise().mean().transpose();
    Vector pole = mean.norm() > 1e-12 ? Vector(-mean.normalized()) : Vector(-Vector::Unit(spec.dim, spec.dim - 1));
    const Matrix q = Eigen::HouseholderQR<Matrix>(pole).householderQ();
    map.pole = pole;
    map.basis = q.rightCols(spec.dim - 1);
  } else if (spec.id == FamilyId::VonMises) {
    map.mean_angle.resize(spec.dim);
    for (int j = 0; j < spec.dim; ++j) {
      map.mean_angle[j] = std::atan2(reference.col(j).array().sin().sum(), reference.col(j).array().cos().sum());
    }
  }
  return map;
}

Matrix to_unconstrained(const CoordinateMap& map, const Matrix& rows) {
  const FamilySpec& spec = map.spec;
  const Eigen::Index n = rows.rows();
  const double tiny = std::numeric_limits<double>::min();
  switch (spec.id) {
    case FamilyId::Gaussian: return rows;
    case FamilyId::Beta: {
      Matrix out(n, rows.cols());
      for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < rows.cols(); ++j) {
          const double x = rows(i, j);
          out(i, j) = std::log(std::max(x, tiny)) - std::log(std::max(1.0 - x, tiny));
        }
      }
      return out;
    }
    case FamilyId::Gamma: return rows.array().max(tiny).log().matrix();
    case FamilyId::Dirichlet: {
      const int d = spec.dim;
      Matrix out(n, d - 1);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double last = std::log(std::max(rows(i, d - 1), tiny));
        for (int j = 0; j + 1 < d; ++j) out(i, j) = std::log(std::max(rows(i, j), tiny)) - last;
      }
      return out;
    }
    case FamilyId::VonMisesFisher: {
      Matrix out(n, spec.dim - 1);
      for (Eigen::Index i = 0; i < n; ++i) {
        const Vector x = rows.row(i).transpose();
        const double denom = std::max(1.0 - x.dot(map.pole), 1e-300);
        out.row(i) = (map.basis.transpose() * x / denom).transpose();
      }
      return out;
    }
    case FamilyId::VonMises: {
      Matrix out(n, spec.dim);
      for (Eigen::Index i = 0; i < n; ++i) {
        for (int j = 0; j < spec.dim; ++j) out(i, j) = std::tan(0.5 * wrap(rows(i, j) - map.mean_angle[j]));
      }
      return out;
    }
    case FamilyId::Wishart: {
      const int p = spec.dim;
      Matrix out(n, p * (p + 1) / 2);
      for (Eigen::Index i = 0; i < n; ++i) {
        const Matrix m = Eigen::Map<const Matrix>(Vector(rows.row(i).transpose()).data(), p, p);
        Eigen::LLT<Matrix> llt(0.5 * (m + m.transpose()));
        if (llt.info() != Eigen::Success) {
          throw Error(ErrorCode::DomainBoundary, fmt::format("row {} is not positive definite", i));
        }
        const Matrix l = llt.matrixL();
        int k = 0;
        for (int a = 0; a < p; ++a) {
          for (int b = 0; b <= a; ++b, ++k) out(i, k) = a == b ? std::log(l(a, a)) : l(a, b);
        }
      }
      return out;
    }
    case FamilyId::Categorical: break;
  }
  throw Error(ErrorCode::UnsupportedFamily, "categorical data has no continuous coordinates for kNN divergence");
}

KlEstimate knn_kl_divergence(const Matrix& p_in, const Matrix& q_in, int k, std::uint64_t jitter_seed) {
  if (k < 1) throw Error(ErrorCode::InvalidInput, "k must be >= 1");
  if (p_in.cols() != q_in.cols() || p_in.cols() < 1) {
    throw Error(ErrorCode::Shape, fmt::format("sample sets have dimensions {} and {}", p_in.cols(), q_in.cols()));
  }
  if (p_in.rows() < k + 1 || q_in.rows() < k) {
    throw Error(ErrorCode::InvalidInput, fmt::format("need more than k = {} samples in each set", k));
  }
  if (!p_in.allFinite() || !q_in.allFinite()) throw Error(ErrorCode::NumericalOverflow, "non-finite sample coordinates");

  knn::PointMatrix p = p_in;
  knn::PointMatrix q = q_in;
  const Eigen::Index n = p.rows();
  const Eigen::Index m = q.rows();
  const int d = static_cast<int>(p.cols());
  KlEstimate e;
  e.n = n;
  e.m = m;
  e.dim = d;

  const auto distances = [&](const knn::PointMatrix& pp, const knn::PointMatrix& qq, std::vector<double>& rho,
                             std::vector<double>& nu) {
    const knn::KdTree tp(pp, knn::Metric::Euclidean);
    const knn::KdTree tq(qq, knn::Metric::Euclidean);
    rho.assign(static_cast<std::size_t>(n), 0.0);
    nu.assign(static_cast<std::size_t>(n), 0.0);
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
      const double* x = pp.row(static_cast<Eigen::Index>(i)).data();
      rho[i] = tp.kth_distance(x, k, static_cast<Eigen::Index>(i));
      nu[i] = tq.kth_distance(x, k);
    });
  };

  std::vector<double> rho, nu;
  distances(p, q, rho, nu);
  const auto degenerate = [&] {
    for (std::size_t i = 0; i < rho.size(); ++i) {
      if (!(rho[i] > 0.0) || !(nu[i] > 0.0)) return true;
    }
    return false;
  };
  if (degenerate()) {
    // Duplicated points make the log-distance ratio undefined; break ties.
    Rng rng = make_stream(jitter_seed, 0);
    Eigen::RowVectorXd scale(d);
    for (int j = 0; j < d; ++j) {
      const double range = std::max(p.col(j).maxCoeff() - p.col(j).minCoeff(), q.col(j).maxCoeff() - q.col(j).minCoeff());
      scale[j] = 1e-9 * std::max(range, 1e-12);
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) p(i, j) += scale[j] * standard_normal(rng);
    }
    for (Eigen::Index i = 0; i < m; ++i) {
      for (int j = 0; j < d; ++j) q(i, j) += scale[j] * standard_normal(rng);
    }
    log::warn("kNN divergence: duplicate points found, jittering both sample sets");
    e.jittered = true;
    distances(p, q, rho, nu);
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < rho.size(); ++i) acc += std::log(nu[i] / rho[i]);
  e.nats = static_cast<double>(d) / static_cast<double>(n) * acc +
           std::log(static_cast<double>(m) / static_cast<double>(n - 1));
  return e;
}

namespace {

Matrix valid_rows(const FamilySpec& spec, const Matrix& rows, const char* what) {
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    if (exp_family::in_domain(spec, rows.row(i).transpose())) keep.push_back(i);
  }
  if (static_cast<Eigen::Index>(keep.size()) != rows.rows()) {
    log::warn(fmt::format("kl_to_data: dropped {} of {} {} rows outside the domain", rows.rows() - keep.size(),
                          rows.rows(), what));
  }
  Matrix out(static_cast<Eigen::Index>(keep.size()), rows.cols());
  for (std::size_t i = 0; i < keep.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = rows.row(keep[i]);
  return out;
}

}  // namespace

KlEstimate kl_to_data(const FamilySpec& spec, const Matrix& model_samples, const Matrix& data_samples, int k) {
  exp_family::validate(spec);
  if (spec.id == FamilyId::Categorical) {
    throw Error(ErrorCode::UnsupportedFamily, "kl_to_data is not defined for categorical data");
  }
  const int cols = exp_family::point_size(spec);
  if (model_samples.cols() != cols || data_samples.cols() != cols) {
    throw Error(ErrorCode::Shape, fmt::format("sample sets must have {} columns", cols));
  }
  const Matrix model = valid_rows(spec, model_samples, "model");
  const Matrix data = valid_rows(spec, data_samples, "data");
  if (model.rows() < kMinKlSamples || data.rows() < kMinKlSamples) {
    throw Error(ErrorCode::InvalidInput, fmt::format("kl_to_data needs at least {} valid samples per set (got {} model, {} data)",
                                                     kMinKlSamples, model.rows(), data.rows()));
  }
  const CoordinateMap map = make_coordinate_map(spec, data);
  return knn_kl_divergence(to_unconstrained(map, data), to_unconstrained(map, model), k);
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

namespace {

constexpr std::array<std::string_view, 6> kExperimentIds = {"dirichlet_simplex", "wishart_pd",  "vmf_sphere",
                                                            "gaussian_sanity",   "beta_toyimage", "categorical_toytext"};

using Sampler = std::function<Vector(Rng&)>;

struct Generator {
  FamilySpec spec;
  std::vector<double> weights;
  std::vector<Sampler> samplers;
  std::vector<MixtureComponent> modes;
  Sampler whole;  // used instead of the mixture when set
};

Vector unit_from_lat_lon(double lat_deg, double lon_deg) {
  const double lat = lat_deg * std::numbers::pi / 180.0;
  const double lon = lon_deg * std::numbers::pi / 180.0;
  Vector v(3);
  v << std::cos(lat) * std::cos(lon), std::cos(lat) * std::sin(lon), std::sin(lat);
  return v;
}

Vector flatten(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

// Mixture whose components are forward kernels of the family around `center`.
void add_kernel_component(Generator& g, double weight, const Vector& center, const exp_family::SchedulePoint& point) {
  const FamilySpec spec = g.spec;
  g.weights.push_back(weight);
  g.samplers.push_back([spec, center, point](Rng& rng) { return exp_family::sample_forward(spec, center, point, rng); });
  g.modes.push_back({weight, center, [spec, center, point](const Vector& x) {
                       return exp_family::log_pdf(spec, x, center, point);
                     }});
}

Generator make_generator(std::string_view id) {
  Generator g;
  if (id == "dirichlet_simplex") {
    g.spec = {FamilyId::Dirichlet, 3, 1};
    const std::array<std::array<double, 3>, 3> means = {{{0.6, 0.3, 0.1}, {0.1, 0.6, 0.3}, {0.25, 0.15, 0.6}}};
    const std::array<double, 3> conc = {30.0, 15.0, 40.0};
    const std::array<double, 3> w = {0.3, 0.3, 0.4};
    for (int k = 0; k < 3; ++k) {
      add_kernel_component(g, w[k], Eigen::Map<const Vector>(means[k].data(), 3),
                           exp_family::make_point(g.spec, 0, exp_family::ConcentrationParams{conc[k]}));
    }
  } else if (id == "wishart_pd") {
    g.spec = {FamilyId::Wishart, 2, 1};
    Matrix m1(2, 2), m2(2, 2), m3(2, 2);
    m1 << 1.0, 0.6, 0.6, 1.0;
    m2 << 0.5, -0.3, -0.3, 0.5;
    m3 << 2.0, 0.0, 0.0, 0.3;
    const std::array<Matrix, 3> means = {m1, m2, m3};
    const std::array<double, 3> dof = {20.0, 15.0, 30.0};
    for (int k = 0; k < 3; ++k) {
      // xi = 0 makes the forward kernel W(n, center / n), whose mean is the center.
      add_kernel_component(g, 1.0 / 3.0, flatten(means[k]),
                           exp_family::make_point(g.spec, 0, exp_family::WishartParams{dof[k], 0.0}));
    }
  } else if (id == "vmf_sphere") {
    g.spec = {FamilyId::VonMisesFisher, 3, 1};
    const std::array<std::array<double, 2>, 3> centers = {{{40.0, -100.0}, {-10.0, 20.0}, {60.0, 100.0}}};
    const std::array<double, 3> kappa = {40.0, 60.0, 25.0};
    const std::array<double, 3> w = {0.4, 0.35, 0.25};
    for (int k = 0; k < 3; ++k) {
      add_kernel_component(g, w[k], unit_from_lat_lon(centers[k][0], centers[k][1]),
                           exp_family::make_point(g.spec, 0, exp_family::ConcentrationParams{kappa[k]}));
    }
  } else if (id == "gaussian_sanity") {
    g.spec = {FamilyId::Gaussian, 2, 1};
    const std::array<std::array<double, 2>, 3> means = {{{-1.5, 0.0}, {1.5, 0.0}, {0.0, 1.8}}};
    const double sd = 0.4;
    for (int k = 0; k < 3; ++k) {
      const Vector c = Eigen::Map<const Vector>(means[k].data(), 2);
      g.weights.push_back(1.0 / 3.0);
      g.samplers.push_back([c, sd](Rng& rng) {
        Vector x(2);
        for (int j = 0; j < 2; ++j) x[j] = c[j] + sd * standard_normal(rng);
        return x;
      });
      g.modes.push_back({1.0 / 3.0, c, [c, sd](const Vector& x) {
                           return -(x - c).squaredNorm() / (2.0 * sd * sd) - 2.0 * std::log(sd);
                         }});
    }
  } else if (id == "beta_toyimage") {
    // 4x4 images with one bright row or column.
    g.spec = {FamilyId::Beta, 16, 1};
    const auto point = exp_family::make_point(g.spec, 0, exp_family::ConcentrationParams{12.0});
    for (int k = 0; k < 8; ++k) {
      Vector center = Vector::Constant(16, 0.15);
      for (int j = 0; j < 4; ++j) center[k < 4 ? k * 4 + j : j * 4 + (k - 4)] = 0.85;
      add_kernel_component(g, 1.0 / 8.0, center, point);
    }
  } else if (id == "categorical_toytext") {
    // Sticky first-order chain over D = 4 symbols, 8 tokens per sequence.
    g.spec = {FamilyId::Categorical, 4, 8};
    Matrix trans(4, 4);
    trans << 0.7, 0.2, 0.05, 0.05,  //
        0.05, 0.7, 0.2, 0.05,       //
        0.05, 0.05, 0.7, 0.2,       //
        0.2, 0.05, 0.05, 0.7;
    const Eigen::RowVector4d init(0.4, 0.3, 0.2, 0.1);
    g.whole = [trans, init](Rng& rng) {
      Vector x = Vector::Zero(32);
      Eigen::RowVectorXd p = init;
      for (int k = 0; k < 8; ++k) {
        const double u = uniform01(rng);
        int pick = 3;
        double acc = 0.0;
        for (int j = 0; j < 4; ++j) {
          acc += p[j];
          if (u < acc) {
            pick = j;
            break;
          }
        }
        x[k * 4 + pick] = 1.0;
        p = trans.row(pick);
      }
      return x;
    };
  } else {
    throw Error(ErrorCode::InvalidInput, fmt::format("unknown experiment id '{}'", id));
  }
  return g;
}

Vector draw(const Generator& g, Rng& rng) {
  if (g.whole) return g.whole(rng);
  const double u = uniform01(rng);
  double acc = 0.0;
  std::size_t k = g.weights.size() - 1;
  for (std::size_t i = 0; i < g.weights.size(); ++i) {
    acc += g.weights[i];
    if (u < acc) {
      k = i;
      break;
    }
  }
  return g.samplers[k](rng);
}

bool same_family(const FamilySpec& a, const FamilySpec& b) {
  return a.id == b.id && a.dim == b.dim && (a.id != FamilyId::Categorical || a.tokens == b.tokens);
}

}  // namespace

std::span<const std::string_view> experiment_ids() noexcept { return kExperimentIds; }

engine::ExperimentConfig preset_config(std::string_view id) {
  engine::ExperimentConfig c;
  c.experiment = std::string(id);
  c.dataset.id = std::string(id);
  c.family = make_generator(id).spec;
  c.adam.lr = 2e-4;
  if (id == "dirichlet_simplex") {
    c.adam.lr = 4e-4;
    c.loss = engine::LossMode::Vlb;
  } else if (id == "wishart_pd") {
    c.adam.lr = 4e-4;
    c.loss = engine::LossMode::Reweighted;
  } else if (id == "vmf_sphere") {
    c.T = 100;
    c.loss = engine::LossMode::Vlb;
    c.adam.lr_decay = 0.999997;
    c.batch_size = 100;
  } else if (id == "gaussian_sanity") {
    c.schedule.kind = "cosine_transform";
  } else if (id == "categorical_toytext") {
    c.loss = engine::LossMode::Vlb;
  }
  engine::validate(c);
  return c;
}

std::vector<Vector> read_lat_lon_csv(const std::filesystem::path& path) {
  std::istringstream in(io::read_file(path));
  std::vector<Vector> out;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw Error(ErrorCode::Io, fmt::format("{}:{}: expected 'lat,lon'", path.string(), line_no));
    try {
      std::size_t used = 0;
      const double lat = std::stod(line.substr(0, comma), &used);
      const double lon = std::stod(line.substr(comma + 1));
      if (!(std::abs(lat) <= 90.0) || !std::isfinite(lon)) {
        throw Error(ErrorCode::Io, fmt::format("{}:{}: latitude outside [-90, 90]", path.string(), line_no));
      }
      out.push_back(unit_from_lat_lon(lat, lon));
    } catch (const std::invalid_argument&) {
      if (out.empty() && line_no == 1) continue;  // header
      throw Error(ErrorCode::Io, fmt::format("{}:{}: not a number", path.string(), line_no));
    }
  }
  if (out.empty()) throw Error(ErrorCode::Io, fmt::format("{}: no rows", path.string()));
  return out;
}

Dataset make_dataset(const engine::ExperimentConfig& config) {
  const std::string& id = config.dataset.id.empty() ? config.experiment : config.dataset.id;
  Generator g = make_generator(id);
  if (!same_family(g.spec, config.family)) {
    throw Error(ErrorCode::Config, fmt::format("config field 'family': dataset '{}' needs {} with dim {}", id,
                                               exp_family::to_string(g.spec.id), g.spec.dim));
  }
  Dataset data;
  data.id = id;
  data.spec = g.spec;
  const long n_train = config.dataset.n_train;
  const long n_test = config.dataset.n_test;

  if (!config.dataset.csv_path.empty()) {
    if (g.spec.id != FamilyId::VonMisesFisher) {
      throw Error(ErrorCode::Config, "config field 'dataset.csv_path': only vmf_sphere reads lat/lon files");
    }
    std::vector<Vector> rows = read_lat_lon_csv(config.dataset.csv_path);
    Rng rng = make_stream(config.seed, 0xda7a);
    std::shuffle(rows.begin(), rows.end(), rng);
    std::size_t n_tr = static_cast<std::size_t>(n_train);
    std::size_t n_te = static_cast<std::size_t>(n_test);
    if (n_tr + n_te > rows.size()) {
      n_te = rows.size() / 5;
      n_tr = rows.size() - n_te;
      log::warn(fmt::format("{} has {} rows; using {} train / {} test", config.dataset.csv_path, rows.size(), n_tr, n_te));
    }
    data.train.assign(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_tr));
    data.test.assign(rows.begin() + static_cast<std::ptrdiff_t>(n_tr),
                     rows.begin() + static_cast<std::ptrdiff_t>(n_tr + n_te));
    return data;
  }

  data.modes = g.modes;
  const long total = n_train + n_test;
  std::vector<Vector> rows(static_cast<std::size_t>(total));
  constexpr long kChunk = 1024;
  const std::size_t chunks = static_cast<std::size_t>((total + kChunk - 1) / kChunk);
  parallel_for(chunks, [&](std::size_t c) {
    Rng rng = make_stream(config.seed ^ 0xda7aULL, c);
    const long end = std::min(total, static_cast<long>(c + 1) * kChunk);
    for (long i = static_cast<long>(c) * kChunk; i < end; ++i) rows[static_cast<std::size_t>(i)] = draw(g, rng);
  });
  data.train.assign(rows.begin(), rows.begin() + n_train);
  data.test.assign(rows.begin() + n_train, rows.end());
  if (g.spec.id == FamilyId::Categorical) {
    data.token_frequencies = Eigen::VectorXd::Zero(g.spec.dim);
    for (const Vector& x : data.train) {
      for (int k = 0; k < g.spec.tokens; ++k) data.token_frequencies += x.segment(k * g.spec.dim, g.spec.dim);
    }
    // Keep every symbol possible under the reconstruction term.
    data.token_frequencies.array() += 1.0;
    data.token_frequencies /= data.token_frequencies.sum();
  }
  return data;
}

Matrix stack_rows(std::span<const Vector> rows) {
  if (rows.empty()) return {};
  Matrix out(static_cast<Eigen::Index>(rows.size()), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return out;
}

std::vector<double> mode_fractions(const Dataset& data, const Matrix& samples) {
  std::vector<double> counts(data.modes.size(), 0.0);
  if (data.modes.empty()) return counts;
  long used = 0;
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    const Vector x = samples.row(i).transpose();
    if (!exp_family::in_domain(data.spec, x)) continue;
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < data.modes.size(); ++k) {
      const double s = std::log(data.modes[k].weight) + data.modes[k].log_density(x);
      if (s > best_score) {
        best_score = s;
        best = k;
      }
    }
    counts[best] += 1.0;
    ++used;
  }
  if (used > 0) {
    for (double& c : counts) c /= static_cast<double>(used);
  }
  return counts;
}

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

schedule::RegimeConfig desk_regime() {
  schedule::RegimeConfig r;
  r.budget = 2'000'000;
  r.M_low = 20'000;
  r.kraskov_n = 20'000;
  r.pilot_M = 5'000;
  return r;
}

std::vector<double> cosine_mi_target(const Dataset& data, int T) {
  if (data.train.empty()) throw Error(ErrorCode::InvalidInput, "empty training set");
  const std::vector<double> ab_ss = schedule::ddpm_to_ss_gaussian(schedule::cosine_ddpm_schedule(T));
  // Wishart points repeat off-diagonal entries; use the lower triangle.
  Matrix coords;
  if (data.spec.id == FamilyId::Wishart) {
    const int p = data.spec.dim;
    coords.resize(static_cast<Eigen::Index>(data.train.size()), p * (p + 1) / 2);
    for (std::size_t i = 0; i < data.train.size(); ++i) {
      int k = 0;
      for (int a = 0; a < p; ++a) {
        for (int b = 0; b <= a; ++b, ++k) coords(static_cast<Eigen::Index>(i), k) = data.train[i][b * p + a];
      }
    }
  } else {
    coords = stack_rows(data.train);
  }
  const Matrix centered = coords.rowwise() - coords.colwise().mean();
  const Matrix cov = centered.transpose() * centered / std::max<double>(1.0, static_cast<double>(coords.rows() - 1));
  const Vector lambda = Eigen::SelfAdjointEigenSolver<Matrix>(cov).eigenvalues();
  const double floor = 1e-12 * std::max(lambda.maxCoeff(), 1e-300);
  std::vector<double> out(static_cast<std::size_t>(T), 0.0);
  for (int t = 0; t < T; ++t) {
    const double o = odds(ab_ss[t]);
    for (Eigen::Index i = 0; i < lambda.size(); ++i) {
      if (lambda[i] > floor) out[t] += 0.5 * std::log1p(o * lambda[i]);
    }
  }
  return out;
}

ScheduleBuild build_schedule(const engine::ExperimentConfig& config, const Dataset& data,
                             const std::optional<schedule::RegimeConfig>& regime_override) {
  const engine::ScheduleSource& src = config.schedule;
  std::string kind = src.kind;
  if (kind == "default") kind = config.family.id == FamilyId::Gaussian ? "cosine_transform" : "mi_match";
  ScheduleBuild out;
  if (kind == "file") {
    out.schedule = schedule::load_schedule(src.path);
    if (!same_family(out.schedule.spec, config.family) || out.schedule.T != config.T) {
      throw Error(ErrorCode::Config, fmt::format("config field 'schedule.path': {} does not match the family or T",
                                                 src.path));
    }
    return out;
  }
  if (kind == "cosine_transform") {
    if (config.family.id != FamilyId::Gaussian) {
      throw Error(ErrorCode::Config, "config field 'schedule.kind': cosine_transform needs the Gaussian family");
    }
    out.schedule = schedule::gaussian_schedule(schedule::ddpm_to_ss_gaussian(schedule::cosine_ddpm_schedule(config.T)),
                                               config.family.dim, schedule::Provenance::AnalyticTransform);
    return out;
  }
  const std::vector<double> grid = schedule::log_grid(src.nu_min, src.nu_max, src.grid);
  const std::vector<Vector>& train = data.train;
  const schedule::DataSampler sampler = [&train](Rng& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
    return train[pick(rng)];
  };
  schedule::RegimeConfig regime = regime_override ? *regime_override : desk_regime();
  regime.seed = config.seed ^ 0x5c4edULL;
  out.table = schedule::build_mi_table(config.family, grid, sampler, regime);
  out.schedule = schedule::match_schedule(*out.table, cosine_mi_target(data, config.T));
  return out;
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

namespace {

enum Stream : std::uint64_t { kNormalizer = 2, kInit = 3, kTrain = 4, kSample = 5, kElbo = 6 };

}  // namespace

Prepared prepare(const engine::ExperimentConfig& config) {
  engine::validate(config);
  Prepared p;
  p.data = make_dataset(config);
  p.schedule = build_schedule(config, p.data);
  Rng rng = make_stream(config.seed, kNormalizer);
  p.normalizer = tail::fit_tail_normalizer(p.schedule.schedule, p.data.train, config.normalizer_n_mc, rng);
  return p;
}

engine::Model train_model(const engine::ExperimentConfig& config, const Prepared& prepared, const TrainHooks& hooks,
                          long* steps_run) {
  Rng init = make_stream(config.seed, kInit);
  engine::Model model = engine::make_model(prepared.schedule.schedule, prepared.normalizer, config.mlp, config.adam, init);
  engine::TrainOptions opts;
  opts.batch_size = config.batch_size;
  opts.iterations = config.iterations;
  opts.loss = engine::make_loss(config.loss, prepared.schedule.schedule);
  Rng rng = make_stream(config.seed, kTrain);
  const auto on_step = [&](long step, const engine::StepResult& s) {
    const bool go_on = hooks.on_step ? hooks.on_step(step, s) : true;
    if (hooks.on_checkpoint && hooks.checkpoint_every > 0 && (step + 1) % hooks.checkpoint_every == 0) {
      hooks.on_checkpoint(step + 1, model);
    }
    return go_on;
  };
  const long steps = engine::train(model, prepared.data.train, opts, rng, on_step);
  if (steps_run) *steps_run = steps;
  return model;
}

nnet::Checkpoint make_checkpoint(const engine::ExperimentConfig& config, const engine::Model& model) {
  nnet::Checkpoint ckpt;
  ckpt.config_json = engine::to_json(config);
  ckpt.mlp = model.net.config();
  ckpt.net = model.net;
  ckpt.opt = model.opt;
  ckpt.schedule_hash = schedule::schedule_hash(model.schedule);
  ckpt.normalizer_json = tail::to_json(model.normalizer);
  ckpt.normalizer_hash = io::fnv1a(ckpt.normalizer_json);
  return ckpt;
}

engine::Model model_from_checkpoint(const nnet::Checkpoint& ckpt, const NoiseSchedule& schedule) {
  const std::uint64_t hash = schedule::schedule_hash(schedule);
  if (ckpt.schedule_hash != hash) {
    throw Error(ErrorCode::HashMismatch, fmt::format("checkpoint was trained on schedule {}, got schedule {}",
                                                     io::hex64(ckpt.schedule_hash), io::hex64(hash)));
  }
  if (io::fnv1a(ckpt.normalizer_json) != ckpt.normalizer_hash) {
    throw Error(ErrorCode::HashMismatch, "checkpoint normalizer does not match its recorded hash");
  }
  tail::TailNormalizer nz = tail::normalizer_from_json(ckpt.normalizer_json);
  tail::check_compatible(nz, schedule);
  return engine::Model{schedule, std::move(nz), ckpt.net, ckpt.opt};
}

Matrix draw_samples(const engine::ExperimentConfig& config, const engine::Model& model, int n, int sample_steps,
                    std::uint64_t stream) {
  const engine::Predictor predictor = engine::net_predictor(model, config.use_ema);
  Rng rng = make_stream(config.seed, kSample + 16 * stream);
  if (sample_steps == 0 || sample_steps >= model.schedule.T) {
    return engine::sample(predictor, model.schedule, model.normalizer, n, rng);
  }
  const std::vector<int> plan = engine::uniform_plan(model.schedule.T, sample_steps);
  return engine::sample_reduced(predictor, model.schedule, model.normalizer, plan, n, rng);
}

SampleMetrics evaluate_samples(const engine::ExperimentConfig& config, const Dataset& data, const Matrix& samples) {
  SampleMetrics m;
  m.n = samples.rows();
  const FamilySpec& spec = data.spec;
  m.min_eigenvalue = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    const Vector x = samples.row(i).transpose();
    if (exp_family::in_domain(spec, x)) ++m.valid;
    if (spec.id == FamilyId::VonMisesFisher) m.max_unit_norm_error = std::max(m.max_unit_norm_error, std::abs(x.norm() - 1.0));
    if (spec.id == FamilyId::Wishart) {
      const Matrix a = Eigen::Map<const Matrix>(x.data(), spec.dim, spec.dim);
      const double asym = (a - a.transpose()).cwiseAbs().maxCoeff();
      const double ev = Eigen::SelfAdjointEigenSolver<Matrix>(0.5 * (a + a.transpose())).eigenvalues().minCoeff();
      m.min_eigenvalue = std::min(m.min_eigenvalue, asym > 1e-9 ? -std::numeric_limits<double>::infinity() : ev);
    }
  }
  if (spec.id != FamilyId::Wishart) m.min_eigenvalue = 0.0;
  m.mode_fractions = mode_fractions(data, samples);
  if (spec.id != FamilyId::Categorical && m.valid >= kMinKlSamples &&
      static_cast<long>(data.test.size()) >= kMinKlSamples) {
    m.kl = kl_to_data(spec, samples, stack_rows(data.test), config.knn_k);
    m.kl_available = true;
  }
  return m;
}

engine::ElboResult evaluate_elbo(const engine::ExperimentConfig& config, const Dataset& data, const engine::Model& model) {
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(std::max(config.elbo_points, 0)), data.test.size());
  engine::ElboResult out;
  if (n == 0) return out;
  const engine::Predictor predictor = engine::net_predictor(model, config.use_ema);
  engine::ElboOptions opts;
  opts.n_mc = config.elbo_n_mc;
  if (data.spec.id == FamilyId::Categorical) {
    opts.reconstruction = engine::Reconstruction::CategoricalExact;
    opts.token_frequencies = data.token_frequencies;
  }
  std::vector<engine::ElboResult> rows(n);
  parallel_for(n, [&](std::size_t i) {
    Rng rng = make_stream(config.seed, kElbo + 16 * (i + 1));
    rows[i] = engine::elbo(predictor, model.schedule, model.normalizer, data.test[i], opts, rng);
  });
  const double nn = static_cast<double>(n);
  for (const auto& r : rows) {
    out.elbo_nats += r.elbo_nats / nn;
    out.kl_sum += r.kl_sum / nn;
    out.reconstruction += r.reconstruction / nn;
  }
  if (n > 1) {
    double ss = 0.0;
    for (const auto& r : rows) ss += (r.elbo_nats - out.elbo_nats) * (r.elbo_nats - out.elbo_nats);
    out.se = std::sqrt(ss / (nn - 1.0) / nn);
  }
  const double units = data.spec.id == FamilyId::Categorical ? data.spec.tokens : exp_family::point_size(data.spec);
  out.bits_per_dim = -out.elbo_nats / std::numbers::ln2 / units;
  return out;
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

std::string csv_stamp(const engine::ExperimentConfig& config) {
  return fmt::format("# ssdiff {} config {}\n", io::build_version(), io::hex64(engine::config_hash(config)));
}

std::string samples_csv(const engine::ExperimentConfig& config, const Matrix& rows) {
  std::string out = csv_stamp(config);
  for (Eigen::Index j = 0; j < rows.cols(); ++j) out += fmt::format("{}x{}", j ? "," : "", j);
  out += '\n';
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    for (Eigen::Index j = 0; j < rows.cols(); ++j) out += fmt::format("{}{:.17g}", j ? "," : "", rows(i, j));
    out += '\n';
  }
  return out;
}

Matrix samples_from_csv(const std::string& text, int cols) {
  std::istringstream in(text);
  std::string line;
  std::vector<double> values;
  long rows = 0;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#' || line[0] == 'x') continue;
    std::istringstream cells(line);
    std::string cell;
    int c = 0;
    while (std::getline(cells, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw Error(ErrorCode::Io, fmt::format("samples line {}: '{}' is not a number", line_no, cell));
      }
      ++c;
    }
    if (c != cols) throw Error(ErrorCode::Shape, fmt::format("samples line {} has {} columns, expected {}", line_no, c, cols));
    ++rows;
  }
  Matrix out(rows, cols);
  for (long i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) out(i, j) = values[static_cast<std::size_t>(i * cols + j)];
  }
  return out;
}

namespace {

void histogram_2d(std::string& out, const char* set, const Matrix& xy, double x0, double x1, double y0, double y1,
                  int nx, int ny) {
  std::vector<long> counts(static_cast<std::size_t>(nx * ny), 0);
  for (Eigen::Index i = 0; i < xy.rows(); ++i) {
    const int bx = static_cast<int>(std::floor((xy(i, 0) - x0) / (x1 - x0) * nx));
    const int by = static_cast<int>(std::floor((xy(i, 1) - y0) / (y1 - y0) * ny));
    if (bx < 0 || by < 0 || bx > nx || by > ny) continue;
    ++counts[static_cast<std::size_t>(std::min(by, ny - 1) * nx + std::min(bx, nx - 1))];
  }
  for (int by = 0; by < ny; ++by) {
    for (int bx = 0; bx < nx; ++bx) {
      const double dx = (x1 - x0) / nx, dy = (y1 - y0) / ny;
      out += fmt::format("{},{:.6g},{:.6g},{:.6g},{:.6g},{}\n", set, x0 + bx * dx, x0 + (bx + 1) * dx, y0 + by * dy,
                         y0 + (by + 1) * dy, counts[static_cast<std::size_t>(by * nx + bx)]);
    }
  }
}

Matrix lon_lat(const Matrix& rows) {
  Matrix out(rows.rows(), 2);
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    out(i, 0) = std::atan2(rows(i, 1), rows(i, 0)) * 180.0 / std::numbers::pi;
    out(i, 1) = std::asin(std::clamp(rows(i, 2) / std::max(rows.row(i).norm(), 1e-300), -1.0, 1.0)) * 180.0 / std::numbers::pi;
  }
  return out;
}

void ellipses(std::string& out, const char* set, const Matrix& rows, long limit) {
  for (Eigen::Index i = 0; i < std::min<Eigen::Index>(rows.rows(), limit); ++i) {
    Matrix a(2, 2);
    a << rows(i, 0), rows(i, 2), rows(i, 1), rows(i, 3);
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (a + a.transpose()));
    const Vector ev = es.eigenvalues();
    const Vector major = es.eigenvectors().col(1);
    out += fmt::format("{},{},{:.9g},{:.9g},{:.9g}\n", set, i, std::sqrt(std::max(ev[1], 0.0)),
                       std::sqrt(std::max(ev[0], 0.0)), std::atan2(major[1], major[0]));
  }
}

}  // namespace

std::string plot_csv(const engine::ExperimentConfig& config, const Matrix& data, const Matrix& samples) {
  const FamilySpec& spec = config.family;
  std::string out = csv_stamp(config);
  if (spec.id == FamilyId::Dirichlet && spec.dim == 3) {
    out += "set,x_lo,x_hi,y_lo,y_hi,count\n";
    histogram_2d(out, "data", data.leftCols(2), 0.0, 1.0, 0.0, 1.0, 20, 20);
    histogram_2d(out, "model", samples.leftCols(2), 0.0, 1.0, 0.0, 1.0, 20, 20);
  } else if (spec.id == FamilyId::VonMisesFisher && spec.dim == 3) {
    out += "set,lon_lo,lon_hi,lat_lo,lat_hi,count\n";
    histogram_2d(out, "data", lon_lat(data), -180.0, 180.0, -90.0, 90.0, 36, 18);
    histogram_2d(out, "model", lon_lat(samples), -180.0, 180.0, -90.0, 90.0, 36, 18);
  } else if (spec.id == FamilyId::Wishart && spec.dim == 2) {
    out += "set,index,semi_major,semi_minor,angle\n";
    ellipses(out, "data", data, 200);
    ellipses(out, "model", samples, 200);
  } else if (spec.id == FamilyId::Categorical) {
    out += "set,position,token,count\n";
    for (const auto& [name, rows] : {std::pair<const char*, const Matrix*>{"data", &data}, {"model", &samples}}) {
      for (int k = 0; k < spec.tokens; ++k) {
        for (int d = 0; d < spec.dim; ++d) {
          out += fmt::format("{},{},{},{:.0f}\n", name, k, d, rows->col(k * spec.dim + d).sum());
        }
      }
    }
  } else {
    out += "set,coord,lo,hi,count\n";
    constexpr int kBins = 40;
    for (Eigen::Index j = 0; j < data.cols(); ++j) {
      const double lo = std::min(data.col(j).minCoeff(), samples.col(j).minCoeff());
      const double hi = std::max(data.col(j).maxCoeff(), samples.col(j).maxCoeff()) + 1e-12;
      for (const auto& [name, rows] : {std::pair<const char*, const Matrix*>{"data", &data}, {"model", &samples}}) {
        std::vector<long> counts(kBins, 0);
        for (Eigen::Index i = 0; i < rows->rows(); ++i) {
          const double v = (*rows)(i, j);
          if (!std::isfinite(v)) continue;
          ++counts[static_cast<std::size_t>(std::clamp(static_cast<int>((v - lo) / (hi - lo) * kBins), 0, kBins - 1))];
        }
        for (int b = 0; b < kBins; ++b) {
          out += fmt::format("{},{},{:.6g},{:.6g},{}\n", name, j, lo + (hi - lo) * b / kBins,
                             lo + (hi - lo) * (b + 1) / kBins, counts[static_cast<std::size_t>(b)]);
        }
      }
    }
  }
  return out;
}

SyntheticResult run_synthetic(const engine::ExperimentConfig& config, const TrainHooks& hooks) {
  const Prepared prepared = prepare(config);
  const std::string name = config.experiment.empty() ? prepared.data.id : config.experiment;
  SyntheticResult result;
  result.output_dir = std::filesystem::path(config.output_dir) / name;
  std::filesystem::create_directories(result.output_dir);

  std::deque<double> recent;
  double recent_sum = 0.0;
  TrainHooks wrapped = hooks;
  wrapped.on_step = [&](long step, const engine::StepResult& s) {
    if (s.accepted) {
      recent.push_back(s.loss);
      recent_sum += s.loss;
      if (recent.size() > 1000) {
        recent_sum -= recent.front();
        recent.pop_front();
      }
    }
    if ((step + 1) % 1000 == 0) {
      log::info(fmt::format("{}: step {} loss {:.6g}", name, step + 1,
                            recent.empty() ? 0.0 : recent_sum / static_cast<double>(recent.size())));
    }
    return hooks.on_step ? hooks.on_step(step, s) : true;
  };
  const engine::Model model = train_model(config, prepared, wrapped, &result.steps);
  result.final_loss = recent.empty() ? 0.0 : recent_sum / static_cast<double>(recent.size());

  const Matrix samples = draw_samples(config, model, config.sample_count, config.sample_steps, 0);
  result.metrics = evaluate_samples(config, prepared.data, samples);
  result.elbo = evaluate_elbo(config, prepared.data, model);

  const std::uint64_t hash = engine::config_hash(config);
  json j;
  j["format"] = "ssdiff-metrics";
  j["version"] = 1;
  j["build"] = std::string(io::build_version());
  j["config_hash"] = io::hex64(hash);
  j["experiment"] = name;
  j["family"] = std::string(exp_family::to_string(config.family.id));
  j["T"] = config.T;
  j["schedule_provenance"] = std::string(schedule::to_string(prepared.schedule.schedule.provenance));
  j["schedule_hash"] = io::hex64(schedule::schedule_hash(prepared.schedule.schedule));
  j["steps"] = result.steps;
  j["final_loss"] = result.final_loss;
  j["samples"] = result.metrics.n;
  j["valid_fraction"] = result.metrics.n ? static_cast<double>(result.metrics.valid) / result.metrics.n : 0.0;
  if (config.family.id == FamilyId::VonMisesFisher) j["max_unit_norm_error"] = result.metrics.max_unit_norm_error;
  if (config.family.id == FamilyId::Wishart) j["min_eigenvalue"] = result.metrics.min_eigenvalue;
  if (!result.metrics.mode_fractions.empty()) j["mode_fractions"] = result.metrics.mode_fractions;
  if (result.metrics.kl_available) {
    j["kl_to_data"] = result.metrics.kl.nats;
    j["kl_k"] = config.knn_k;
    j["kl_jittered"] = result.metrics.kl.jittered;
  }
  j["elbo_nats"] = result.elbo.elbo_nats;
  j["elbo_se"] = result.elbo.se;
  j["bits_per_dim"] = result.elbo.bits_per_dim;
  result.metrics_json = j.dump(1);

  const auto& dir = result.output_dir;
  io::write_atomic(dir / "metrics.json", result.metrics_json + "\n");
  io::write_atomic(dir / "samples.csv", samples_csv(config, samples));
  const Matrix test = stack_rows(prepared.data.test);
  io::write_atomic(dir / "data.csv", samples_csv(config, test));
  if (config.family.id == FamilyId::Wishart) {
    io::write_atomic(dir / "ellipses.csv", plot_csv(config, test, samples));
  } else {
    io::write_atomic(dir / "histogram.csv", plot_csv(config, test, samples));
  }
  schedule::save_schedule(prepared.schedule.schedule, dir / "schedule.json");
  if (prepared.schedule.table) io::write_atomic(dir / "mi_table.csv", csv_stamp(config) + schedule::to_csv(*prepared.schedule.table));
  io::write_atomic(dir / "checkpoint.json", nnet::checkpoint_to_json(make_checkpoint(config, model)));
  return result;
}

}  // namespace ssdiff::analysis
