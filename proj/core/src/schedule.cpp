#include "ssdiff/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "ssdiff/error.hpp"
#include "ssdiff/io.hpp"
#include "ssdiff/log.hpp"
#include "ssdiff/parallel.hpp"

namespace ssdiff::schedule {

using exp_family::FamilyId;
using nlohmann::json;

namespace {

[[noreturn]] void invalid(const std::string& message) { throw Error(ErrorCode::InvalidInput, message); }

json point_to_json(const FamilySpec& spec, const SchedulePoint& p) {
  json j;
  j["t"] = p.t;
  switch (spec.id) {
    case FamilyId::Gaussian: j["alpha_bar"] = exp_family::gaussian(p).alpha_bar; break;
    case FamilyId::Beta:
    case FamilyId::Dirichlet: j["nu"] = exp_family::concentration(p); break;
    case FamilyId::VonMises:
    case FamilyId::VonMisesFisher: j["kappa"] = exp_family::concentration(p); break;
    case FamilyId::Gamma:
      j["alpha"] = exp_family::gamma(p).alpha;
      j["xi"] = exp_family::gamma(p).xi;
      break;
    case FamilyId::Wishart:
      j["n"] = exp_family::wishart(p).n;
      j["xi"] = exp_family::wishart(p).xi;
      break;
    case FamilyId::Categorical: {
      const auto& c = exp_family::categorical(p);
      json rows = json::array();
      for (Eigen::Index i = 0; i < c.q_bar.rows(); ++i) {
        rows.push_back(std::vector<double>(c.q_bar.row(i).begin(), c.q_bar.row(i).end()));
      }
      j["q_bar"] = rows;
      j["stationary"] = std::vector<double>(c.stationary.begin(), c.stationary.end());
      break;
    }
  }
  j["a"] = p.a;
  return j;
}

exp_family::Params point_params_from_json(const FamilySpec& spec, const json& j) {
  switch (spec.id) {
    case FamilyId::Gaussian: return exp_family::GaussianParams{j.at("alpha_bar").get<double>()};
    case FamilyId::Beta:
    case FamilyId::Dirichlet: return exp_family::ConcentrationParams{j.at("nu").get<double>()};
    case FamilyId::VonMises:
    case FamilyId::VonMisesFisher: return exp_family::ConcentrationParams{j.at("kappa").get<double>()};
    case FamilyId::Gamma: return exp_family::GammaParams{j.at("alpha").get<double>(), j.at("xi").get<double>()};
    case FamilyId::Wishart: return exp_family::WishartParams{j.at("n").get<double>(), j.at("xi").get<double>()};
    case FamilyId::Categorical: {
      const auto rows = j.at("q_bar").get<std::vector<std::vector<double>>>();
      const int d = spec.dim;
      if (static_cast<int>(rows.size()) != d) invalid("q_bar must have D rows");
      Matrix q(d, d);
      for (int i = 0; i < d; ++i) {
        if (static_cast<int>(rows[i].size()) != d) invalid("q_bar must have D columns");
        for (int k = 0; k < d; ++k) q(i, k) = rows[i][k];
      }
      const auto st = j.at("stationary").get<std::vector<double>>();
      Eigen::RowVectorXd stationary = Eigen::Map<const Eigen::RowVectorXd>(st.data(), static_cast<Eigen::Index>(st.size()));
      return exp_family::CategoricalParams{q, stationary};
    }
  }
  invalid("unknown family");
}

Provenance provenance_from_string(std::string_view s) {
  for (Provenance p : {Provenance::AnalyticTransform, Provenance::MiMatched, Provenance::UserSupplied}) {
    if (to_string(p) == s) return p;
  }
  invalid(fmt::format("unknown provenance '{}'", s));
}

double interp_mi(const MiRow& a, const MiRow& b, double nu) {
  if (a.nu > 0.0 && a.mi > 0.0 && b.mi > 0.0) {
    const double w = (std::log(nu) - std::log(a.nu)) / (std::log(b.nu) - std::log(a.nu));
    return std::exp(std::log(a.mi) + w * (std::log(b.mi) - std::log(a.mi)));
  }
  const double w = (nu - a.nu) / (b.nu - a.nu);
  return a.mi + w * (b.mi - a.mi);
}

double interp_nu(const MiRow& a, const MiRow& b, double mi) {
  if (a.nu > 0.0 && a.mi > 0.0 && b.mi > 0.0) {
    const double w = (std::log(mi) - std::log(a.mi)) / (std::log(b.mi) - std::log(a.mi));
    return std::exp(std::log(a.nu) + w * (std::log(b.nu) - std::log(a.nu)));
  }
  const double w = (mi - a.mi) / (b.mi - a.mi);
  return a.nu + w * (b.nu - a.nu);
}

double wishart_base(const FamilySpec& spec, const ParamPath& path) {
  return path.wishart_n_base > 0.0 ? path.wishart_n_base : spec.dim + 1.0;
}

// Product families are estimated one coordinate at a time and summed.
bool is_product_family(const FamilySpec& spec) {
  return spec.dim > 1 && (spec.id == FamilyId::Gaussian || spec.id == FamilyId::Beta ||
                          spec.id == FamilyId::Gamma || spec.id == FamilyId::VonMises);
}

Matrix kraskov_features(const FamilySpec& spec, const Vector& x) {
  if (spec.id == FamilyId::VonMises) return exp_family::sufficient_stat(spec, x).transpose();
  return x.transpose();
}

MiRow estimate_row(const FamilySpec& spec, double nu, const DataSampler& data, const RegimeConfig& cfg,
                   const ParamPath& path, Rng& rng) {
  MiRow row;
  row.nu = nu;
  if (nu == 0.0) return row;  // stationary law: x_t independent of x0
  const SchedulePoint point = exp_family::make_point(spec, 0, params_from_nu(spec, nu, path));

  if (spec.id == FamilyId::Categorical) {
    // Exact-MC estimator on the first token; product over tokens is summed.
    const DataSampler& sampler = data;
    Eigen::VectorXd freq = Eigen::VectorXd::Zero(spec.dim);
    const long n_freq = 20'000;
    for (long i = 0; i < n_freq; ++i) {
      const Vector x = sampler(rng);
      for (int k = 0; k < spec.tokens; ++k) freq += x.segment(k * spec.dim, spec.dim);
    }
    freq /= freq.sum();
    const Matrix q = exp_family::categorical(point).q_bar;
    const long m = std::max<long>(1, cfg.budget / std::max(1, cfg.K_mid));
    row.mi = spec.tokens * mi_categorical(std::span<const Matrix>(&q, 1), freq, m, rng);
    row.lower = row.upper = row.mi;
    row.estimator = Estimator::CategoricalMc;
    return row;
  }

  if (spec.id == FamilyId::Gaussian && cfg.analytic_gaussian_variance) {
    const double ab = exp_family::gaussian(point).alpha_bar;
    row.mi = spec.dim * 0.5 * std::log1p(*cfg.analytic_gaussian_variance * ab / (1.0 - ab));
    row.lower = row.upper = row.mi;
    row.estimator = Estimator::Analytic;
    return row;
  }

  const DsiviResult pilot = mi_dsivi_bounds(spec, point, data, cfg.pilot_K, cfg.pilot_M, rng);
  const double guess = pilot.estimate();
  if (guess >= cfg.high) {
    const auto n = static_cast<Eigen::Index>(cfg.kraskov_n);
    const Vector probe = data(rng);
    const Matrix f0 = kraskov_features(spec, probe);
    Matrix xs(n, f0.cols());
    Matrix ys(n, f0.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      const Vector x0 = data(rng);
      xs.row(i) = kraskov_features(spec, x0);
      ys.row(i) = kraskov_features(spec, exp_family::sample_forward(spec, x0, point, rng));
    }
    row.mi = mi_kraskov(xs, ys, cfg.kraskov_k).mi;
    row.lower = row.upper = row.mi;
    row.estimator = Estimator::Kraskov;
    return row;
  }
  int K = cfg.K_low;
  long M = cfg.M_low;
  row.estimator = Estimator::ExpFit;
  if (guess >= cfg.mid) {
    K = cfg.K_high;
    M = cfg.budget / K;
    row.estimator = Estimator::DsiviHigh;
  } else if (guess >= cfg.low) {
    K = cfg.K_mid;
    M = cfg.budget / K;
    row.estimator = Estimator::DsiviMid;
  }
  const DsiviResult r = mi_dsivi_bounds(spec, point, data, K, std::max<long>(1, M), rng);
  row.lower = r.lower;
  row.upper = r.upper;
  row.mi = r.estimate();
  return row;
}

// Extrapolates below the low threshold along log MI = a log nu + b, fitted to
// the DSIVI rows with MI under anchor_ceiling (at least the lowest three). The
// ExpFit rows' own estimates are used only when fewer than two anchors exist.
void fit_exponential_tail(std::vector<MiRow>& rows, double anchor_ceiling) {
  constexpr std::size_t kMinAnchors = 3;
  std::vector<double> u, v;
  for (const MiRow& r : rows) {
    if (u.size() >= kMinAnchors && r.mi >= anchor_ceiling) break;
    if ((r.estimator == Estimator::DsiviMid || r.estimator == Estimator::DsiviHigh) && r.mi > 0.0) {
      u.push_back(std::log(r.nu));
      v.push_back(std::log(r.mi));
    }
  }
  if (u.size() < 2) {
    u.clear();
    v.clear();
    for (const MiRow& r : rows) {
      if (r.estimator == Estimator::ExpFit && r.nu > 0.0 && r.mi > 0.0) {
        u.push_back(std::log(r.nu));
        v.push_back(std::log(r.mi));
      }
    }
  }
  if (u.size() < 2) return;
  const double n = static_cast<double>(u.size());
  double su = 0, sv = 0, suu = 0, suv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    su += u[i];
    sv += v[i];
    suu += u[i] * u[i];
    suv += u[i] * v[i];
  }
  const double denom = n * suu - su * su;
  if (std::abs(denom) < 1e-300) return;
  const double a = (n * suv - su * sv) / denom;
  const double b = (sv - a * su) / n;
  for (MiRow& r : rows) {
    if (r.estimator == Estimator::ExpFit) r.mi = std::exp(a * std::log(r.nu) + b);
  }
}

}  // namespace

std::string_view to_string(Provenance p) noexcept {
  switch (p) {
    case Provenance::AnalyticTransform: return "analytic_transform";
    case Provenance::MiMatched: return "mi_matched";
    case Provenance::UserSupplied: return "user_supplied";
  }
  return "unknown";
}

std::string_view to_string(Estimator e) noexcept {
  switch (e) {
    case Estimator::Zero: return "zero";
    case Estimator::Analytic: return "analytic";
    case Estimator::Kraskov: return "kraskov";
    case Estimator::DsiviHigh: return "dsivi_k_high";
    case Estimator::DsiviMid: return "dsivi_k_mid";
    case Estimator::ExpFit: return "exp_fit";
    case Estimator::CategoricalMc: return "categorical_mc";
  }
  return "unknown";
}

Estimator estimator_from_string(std::string_view name) {
  for (Estimator e : {Estimator::Zero, Estimator::Analytic, Estimator::Kraskov, Estimator::DsiviHigh,
                      Estimator::DsiviMid, Estimator::ExpFit, Estimator::CategoricalMc}) {
    if (to_string(e) == name) return e;
  }
  invalid(fmt::format("unknown estimator '{}'", name));
}

const SchedulePoint& NoiseSchedule::at(int t) const {
  if (t < 1 || t > T) throw Error(ErrorCode::Step, fmt::format("timestep {} outside 1..{}", t, T));
  return points[static_cast<std::size_t>(t - 1)];
}

void validate(const NoiseSchedule& s) {
  exp_family::validate(s.spec);
  if (s.T < 1) invalid("T must be >= 1");
  if (static_cast<int>(s.points.size()) != s.T) {
    invalid(fmt::format("schedule has {} points but T = {}", s.points.size(), s.T));
  }
  for (int t = 1; t <= s.T; ++t) {
    const SchedulePoint& p = s.points[t - 1];
    if (p.t != t) invalid(fmt::format("schedule point {} carries index {}", t, p.t));
    exp_family::validate(s.spec, p);
  }
  if (!s.mi_trace.empty() && static_cast<int>(s.mi_trace.size()) != s.T) invalid("mi_trace length differs from T");
  if (s.provenance == Provenance::MiMatched) {
    for (std::size_t i = 1; i < s.mi_trace.size(); ++i) {
      if (s.mi_trace[i] > s.mi_trace[i - 1] + 0.02) invalid("MI trace increases in t beyond 0.02 nats");
    }
  }
}

std::string to_json(const NoiseSchedule& s) {
  json j;
  j["format"] = "ssdiff-schedule";
  j["version"] = 1;
  j["family_id"] = std::string(exp_family::to_string(s.spec.id));
  j["dim"] = s.spec.dim;
  j["tokens"] = s.spec.tokens;
  j["T"] = s.T;
  j["provenance"] = std::string(to_string(s.provenance));
  json pts = json::array();
  for (const SchedulePoint& p : s.points) pts.push_back(point_to_json(s.spec, p));
  j["points"] = pts;
  if (!s.mi_trace.empty()) j["mi_trace"] = s.mi_trace;
  return j.dump(1);
}

NoiseSchedule schedule_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    invalid(fmt::format("schedule JSON does not parse: {}", e.what()));
  }
  try {
    NoiseSchedule s;
    s.spec.id = exp_family::family_from_string(j.at("family_id").get<std::string>());
    s.spec.dim = j.at("dim").get<int>();
    s.spec.tokens = j.value("tokens", 1);
    s.T = j.at("T").get<int>();
    s.provenance = provenance_from_string(j.value("provenance", std::string("user_supplied")));
    for (const json& pj : j.at("points")) {
      const int t = pj.at("t").get<int>();
      SchedulePoint p{t, point_params_from_json(s.spec, pj), 0.0};
      exp_family::validate(s.spec, p);
      p.a = exp_family::tail_coefficient(s.spec, p.params);
      s.points.push_back(std::move(p));
    }
    if (j.contains("mi_trace")) s.mi_trace = j["mi_trace"].get<std::vector<double>>();
    validate(s);
    return s;
  } catch (const json::exception& e) {
    invalid(fmt::format("schedule JSON is missing a field: {}", e.what()));
  }
}

void save_schedule(const NoiseSchedule& s, const std::filesystem::path& path) {
  io::write_atomic(path, to_json(s));
}

NoiseSchedule load_schedule(const std::filesystem::path& path) { return schedule_from_json(io::read_file(path)); }

std::uint64_t schedule_hash(const NoiseSchedule& s) { return io::fnv1a(to_json(s)); }

std::vector<double> cosine_ddpm_schedule(int T, double s, double max_beta) {
  if (T < 1) invalid("T must be >= 1");
  const auto f = [&](double t) {
    const double c = std::cos((t / T + s) / (1.0 + s) * std::numbers::pi / 2.0);
    return c * c;
  };
  const double f0 = f(0.0);
  std::vector<double> ab(static_cast<std::size_t>(T));
  double prev_raw = 1.0;
  double prod = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double raw = f(t) / f0;
    const double beta = std::min(1.0 - raw / prev_raw, max_beta);
    prod *= 1.0 - beta;
    ab[t - 1] = prod;
    prev_raw = raw;
  }
  return ab;
}

std::vector<double> ddpm_to_ss_gaussian(std::span<const double> ab) {
  const std::size_t n = ab.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(ab[i] > 0.0 && ab[i] < 1.0)) invalid(fmt::format("alpha_bar[{}] = {} is outside (0, 1)", i + 1, ab[i]));
    const double odds = ab[i] / (1.0 - ab[i]);
    const double next = i + 1 < n ? ab[i + 1] / (1.0 - ab[i + 1]) : 0.0;
    const double diff = odds - next;
    if (!(diff > 0.0)) {
      invalid(fmt::format("negative odds difference at t={}: input is not strictly decreasing", i + 1));
    }
    out[i] = diff / (1.0 + diff);
  }
  return out;
}

std::vector<double> ss_to_ddpm_gaussian(std::span<const double> ab) {
  std::vector<double> out(ab.size());
  double odds = 0.0;
  for (std::size_t i = ab.size(); i-- > 0;) {
    odds += ab[i] / (1.0 - ab[i]);
    out[i] = odds / (1.0 + odds);
  }
  return out;
}

NoiseSchedule gaussian_schedule(std::span<const double> ab, int dim, Provenance provenance) {
  NoiseSchedule s;
  s.spec = FamilySpec{FamilyId::Gaussian, dim, 1};
  s.T = static_cast<int>(ab.size());
  s.provenance = provenance;
  for (int t = 1; t <= s.T; ++t) {
    s.points.push_back(exp_family::make_point(s.spec, t, exp_family::GaussianParams{ab[t - 1]}));
  }
  validate(s);
  return s;
}

exp_family::Params params_from_nu(const FamilySpec& spec, double nu, const ParamPath& path) {
  if (!(nu >= 0.0) || !std::isfinite(nu)) invalid(fmt::format("path parameter {} must be finite and >= 0", nu));
  switch (spec.id) {
    case FamilyId::Gaussian: return exp_family::GaussianParams{nu / (1.0 + nu)};
    case FamilyId::Beta:
    case FamilyId::Dirichlet:
    case FamilyId::VonMises:
    case FamilyId::VonMisesFisher: return exp_family::ConcentrationParams{nu};
    case FamilyId::Gamma: {
      const double base = path.gamma_alpha_base;
      return exp_family::GammaParams{base + nu, base / (base + nu)};
    }
    case FamilyId::Wishart: {
      const double base = wishart_base(spec, path);
      return exp_family::WishartParams{base + nu, base / (base + nu)};
    }
    case FamilyId::Categorical: {
      const int d = spec.dim;
      Eigen::RowVectorXd stationary = Eigen::RowVectorXd::Constant(d, 1.0 / d);
      if (path.categorical_absorbing) {
        stationary.setZero();
        stationary[path.absorbing_token] = 1.0;
      }
      const double ab = nu / (1.0 + nu);
      Matrix q = ab * Matrix::Identity(d, d) + (1.0 - ab) * Matrix::Ones(d, 1) * stationary;
      // Re-normalize rows so they sum to one to machine precision.
      for (int i = 0; i < d; ++i) q.row(i) /= q.row(i).sum();
      return exp_family::CategoricalParams{q, stationary};
    }
  }
  invalid("unknown family");
}

double nu_from_point(const FamilySpec& spec, const SchedulePoint& point, const ParamPath& path) {
  switch (spec.id) {
    case FamilyId::Gaussian: {
      const double ab = exp_family::gaussian(point).alpha_bar;
      return ab / (1.0 - ab);
    }
    case FamilyId::Beta:
    case FamilyId::Dirichlet:
    case FamilyId::VonMises:
    case FamilyId::VonMisesFisher: return exp_family::concentration(point);
    case FamilyId::Gamma: return exp_family::gamma(point).alpha - path.gamma_alpha_base;
    case FamilyId::Wishart: return exp_family::wishart(point).n - wishart_base(spec, path);
    case FamilyId::Categorical: {
      const auto& c = exp_family::categorical(point);
      for (int j = 0; j < spec.dim; ++j) {
        if (c.stationary[j] < 1.0) {
          const double ab = (c.q_bar(j, j) - c.stationary[j]) / (1.0 - c.stationary[j]);
          return ab / (1.0 - ab);
        }
      }
      return 0.0;
    }
  }
  return 0.0;
}

std::vector<double> log_grid(double lo, double hi, int n) {
  if (!(lo > 0.0 && hi > lo) || n < 2) invalid("log grid needs 0 < lo < hi and n >= 2");
  std::vector<double> out(static_cast<std::size_t>(n));
  const double a = std::log(lo);
  const double b = std::log(hi);
  for (int i = 0; i < n; ++i) out[i] = std::exp(a + (b - a) * i / (n - 1));
  out.front() = lo;
  out.back() = hi;
  return out;
}

std::vector<double> isotonic_increasing(std::span<const double> values) {
  struct Block {
    double sum;
    long count;
  };
  std::vector<Block> blocks;
  for (double v : values) {
    blocks.push_back({v, 1});
    while (blocks.size() > 1) {
      const Block& b = blocks.back();
      const Block& a = blocks[blocks.size() - 2];
      if (a.sum / a.count <= b.sum / b.count) break;
      const Block merged{a.sum + b.sum, a.count + b.count};
      blocks.pop_back();
      blocks.back() = merged;
    }
  }
  std::vector<double> out;
  out.reserve(values.size());
  for (const Block& b : blocks) out.insert(out.end(), static_cast<std::size_t>(b.count), b.sum / b.count);
  return out;
}

MiTable build_mi_table(const FamilySpec& spec, std::span<const double> nu_grid, const DataSampler& data,
                       const RegimeConfig& cfg, const ParamPath& path) {
  exp_family::validate(spec);
  if (nu_grid.empty()) invalid("nu grid is empty");
  for (std::size_t i = 0; i < nu_grid.size(); ++i) {
    if (!(nu_grid[i] >= 0.0) || (i > 0 && !(nu_grid[i] > nu_grid[i - 1]))) {
      invalid("nu grid must be non-negative and strictly increasing");
    }
  }
  MiTable table;
  table.spec = spec;
  table.path = path;
  table.K_high = cfg.K_high;
  table.K_mid = cfg.K_mid;
  table.K_low = cfg.K_low;
  table.budget = cfg.budget;
  table.rows.resize(nu_grid.size());

  const bool product = is_product_family(spec);
  FamilySpec coord = spec;
  if (product) coord.dim = 1;
  const int coords = product ? spec.dim : 1;

  parallel_for(nu_grid.size(), [&](std::size_t i) {
    Rng rng = make_stream(cfg.seed, i);
    MiRow total;
    total.nu = nu_grid[i];
    for (int c = 0; c < coords; ++c) {
      DataSampler sampler = data;
      if (product) {
        sampler = [&data, c](Rng& r) { return Vector::Constant(1, data(r)[c]); };
      }
      const MiRow row = estimate_row(coord, nu_grid[i], sampler, cfg, path, rng);
      total.mi += row.mi;
      total.lower += row.lower;
      total.upper += row.upper;
      total.estimator = row.estimator;
    }
    table.rows[i] = total;
  });

  fit_exponential_tail(table.rows, 25.0 * cfg.low);
  std::vector<double> raw(table.rows.size());
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = table.rows[i].mi;
  const std::vector<double> smooth = isotonic_increasing(raw);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    MiRow& r = table.rows[i];
    r.mi = std::max(0.0, smooth[i]);
    if (r.estimator == Estimator::Zero) r.mi = 0.0;
    r.lower = std::min(r.lower, r.mi);
    r.upper = std::max(r.upper, r.mi);
  }
  // Keep the smoothed column non-decreasing after clipping at zero.
  for (std::size_t i = 1; i < table.rows.size(); ++i) {
    table.rows[i].mi = std::max(table.rows[i].mi, table.rows[i - 1].mi);
    table.rows[i].upper = std::max(table.rows[i].upper, table.rows[i].mi);
  }
  return table;
}

double table_mi_at(const MiTable& table, double nu) {
  const auto& rows = table.rows;
  if (rows.empty()) invalid("MI table is empty");
  if (nu <= rows.front().nu) return rows.front().mi;
  if (nu >= rows.back().nu) return rows.back().mi;
  const auto it = std::upper_bound(rows.begin(), rows.end(), nu, [](double v, const MiRow& r) { return v < r.nu; });
  const MiRow& b = *it;
  const MiRow& a = *(it - 1);
  if (a.nu == nu) return a.mi;
  return interp_mi(a, b, nu);
}

namespace {

// Clamps to the table's range; clamp is -1 below the first row, +1 above the last.
double nu_for(const MiTable& table, double target, int& clamp) {
  const auto& rows = table.rows;
  if (rows.empty()) invalid("MI table is empty");
  clamp = 0;
  if (target <= rows.front().mi) {
    if (target < rows.front().mi - 1e-12) clamp = -1;
    return rows.front().nu;
  }
  if (target >= rows.back().mi) {
    if (target > rows.back().mi + 1e-12) clamp = 1;
    return rows.back().nu;
  }
  const auto it = std::lower_bound(rows.begin(), rows.end(), target, [](const MiRow& r, double v) { return r.mi < v; });
  if (it->mi == target) return it->nu;
  return interp_nu(*(it - 1), *it, target);
}

}  // namespace

double table_nu_for(const MiTable& table, double target) {
  int clamp = 0;
  const double nu = nu_for(table, target, clamp);
  if (clamp < 0) log::warn(fmt::format("target MI {} below table minimum {}; clamped", target, table.rows.front().mi));
  if (clamp > 0) log::warn(fmt::format("target MI {} above table maximum {}; clamped", target, table.rows.back().mi));
  return nu;
}

NoiseSchedule match_schedule(const MiTable& table, std::span<const double> target) {
  if (target.empty()) invalid("target MI sequence is empty");
  for (std::size_t i = 1; i < target.size(); ++i) {
    if (target[i] > target[i - 1]) {
      invalid(fmt::format("target MI increases at t={} ({} > {})", i + 1, target[i], target[i - 1]));
    }
  }
  NoiseSchedule s;
  s.spec = table.spec;
  s.T = static_cast<int>(target.size());
  s.provenance = Provenance::MiMatched;
  int below = 0, above = 0;
  for (int t = 1; t <= s.T; ++t) {
    int clamp = 0;
    const double nu = nu_for(table, target[t - 1], clamp);
    below += clamp < 0;
    above += clamp > 0;
    s.points.push_back(exp_family::make_point(s.spec, t, params_from_nu(s.spec, nu, table.path)));
    s.mi_trace.push_back(table_mi_at(table, nu));
  }
  if (below > 0) {
    log::warn(fmt::format("{} steps target MI below table minimum {}; clamped to nu={}", below, table.rows.front().mi,
                          table.rows.front().nu));
  }
  if (above > 0) {
    log::warn(fmt::format("{} steps target MI above table maximum {}; clamped to nu={}", above, table.rows.back().mi,
                          table.rows.back().nu));
  }
  validate(s);
  return s;
}

std::string to_csv(const MiTable& table) {
  std::string out = "nu,mi,lower,upper,estimator\n";
  for (const MiRow& r : table.rows) {
    out += fmt::format("{:.17g},{:.17g},{:.17g},{:.17g},{}\n", r.nu, r.mi, r.lower, r.upper, to_string(r.estimator));
  }
  return out;
}

MiTable mi_table_from_csv(const std::string& text, const FamilySpec& spec, const ParamPath& path) {
  MiTable table;
  table.spec = spec;
  table.path = path;
  std::istringstream in(text);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (header) {
      header = false;
      if (line.rfind("nu,", 0) == 0) continue;
    }
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) invalid(fmt::format("MI table row '{}' needs 5 columns", line));
    MiRow r;
    r.nu = std::stod(cells[0]);
    r.mi = std::stod(cells[1]);
    r.lower = std::stod(cells[2]);
    r.upper = std::stod(cells[3]);
    r.estimator = estimator_from_string(cells[4]);
    table.rows.push_back(r);
  }
  return table;
}

}  // namespace ssdiff::schedule
