#include "ssdiff/tail.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include <fmt/format.h>
#include <json.hpp>

#include "ssdiff/error.hpp"
#include "ssdiff/io.hpp"
#include "ssdiff/special.hpp"

namespace ssdiff::tail {

using exp_family::FamilyId;
using nlohmann::json;

namespace {

Vector softmax_blocks(const Vector& g, int d) {
  Vector out(g.size());
  for (Eigen::Index off = 0; off < g.size(); off += d) {
    const auto block = g.segment(off, d);
    const double m = block.maxCoeff();
    if (!std::isfinite(m)) throw Error(ErrorCode::NumericalOverflow, "tail block has no finite entry");
    double s = 0.0;
    for (int i = 0; i < d; ++i) {
      out[off + i] = std::isfinite(block[i]) ? std::exp(block[i] - m) : 0.0;
      s += out[off + i];
    }
    out.segment(off, d) /= s;
  }
  return out;
}

struct Welford {
  long n = 0;
  Vector mean;
  Vector m2;

  void add(const Vector& x) {
    if (n == 0) {
      mean = Vector::Zero(x.size());
      m2 = Vector::Zero(x.size());
    }
    ++n;
    const Vector d = x - mean;
    mean += d / static_cast<double>(n);
    m2 += d.cwiseProduct(x - mean);
  }
  [[nodiscard]] Vector stddev() const {
    if (n < 2) return Vector::Constant(mean.size(), kStdFloor);
    return (m2 / static_cast<double>(n)).cwiseSqrt().cwiseMax(kStdFloor);
  }
};

std::vector<double> to_vec(const Vector& v) { return {v.data(), v.data() + v.size()}; }

Vector from_vec(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// Quantized G for grouping; -inf entries map to a sentinel.
std::vector<long long> quantize(const Vector& g) {
  std::vector<long long> key(static_cast<std::size_t>(g.size()));
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    key[i] = std::isfinite(g[i]) ? std::llround(g[i] / 1e-9) : std::numeric_limits<long long>::min();
  }
  return key;
}

}  // namespace

Vector tail_term(const FamilySpec& spec, const exp_family::SchedulePoint& point, const Vector& x) {
  if (spec.id == FamilyId::Categorical) {
    const auto& c = exp_family::categorical(point);
    const int d = spec.dim;
    if (x.size() != exp_family::point_size(spec)) throw Error(ErrorCode::Shape, "token block has the wrong size");
    Vector out(x.size());
    for (int k = 0; k < spec.tokens; ++k) {
      Eigen::Index tok = 0;
      x.segment(k * d, d).maxCoeff(&tok);
      for (int i = 0; i < d; ++i) out[k * d + i] = std::log(c.q_bar(i, tok));
    }
    return out;
  }
  if (point.a == 0.0) return Vector::Zero(exp_family::stat_size(spec));
  return point.a * exp_family::sufficient_stat(spec, x);
}

double tail_scale(const NoiseSchedule& schedule, int t) {
  if (schedule.spec.id != FamilyId::Gaussian) return 1.0;
  double odds = 0.0;
  for (int s = schedule.T; s >= t; --s) {
    const double ab = exp_family::gaussian(schedule.at(s)).alpha_bar;
    odds += ab / (1.0 - ab);
  }
  if (!(odds > 0.0)) throw Error(ErrorCode::DomainBoundary, fmt::format("tail at t={} carries no signal", t));
  return 1.0 / std::sqrt(odds * (1.0 + odds));
}

TailState tail_statistic(const NoiseSchedule& schedule, std::span<const Vector> x_tail) {
  const int len = static_cast<int>(x_tail.size());
  if (len < 1 || len > schedule.T) {
    throw Error(ErrorCode::Shape, fmt::format("tail of length {} does not fit T = {}", len, schedule.T));
  }
  TailState st;
  st.t = schedule.T - len + 1;
  st.raw = Vector::Zero(exp_family::stat_size(schedule.spec));
  for (int s = schedule.T; s >= st.t; --s) st.raw += tail_term(schedule.spec, schedule.at(s), x_tail[s - st.t]);
  st.g = tail_scale(schedule, st.t) * st.raw;
  return st;
}

TailState tail_update(const NoiseSchedule& schedule, const TailState& state, const Vector& x_prev) {
  if (state.t < 2) throw Error(ErrorCode::Step, "cannot extend the tail below t = 1");
  TailState next;
  next.t = state.t - 1;
  next.schedule_hash = state.schedule_hash;
  next.raw = state.raw + tail_term(schedule.spec, schedule.at(next.t), x_prev);
  next.g = tail_scale(schedule, next.t) * next.raw;
  return next;
}

std::vector<Vector> sample_all_tails(const NoiseSchedule& schedule, const Vector& x0, Rng& rng) {
  std::vector<Vector> out(static_cast<std::size_t>(schedule.T));
  Vector raw = Vector::Zero(exp_family::stat_size(schedule.spec));
  const bool gaussian = schedule.spec.id == FamilyId::Gaussian;
  double odds = 0.0;
  for (int t = schedule.T; t >= 1; --t) {
    const auto& point = schedule.at(t);
    raw += tail_term(schedule.spec, point, exp_family::sample_forward(schedule.spec, x0, point, rng));
    double scale = 1.0;
    if (gaussian) {
      const double ab = exp_family::gaussian(point).alpha_bar;
      odds += ab / (1.0 - ab);
      scale = 1.0 / std::sqrt(odds * (1.0 + odds));
    }
    out[t - 1] = scale * raw;
  }
  return out;
}

std::string_view to_string(NormalizeMode mode) noexcept {
  switch (mode) {
    case NormalizeMode::ZScore: return "zscore";
    case NormalizeMode::MatchTOfX0: return "match_T_of_x0";
    case NormalizeMode::Softmax: return "softmax";
  }
  return "unknown";
}

NormalizeMode normalize_mode_from_string(std::string_view name) {
  for (NormalizeMode m : {NormalizeMode::ZScore, NormalizeMode::MatchTOfX0, NormalizeMode::Softmax}) {
    if (to_string(m) == name) return m;
  }
  throw Error(ErrorCode::InvalidInput, fmt::format("unknown normalization mode '{}'", name));
}

NormalizeMode default_mode(const FamilySpec& spec) noexcept {
  return spec.id == FamilyId::Categorical ? NormalizeMode::Softmax : NormalizeMode::ZScore;
}

TailNormalizer fit_tail_normalizer(const NoiseSchedule& schedule, std::span<const Vector> dataset, int n_mc,
                                   Rng& rng) {
  if (dataset.empty()) throw Error(ErrorCode::InvalidInput, "cannot fit a tail normalizer on an empty dataset");
  if (n_mc < 1) throw Error(ErrorCode::InvalidInput, "n_mc must be >= 1");
  const FamilySpec& spec = schedule.spec;
  TailNormalizer nz;
  nz.spec = spec;
  nz.T = schedule.T;
  nz.schedule_hash = schedule::schedule_hash(schedule);
  nz.n_mc = n_mc;
  const int s = exp_family::stat_size(spec);

  Welford target;
  for (const Vector& x0 : dataset) target.add(exp_family::sufficient_stat(spec, x0));
  nz.target_mean = target.mean;
  nz.target_std = target.stddev();

  if (spec.id == FamilyId::Categorical) {
    // Softmax mode needs no statistics; -inf entries would poison a z-score.
    nz.mean.assign(static_cast<std::size_t>(schedule.T), Vector::Zero(s));
    nz.std.assign(static_cast<std::size_t>(schedule.T), Vector::Ones(s));
    return nz;
  }
  std::vector<Welford> acc(static_cast<std::size_t>(schedule.T));
  for (const Vector& x0 : dataset) {
    for (int m = 0; m < n_mc; ++m) {
      const std::vector<Vector> tails = sample_all_tails(schedule, x0, rng);
      for (int t = 0; t < schedule.T; ++t) acc[t].add(tails[t]);
    }
  }
  for (const Welford& w : acc) {
    nz.mean.push_back(w.mean);
    nz.std.push_back(w.stddev());
  }
  return nz;
}

Vector normalize_tail(const TailState& state, const TailNormalizer& nz, NormalizeMode mode) {
  if (state.t < 1 || state.t > nz.T) throw Error(ErrorCode::Step, fmt::format("no normalizer entry for t={}", state.t));
  if (nz.schedule_hash != 0 && state.schedule_hash != 0 && nz.schedule_hash != state.schedule_hash) {
    throw Error(ErrorCode::HashMismatch, "normalizer and tail state use different schedules");
  }
  switch (mode) {
    case NormalizeMode::Softmax:
      if (nz.spec.id != FamilyId::Categorical) {
        throw Error(ErrorCode::UnsupportedFamily, "softmax normalization is defined for Categorical tails");
      }
      return softmax_blocks(state.g, nz.spec.dim);
    case NormalizeMode::ZScore:
    case NormalizeMode::MatchTOfX0: {
      const Vector z = (state.g - nz.mean[state.t - 1]).cwiseQuotient(nz.std[state.t - 1]);
      if (mode == NormalizeMode::ZScore) return z;
      return nz.target_mean + nz.target_std.cwiseProduct(z);
    }
  }
  return {};
}

Vector normalize_for_model(const TailState& state, const TailNormalizer& normalizer) {
  return normalize_tail(state, normalizer, default_mode(normalizer.spec));
}

Vector tail_to_domain(const FamilySpec& spec, const Vector& g) {
  switch (spec.id) {
    case FamilyId::Gaussian: return g;
    case FamilyId::Beta: return g.unaryExpr([](double v) { return special::sigmoid(v); });
    case FamilyId::Dirichlet: {
      const Vector e = (g.array() - g.maxCoeff()).exp().matrix();
      return e / e.sum();
    }
    case FamilyId::VonMises: {
      Vector out(spec.dim);
      for (int i = 0; i < spec.dim; ++i) out[i] = std::atan2(g[2 * i + 1], g[2 * i]);
      return out;
    }
    case FamilyId::VonMisesFisher: {
      const double n = g.norm();
      if (!(n > 0.0)) throw Error(ErrorCode::DegenerateDirection, "zero tail statistic has no direction");
      return g / n;
    }
    case FamilyId::Gamma: return g.cwiseMax(exp_family::kGammaHeadMin);
    case FamilyId::Wishart: {
      const int p = spec.dim;
      const Matrix m = Eigen::Map<const Matrix>(g.data(), p, p);
      Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (m + m.transpose()));
      const Vector lam = eig.eigenvalues().cwiseMax(exp_family::kWishartJitter);
      const Matrix out = eig.eigenvectors() * lam.asDiagonal() * eig.eigenvectors().transpose();
      return Eigen::Map<const Vector>(out.data(), out.size());
    }
    case FamilyId::Categorical:
      throw Error(ErrorCode::UnsupportedFamily, "one-hot statistics are not invertible; use softmax mode");
  }
  return {};
}

std::string to_json(const TailNormalizer& nz) {
  json j;
  j["format"] = "ssdiff-tail-normalizer";
  j["version"] = 1;
  j["family_id"] = std::string(exp_family::to_string(nz.spec.id));
  j["dim"] = nz.spec.dim;
  j["tokens"] = nz.spec.tokens;
  j["T"] = nz.T;
  j["schedule_hash"] = io::hex64(nz.schedule_hash);
  j["n_mc"] = nz.n_mc;
  json per_t = json::object();
  for (int t = 1; t <= nz.T; ++t) {
    per_t[std::to_string(t)] = {{"mean", to_vec(nz.mean[t - 1])}, {"std", to_vec(nz.std[t - 1])}};
  }
  j["t"] = per_t;
  j["target_mean"] = to_vec(nz.target_mean);
  j["target_std"] = to_vec(nz.target_std);
  return j.dump();
}

TailNormalizer normalizer_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    TailNormalizer nz;
    nz.spec.id = exp_family::family_from_string(j.at("family_id").get<std::string>());
    nz.spec.dim = j.at("dim").get<int>();
    nz.spec.tokens = j.value("tokens", 1);
    nz.T = j.at("T").get<int>();
    nz.schedule_hash = std::stoull(j.at("schedule_hash").get<std::string>(), nullptr, 16);
    nz.n_mc = j.value("n_mc", 0);
    const int s = exp_family::stat_size(nz.spec);
    for (int t = 1; t <= nz.T; ++t) {
      const json& e = j.at("t").at(std::to_string(t));
      nz.mean.push_back(from_vec(e.at("mean").get<std::vector<double>>()));
      nz.std.push_back(from_vec(e.at("std").get<std::vector<double>>()));
      if (nz.mean.back().size() != s || nz.std.back().size() != s) {
        throw Error(ErrorCode::Shape, fmt::format("normalizer entry t={} has the wrong size", t));
      }
    }
    nz.target_mean = from_vec(j.at("target_mean").get<std::vector<double>>());
    nz.target_std = from_vec(j.at("target_std").get<std::vector<double>>());
    return nz;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidInput, fmt::format("tail normalizer JSON: {}", e.what()));
  }
}

void check_compatible(const TailNormalizer& nz, const NoiseSchedule& schedule) {
  const std::uint64_t h = schedule::schedule_hash(schedule);
  if (nz.schedule_hash != h) {
    throw Error(ErrorCode::HashMismatch, fmt::format("normalizer fitted on schedule {} but got {}",
                                                     io::hex64(nz.schedule_hash), io::hex64(h)));
  }
}

SufficiencyReport verify_sufficiency(std::span<const Matrix> q_bars, const Eigen::VectorXd& data_law) {
  const int T = static_cast<int>(q_bars.size());
  const int d = static_cast<int>(data_law.size());
  if (T < 1 || d < 2) throw Error(ErrorCode::InvalidInput, "need T >= 1 and D >= 2");
  for (const Matrix& q : q_bars) {
    if (q.rows() != d || q.cols() != d) throw Error(ErrorCode::Shape, "transition matrices must be D x D");
  }
  long total = 0;
  for (int len = 1; len <= T; ++len) {
    long count = 1;
    for (int i = 0; i < len; ++i) {
      count *= d;
      if (count > kSufficiencyCap) break;
    }
    total += count;
    if (total > kSufficiencyCap) {
      throw Error(ErrorCode::SizeCap, fmt::format("{} tails exceed the enumeration cap of {}", total, kSufficiencyCap));
    }
  }

  SufficiencyReport rep;
  const Eigen::ArrayXd log_p = data_law.array().log();
  std::vector<Eigen::ArrayXXd> log_q;
  for (const Matrix& q : q_bars) log_q.push_back(q.array().log());

  for (int t = 1; t <= T; ++t) {
    const int len = T - t + 1;
    long count = 1;
    for (int i = 0; i < len; ++i) count *= d;

    struct Entry {
      Eigen::VectorXd posterior;  // q(x_{t-1} | x_{t:T})
      Eigen::VectorXd from_g;     // the same, computed from G_t alone
      std::vector<long long> key;
      double mass = 0.0;
    };
    std::vector<Entry> entries;
    std::map<std::vector<long long>, std::pair<Eigen::VectorXd, double>> groups;
    std::vector<int> tail(static_cast<std::size_t>(len));
    for (long code = 0; code < count; ++code) {
      long c = code;
      for (int i = 0; i < len; ++i) {
        tail[i] = static_cast<int>(c % d);
        c /= d;
      }
      Eigen::VectorXd g = Eigen::VectorXd::Zero(d);
      for (int i = 0; i < len; ++i) {
        const int s = t + i;
        for (int x0 = 0; x0 < d; ++x0) g[x0] += log_q[s - 1](x0, tail[i]);
      }
      // Joint over x0 by direct product of transition probabilities.
      Eigen::VectorXd joint(d);
      for (int x0 = 0; x0 < d; ++x0) {
        double pr = data_law[x0];
        for (int i = 0; i < len; ++i) pr *= q_bars[t + i - 1](x0, tail[i]);
        joint[x0] = pr;
      }
      const double mass = joint.sum();
      if (!(mass > 0.0)) continue;
      const Eigen::VectorXd post_x0 = joint / mass;

      Eigen::ArrayXd lw = g.array() + log_p;
      const double m = lw.maxCoeff();
      Eigen::VectorXd g_x0 = Eigen::VectorXd::Zero(d);
      for (int x0 = 0; x0 < d; ++x0) g_x0[x0] = std::isfinite(lw[x0]) ? std::exp(lw[x0] - m) : 0.0;
      g_x0 /= g_x0.sum();

      Entry e;
      if (t == 1) {
        e.posterior = post_x0;
        e.from_g = g_x0;
      } else {
        e.posterior = q_bars[t - 2].transpose() * post_x0;
        e.from_g = q_bars[t - 2].transpose() * g_x0;
      }
      e.key = quantize(g);
      e.mass = mass;
      auto [it, fresh] = groups.try_emplace(e.key, Eigen::VectorXd::Zero(d), 0.0);
      it->second.first += mass * e.posterior;
      it->second.second += mass;
      entries.push_back(std::move(e));
      ++rep.tails;
    }
    rep.groups += static_cast<long>(groups.size());
    for (const Entry& e : entries) {
      const auto& grp = groups.at(e.key);
      const Eigen::VectorXd group_post = grp.first / grp.second;
      rep.max_group_discrepancy =
          std::max(rep.max_group_discrepancy, (e.posterior - group_post).cwiseAbs().maxCoeff());
      rep.max_g_only_discrepancy =
          std::max(rep.max_g_only_discrepancy, (e.posterior - e.from_g).cwiseAbs().maxCoeff());
    }
  }
  rep.max_discrepancy = std::max(rep.max_group_discrepancy, rep.max_g_only_discrepancy);
  return rep;
}

}  // namespace ssdiff::tail
