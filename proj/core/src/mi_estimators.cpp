#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include <fmt/format.h>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "ssdiff/error.hpp"
#include "ssdiff/knn.hpp"
#include "ssdiff/log.hpp"
#include "ssdiff/schedule.hpp"
#include "ssdiff/special.hpp"

namespace ssdiff::schedule {

namespace {

constexpr double kNegHuge = -1e300;
// DSIVI refreshes its x0 pool every kPoolBatch outer samples; standard errors
// are computed from the independent batch means.
constexpr long kPoolBatch = 256;

double mixture_log_density(double x, const std::vector<double>& logw, const std::vector<double>& mean,
                           const std::vector<double>& var) {
  double m = -std::numeric_limits<double>::infinity();
  std::vector<double> terms(logw.size());
  for (std::size_t k = 0; k < logw.size(); ++k) {
    const double d = x - mean[k];
    terms[k] = logw[k] - 0.5 * (std::log(2.0 * std::numbers::pi * var[k]) + d * d / var[k]);
    m = std::max(m, terms[k]);
  }
  double s = 0.0;
  for (double t : terms) s += std::exp(t - m);
  return m + std::log(s);
}

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

MeanSe batch_mean_se(const std::vector<double>& sums, const std::vector<long>& counts) {
  long total = 0;
  double s = 0.0;
  for (std::size_t i = 0; i < sums.size(); ++i) {
    s += sums[i];
    total += counts[i];
  }
  const double mean = s / static_cast<double>(total);
  if (sums.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (std::size_t i = 0; i < sums.size(); ++i) {
    const double d = sums[i] / counts[i] - mean;
    ss += d * d * counts[i];
  }
  // Per-sample variance from the spread of the independent batch means.
  const double var_per_sample = ss / (static_cast<double>(sums.size()) - 1.0);
  return {mean, std::sqrt(var_per_sample / static_cast<double>(total))};
}

}  // namespace

std::vector<double> mi_gaussian_reference(std::span<const double> alpha_bar, double data_variance) {
  if (!(data_variance > 0.0)) throw Error(ErrorCode::InvalidInput, "data_variance must be positive");
  std::vector<double> out(alpha_bar.size());
  for (std::size_t i = 0; i < alpha_bar.size(); ++i) {
    const double ab = alpha_bar[i];
    if (ab >= 1.0) throw Error(ErrorCode::InvalidInput, "alpha_bar = 1 gives infinite mutual information");
    out[i] = 0.5 * std::log1p(data_variance * ab / (1.0 - ab));
  }
  return out;
}

double mi_gaussian_mixture_reference(double alpha_bar, const GaussianMixture1D& data) {
  if (alpha_bar >= 1.0) throw Error(ErrorCode::InvalidInput, "alpha_bar = 1 gives infinite mutual information");
  if (alpha_bar <= 0.0) return 0.0;
  const std::size_t n = data.weights.size();
  if (n == 0 || data.means.size() != n || data.stddevs.size() != n) {
    throw Error(ErrorCode::InvalidInput, "mixture components are inconsistent");
  }
  std::vector<double> logw(n), mean(n), var(n);
  double wsum = 0.0;
  for (double w : data.weights) wsum += w;
  const double noise = 1.0 - alpha_bar;
  std::vector<double> cuts;
  for (std::size_t k = 0; k < n; ++k) {
    logw[k] = std::log(data.weights[k] / wsum);
    mean[k] = std::sqrt(alpha_bar) * data.means[k];
    var[k] = alpha_bar * data.stddevs[k] * data.stddevs[k] + noise;
    const double sd = std::sqrt(var[k]);
    for (double z : {-14.0, -6.0, -3.0, -1.0, 0.0, 1.0, 3.0, 6.0, 14.0}) cuts.push_back(mean[k] + z * sd);
  }
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  const auto integrand = [&](double x) {
    const double lp = mixture_log_density(x, logw, mean, var);
    return -std::exp(lp) * lp;
  };
  double h = 0.0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    h += boost::math::quadrature::gauss_kronrod<double, 61>::integrate(integrand, cuts[i], cuts[i + 1], 12, 1e-13);
  }
  const double h_cond = 0.5 * (std::log(2.0 * std::numbers::pi * noise) + 1.0);
  return h - h_cond;
}

KsgResult mi_kraskov(const Matrix& x, const Matrix& y, int k, std::uint64_t jitter_seed) {
  const Eigen::Index n = x.rows();
  if (y.rows() != n) throw Error(ErrorCode::InvalidInput, "KSG needs equal sample counts");
  if (n < 100) throw Error(ErrorCode::InvalidInput, "KSG needs at least 100 samples");
  if (k < 1 || k >= n) throw Error(ErrorCode::InvalidInput, "KSG needs 1 <= k < N");
  const Eigen::Index dx = x.cols();
  const Eigen::Index dy = y.cols();
  knn::PointMatrix joint(n, dx + dy);
  joint.leftCols(dx) = x;
  joint.rightCols(dy) = y;

  KsgResult result;
  std::vector<double> eps(static_cast<std::size_t>(n));
  for (int attempt = 0; attempt < 2; ++attempt) {
    const knn::KdTree tree(joint, knn::Metric::Chebyshev);
    bool ties = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      eps[i] = tree.kth_distance(joint.row(i).data(), k, i);
      if (eps[i] <= 0.0) ties = true;
    }
    if (!ties) break;
    if (attempt == 1) throw Error(ErrorCode::EstimatorFailure, "KSG: duplicate points survive jitter");
    log::warn("KSG: duplicate points found; applying 1e-12 jitter");
    result.jittered = true;
    Rng rng(jitter_seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (Eigen::Index i = 0; i < joint.size(); ++i) {
      double& v = joint.data()[i];
      v += 1e-12 * std::max(1.0, std::abs(v)) * u(rng);
    }
  }
  const knn::KdTree tx(joint.leftCols(dx), knn::Metric::Chebyshev);
  const knn::KdTree ty(joint.rightCols(dy), knn::Metric::Chebyshev);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const knn::PointMatrix xi = joint.row(i).leftCols(dx);
    const knn::PointMatrix yi = joint.row(i).rightCols(dy);
    const long nx = tx.count_within(xi.data(), eps[i], true, i);
    const long ny = ty.count_within(yi.data(), eps[i], true, i);
    acc += special::digamma(nx + 1.0) + special::digamma(ny + 1.0);
  }
  result.mi = special::digamma(k) + special::digamma(static_cast<double>(n)) - acc / static_cast<double>(n);
  return result;
}

DsiviResult mi_dsivi_bounds(const FamilySpec& spec, const SchedulePoint& point, const DataSampler& data,
                            int K, long M, Rng& rng) {
  if (K < 1 || M < 1) throw Error(ErrorCode::InvalidInput, "DSIVI needs K >= 1 and M >= 1");
  const int s = exp_family::stat_size(spec);
  Matrix eta(K, s);
  Vector omega(K);
  Vector lq(K);
  std::vector<double> lower_sums, upper_sums;
  std::vector<long> counts;
  double cond_entropy = 0.0;
  long pool_draws = 0;
  const double log_k = std::log(static_cast<double>(K));
  const double log_k1 = std::log(static_cast<double>(K) + 1.0);

  for (long done = 0; done < M;) {
    for (int k = 0; k < K; ++k) {
      const Vector x0 = data(rng);
      eta.row(k) = exp_family::natural_params(spec, x0, point).cwiseMax(kNegHuge).transpose();
      omega[k] = exp_family::log_partition(spec, x0, point);
      if (pool_draws < 4096) {
        cond_entropy += exp_family::entropy(spec, x0, point);
        ++pool_draws;
      }
    }
    const long batch = std::min(kPoolBatch, M - done);
    double lo_sum = 0.0, up_sum = 0.0;
    for (long b = 0; b < batch; ++b) {
      const Vector x0 = data(rng);
      const Vector xt = exp_family::sample_forward(spec, x0, point, rng);
      const Vector stat = exp_family::sufficient_stat(spec, xt);
      const double lq0 = exp_family::stat_dot(exp_family::natural_params(spec, x0, point), stat) -
                         exp_family::log_partition(spec, x0, point);
      lq.noalias() = eta * stat;
      lq -= omega;
      const double m = std::max(lq.maxCoeff(), lq0);
      const double pool = (lq.array() - m).exp().sum();
      const double with0 = pool + std::exp(lq0 - m);
      lo_sum += lq0 - (m + std::log(with0) - log_k1);
      up_sum += lq0 - (m + std::log(pool) - log_k);
    }
    lower_sums.push_back(lo_sum);
    upper_sums.push_back(up_sum);
    counts.push_back(batch);
    done += batch;
  }
  const MeanSe lo = batch_mean_se(lower_sums, counts);
  const MeanSe up = batch_mean_se(upper_sums, counts);
  if (!std::isfinite(lo.mean) || !std::isfinite(up.mean)) {
    throw Error(ErrorCode::EstimatorFailure, "DSIVI produced a non-finite bound");
  }
  const double sigma = std::hypot(lo.se, up.se);
  if (lo.mean > up.mean + 3.0 * sigma) {
    throw Error(ErrorCode::EstimatorFailure,
                fmt::format("DSIVI bounds inverted: lower {} > upper {} + 3 sigma ({})", lo.mean, up.mean, sigma));
  }
  DsiviResult r;
  r.lower = lo.mean;
  r.upper = up.mean;
  r.se_lower = lo.se;
  r.se_upper = up.se;
  r.cond_entropy = pool_draws > 0 ? cond_entropy / static_cast<double>(pool_draws) : 0.0;
  r.K = K;
  r.M = M;
  return r;
}

double mi_categorical(std::span<const Matrix> q_bars, const Eigen::VectorXd& token_frequencies, long M,
                      Rng& rng) {
  const Eigen::Index d = token_frequencies.size();
  if (d < 1 || (token_frequencies.array() < 0.0).any() ||
      std::abs(token_frequencies.sum() - 1.0) > 1e-9) {
    throw Error(ErrorCode::InvalidInput, "token frequencies must form a distribution");
  }
  for (const Matrix& q : q_bars) {
    if (q.rows() != d || q.cols() != d) throw Error(ErrorCode::Shape, "transition matrices must be D x D");
  }
  std::vector<Matrix> log_q;
  log_q.reserve(q_bars.size());
  for (const Matrix& q : q_bars) log_q.push_back(q.array().log().matrix());
  const Eigen::ArrayXd log_freq = token_frequencies.array().log();
  std::discrete_distribution<int> pick_x0(token_frequencies.data(), token_frequencies.data() + d);

  double acc = 0.0;
  Eigen::ArrayXd g(d);
  for (long m = 0; m < M; ++m) {
    const int x0 = pick_x0(rng);
    g.setZero();
    for (std::size_t s = 0; s < q_bars.size(); ++s) {
      const Eigen::RowVectorXd row = q_bars[s].row(x0);
      std::discrete_distribution<int> draw(row.data(), row.data() + d);
      const int xs = draw(rng);
      g += log_q[s].col(xs).array();
    }
    const Eigen::ArrayXd a = g + log_freq;
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < d; ++i) mx = std::max(mx, a[i]);
    double se = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) {
      if (std::isfinite(a[i])) se += std::exp(a[i] - mx);
    }
    acc += g[x0] - (mx + std::log(se));
  }
  return acc / static_cast<double>(M);
}

}  // namespace ssdiff::schedule
