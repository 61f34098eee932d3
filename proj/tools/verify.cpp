#include "verify.hpp"

#include <chrono>
#include <cmath>
#include <numbers>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "ssdiff/analysis.hpp"
#include "ssdiff/io.hpp"
#include "ssdiff/schedule.hpp"
#include "ssdiff/special.hpp"
#include "ssdiff/tail.hpp"

namespace ssdiff::cli {

namespace {

using Clock = std::chrono::steady_clock;

Check at_most(std::string name, double value, double threshold) {
  return {std::move(name), value, threshold, value <= threshold};
}

Check at_least(std::string name, double value, double threshold) {
  return {std::move(name), value, threshold, value >= threshold};
}

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

Eigen::MatrixXd random_stochastic(int d, Rng& rng) {
  Eigen::MatrixXd m(d, d);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) m(i, j) = gamma_variate(rng, 1.0);
    m.row(i) /= m.row(i).sum();
  }
  return m;
}

}  // namespace

bool SuiteResult::passed() const {
  for (const Check& c : checks) {
    if (!c.passed) return false;
  }
  return true;
}

SuiteResult verify_sufficiency(const VerifyOptions& o) {
  const auto start = Clock::now();
  SuiteResult r{"sufficiency", {}, 0.0};
  for (int d : o.D) {
    for (int T : o.T) {
      double worst = 0.0;
      for (int s = 0; s < o.stacks; ++s) {
        Rng rng = make_stream(o.seed, static_cast<std::uint64_t>(1000 * d + 100 * T + s));
        std::vector<Eigen::MatrixXd> q;
        for (int t = 0; t < T; ++t) q.push_back(random_stochastic(d, rng));
        Eigen::VectorXd law = random_stochastic(d, rng).row(0).transpose();
        worst = std::max(worst, tail::verify_sufficiency(q, law).max_discrepancy);
      }
      r.checks.push_back(at_most(fmt::format("posterior discrepancy D={} T={}", d, T), worst, 1e-10));
    }
  }
  r.seconds = seconds_since(start);
  return r;
}

SuiteResult verify_equivalence(const VerifyOptions& o) {
  const auto start = Clock::now();
  SuiteResult r{"equivalence", {}, 0.0};
  const std::vector<double> ab = schedule::cosine_ddpm_schedule(o.equivalence_T);
  analysis::EquivalenceOptions eo;
  eo.seed = o.seed;
  const analysis::EquivalenceReport rep = analysis::gaussian_equivalence_report(ab, o.equivalence_n_mc, eo);
  r.checks.push_back(at_most("KL-term identity", rep.kl_identity_max, 1e-9));
  r.checks.push_back(at_most("forward moments (MC standard errors)", rep.forward_max_z, 4.0));
  r.checks.push_back(at_most("reverse moments", rep.reverse_max, 1e-9));
  r.seconds = seconds_since(start);
  return r;
}

SuiteResult verify_gap(const VerifyOptions& o) {
  const auto start = Clock::now();
  SuiteResult r{"gap", {}, 0.0};
  const double optimum = -0.5 * std::log(2.0 * std::numbers::pi) - 0.5;
  std::string csv = "T,gap,l_star,l_markov,markov_penalty\n";
  double previous = 0.0;
  bool monotone = true;
  double min_gap = std::numeric_limits<double>::infinity();
  double chain_err = 0.0;
  for (std::size_t i = 0; i < o.gap_T.size(); ++i) {
    const int T = o.gap_T[i];
    const auto ab = schedule::ddpm_to_ss_gaussian(schedule::cosine_ddpm_schedule(T));
    const analysis::GapReport g = analysis::markov_gap_gaussian(ab);
    csv += fmt::format("{},{:.12g},{:.12g},{:.12g},{:.12g}\n", T, g.gap, g.l_star, g.l_markov, g.markov_penalty);
    if (i > 0 && !(g.gap > previous)) monotone = false;
    previous = g.gap;
    min_gap = std::min(min_gap, g.gap);
    chain_err = std::max(chain_err, std::abs(g.l_star_chain - optimum));
  }
  r.checks.push_back(at_least("gap positive", min_gap, 0.0));
  r.checks.push_back({"gap increasing in T", monotone ? 1.0 : 0.0, 1.0, monotone});
  r.checks.push_back(at_most("exact-reverse bound vs -log(2 pi)/2 - 1/2", chain_err, 1e-12));

  const auto ab = schedule::ddpm_to_ss_gaussian(schedule::cosine_ddpm_schedule(o.gap_mc_T));
  const analysis::GapReport g = analysis::markov_gap_gaussian(ab);
  const analysis::GapEstimate mc = analysis::markov_gap_mc(ab, o.gap_mc_n, o.seed);
  r.checks.push_back(at_most(fmt::format("analytic vs Monte Carlo gap at T={}", o.gap_mc_T),
                             std::abs(mc.gap - g.gap) / g.gap, 0.05));
  if (!o.gap_csv.empty()) io::write_atomic(o.gap_csv, csv);
  r.seconds = seconds_since(start);
  return r;
}

double beta_mi_quadrature(double nu, double lo, double hi) {
  using boost::math::quadrature::gauss_kronrod;
  const double width = hi - lo;
  const auto log_beta_pdf = [](double x, double a, double b) {
    return (a - 1.0) * std::log(x) + (b - 1.0) * std::log1p(-x) - special::log_beta(a, b);
  };
  const auto marginal = [&](double x) {
    const auto f = [&](double x0) { return std::exp(log_beta_pdf(x, 1.0 + nu * x0, 1.0 + nu * (1.0 - x0))) / width; };
    return gauss_kronrod<double, 61>::integrate(f, lo, hi, 10, 1e-13);
  };
  const auto neg_plogp = [&](double x) {
    const double p = marginal(x);
    return p > 0.0 ? -p * std::log(p) : 0.0;
  };
  const double h_marginal = gauss_kronrod<double, 61>::integrate(neg_plogp, 0.0, 1.0, 12, 1e-12);
  const auto cond = [&](double x0) {
    const double a = 1.0 + nu * x0, b = 1.0 + nu * (1.0 - x0);
    const double h = special::log_beta(a, b) - (a - 1.0) * special::digamma(a) - (b - 1.0) * special::digamma(b) +
                     (a + b - 2.0) * special::digamma(a + b);
    return h / width;
  };
  const double h_cond = gauss_kronrod<double, 61>::integrate(cond, lo, hi, 10, 1e-13);
  return h_marginal - h_cond;
}

SuiteResult verify_estimators(const VerifyOptions& o) {
  const auto start = Clock::now();
  SuiteResult r{"estimators", {}, 0.0};
  for (double rho : {0.0, 0.5, 0.9}) {
    Rng rng = make_stream(o.seed, static_cast<std::uint64_t>(rho * 100) + 7);
    Eigen::MatrixXd x(o.ksg_n, 1), y(o.ksg_n, 1);
    for (long i = 0; i < o.ksg_n; ++i) {
      const double a = standard_normal(rng);
      x(i, 0) = a;
      y(i, 0) = rho * a + std::sqrt(1.0 - rho * rho) * standard_normal(rng);
    }
    const double truth = -0.5 * std::log1p(-rho * rho);
    const double est = schedule::mi_kraskov(x, y, o.ksg_k).mi;
    r.checks.push_back(at_most(fmt::format("Kraskov error at rho={}", rho), std::abs(est - truth), 0.05));
  }

  const double nu = 10.0, lo = 0.2, hi = 0.8;
  const double truth = beta_mi_quadrature(nu, lo, hi);
  const exp_family::FamilySpec spec{exp_family::FamilyId::Beta, 1, 1};
  const auto point = exp_family::make_point(spec, 0, exp_family::ConcentrationParams{nu});
  const schedule::DataSampler data = [lo, hi](Rng& rng) { return exp_family::Vector::Constant(1, lo + (hi - lo) * uniform01(rng)); };
  Rng rng50 = make_stream(o.seed, 50);
  Rng rng1000 = make_stream(o.seed, 1000);
  const auto b50 = schedule::mi_dsivi_bounds(spec, point, data, 50, o.dsivi_M, rng50);
  const auto b1000 = schedule::mi_dsivi_bounds(spec, point, data, 1000, o.dsivi_M, rng1000);
  // Bounds are Monte Carlo averages; each side may miss the truth by 3 standard errors.
  r.checks.push_back(at_most("DSIVI lower bound below quadrature MI (K=1000, 3 se)",
                             (b1000.lower - truth) / std::max(b1000.se_lower, 1e-12), 3.0));
  r.checks.push_back(at_least("DSIVI upper bound above quadrature MI (K=1000, 3 se)",
                              (b1000.upper - truth) / std::max(b1000.se_upper, 1e-12), -3.0));
  r.checks.push_back(at_least("DSIVI width shrink K=50 -> 1000", (b50.upper - b50.lower) - (b1000.upper - b1000.lower), 0.0));
  r.seconds = seconds_since(start);
  return r;
}

std::string report_json(const std::vector<SuiteResult>& suites) {
  nlohmann::json j;
  j["format"] = "ssdiff-verify";
  j["build"] = std::string(io::build_version());
  bool all = true;
  for (const SuiteResult& s : suites) {
    nlohmann::json js;
    js["suite"] = s.suite;
    js["passed"] = s.passed();
    js["seconds"] = s.seconds;
    for (const Check& c : s.checks) {
      js["checks"].push_back({{"name", c.name}, {"value", c.value}, {"threshold", c.threshold}, {"passed", c.passed}});
    }
    all = all && s.passed();
    j["suites"].push_back(js);
  }
  j["passed"] = all;
  return j.dump(1);
}

}  // namespace ssdiff::cli
