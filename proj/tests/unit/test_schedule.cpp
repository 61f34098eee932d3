#include <cmath>
#include <numbers>

#include <doctest.h>

#include "generators.hpp"
#include "ssdiff/error.hpp"
#include "ssdiff/schedule.hpp"

using namespace ssdiff;
using namespace ssdiff::schedule;
using exp_family::FamilyId;

namespace {

double odds(double ab) { return ab / (1.0 - ab); }

DataSampler standard_normal_data() {
  return [](Rng& rng) { return Vector::Constant(1, standard_normal(rng)); };
}

// Exact I(x0; x) for one categorical step by enumeration of all (x0, x) pairs.
double enumerate_mi(const Matrix& q, const Eigen::VectorXd& p) {
  const Eigen::RowVectorXd marginal = p.transpose() * q;
  double mi = 0.0;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    for (Eigen::Index j = 0; j < q.cols(); ++j) {
      if (p[i] > 0.0 && q(i, j) > 0.0) mi += p[i] * q(i, j) * std::log(q(i, j) / marginal[j]);
    }
  }
  return mi;
}

}  // namespace

TEST_SUITE("schedule") {
  TEST_CASE("cosine DDPM schedule") {
    const std::vector<double> ab = cosine_ddpm_schedule(1000);
    REQUIRE(ab.size() == 1000);
    CHECK(ab.front() < 1.0);
    CHECK(ab.back() < 1e-4);
    for (std::size_t i = 1; i < ab.size(); ++i) CHECK(ab[i] < ab[i - 1]);
    // f(t) / f(0) with f(t) = cos^2((t / T + s) / (1 + s) pi / 2) at t = 1.
    const auto f = [](double t) {
      const double c = std::cos((t / 1000.0 + 0.008) / 1.008 * std::numbers::pi / 2.0);
      return c * c;
    };
    CHECK(ab.front() == doctest::Approx(f(1.0) / f(0.0)).epsilon(1e-14));
    CHECK_THROWS_AS((void)cosine_ddpm_schedule(0), Error);
  }

  TEST_CASE("DDPM to star-shaped transform") {
    const std::vector<double> ab{0.5, 0.25};
    const std::vector<double> ss = ddpm_to_ss_gaussian(ab);
    CHECK(ss[1] == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(ss[0] == doctest::Approx(0.4).epsilon(1e-15));
    const std::vector<double> bad{0.25, 0.5};
    CHECK_THROWS_AS((void)ddpm_to_ss_gaussian(bad), Error);
  }

  TEST_CASE("transform telescopes and inverts") {
    Rng rng = make_stream(21, 0);
    for (int trial = 0; trial < 20; ++trial) {
      const int T = 2 + static_cast<int>(uniform01(rng) * 200);
      std::vector<double> ab(static_cast<std::size_t>(T));
      double v = testing::uniform(rng, 0.9, 0.9999);
      for (double& a : ab) {
        a = v;
        v *= testing::uniform(rng, 0.5, 0.999);
      }
      const std::vector<double> ss = ddpm_to_ss_gaussian(ab);
      double tail = 0.0, worst = 0.0;
      for (int t = T; t >= 1; --t) {
        tail += odds(ss[t - 1]);
        worst = std::max(worst, std::abs(tail - odds(ab[t - 1])) / std::max(1.0, odds(ab[t - 1])));
      }
      CHECK(worst <= 1e-12);
      const std::vector<double> back = ss_to_ddpm_gaussian(ss);
      for (int t = 0; t < T; ++t) CHECK(back[t] == doctest::Approx(ab[t]).epsilon(1e-12));
    }
  }

  TEST_CASE("Gaussian MI reference") {
    const std::vector<double> ab{0.5, 0.2};
    const std::vector<double> mi = mi_gaussian_reference(ab, 3.0);
    CHECK(mi[0] == doctest::Approx(0.5 * std::log(4.0)).epsilon(1e-15));
    CHECK(mi[1] == doctest::Approx(0.5 * std::log(1.75)).epsilon(1e-15));

    // A one-component mixture reduces to the Gaussian formula.
    const GaussianMixture1D single{{1.0}, {0.3}, {1.5}};
    CHECK(mi_gaussian_mixture_reference(0.5, single) == doctest::Approx(0.5 * std::log1p(2.25)).epsilon(1e-6));
  }

  TEST_CASE("Kraskov on independent samples") {
    Rng rng = make_stream(22, 0);
    const int n = 100000;
    Matrix x(n, 1), y(n, 1);
    for (int i = 0; i < n; ++i) {
      x(i, 0) = standard_normal(rng);
      y(i, 0) = standard_normal(rng);
    }
    CHECK(std::abs(mi_kraskov(x, y, 10).mi) <= 0.02);
  }

  TEST_CASE("Kraskov on a correlated Gaussian") {
    Rng rng = make_stream(23, 0);
    const int n = 20000;
    const double rho = 0.5;
    Matrix x(n, 1), y(n, 1);
    for (int i = 0; i < n; ++i) {
      x(i, 0) = standard_normal(rng);
      y(i, 0) = rho * x(i, 0) + std::sqrt(1 - rho * rho) * standard_normal(rng);
    }
    CHECK(std::abs(mi_kraskov(x, y, 10).mi + 0.5 * std::log(1 - rho * rho)) <= 0.05);
  }

  TEST_CASE("categorical MI") {
    Rng rng = make_stream(24, 0);
    const int d = 3;
    const Eigen::VectorXd uniform = Eigen::VectorXd::Constant(d, 1.0 / d);
    const Matrix flat = Matrix::Constant(d, d, 1.0 / d);
    CHECK(std::abs(mi_categorical(std::span<const Matrix>(&flat, 1), uniform, 20000, rng)) <= 0.01);
    const Matrix id = Matrix::Identity(d, d);
    CHECK(mi_categorical(std::span<const Matrix>(&id, 1), uniform, 20000, rng) ==
          doctest::Approx(std::log(3.0)).epsilon(1e-3));
    const Matrix q = 0.8 * Matrix::Identity(d, d) + 0.1 * (Matrix::Ones(d, d) - Matrix::Identity(d, d));
    Eigen::VectorXd p(3);
    p << 0.5, 0.3, 0.2;
    CHECK(std::abs(mi_categorical(std::span<const Matrix>(&q, 1), p, 50000, rng) - enumerate_mi(q, p)) <= 0.01);
  }

  TEST_CASE("DSIVI bounds") {
    Rng rng = make_stream(25, 0);
    const exp_family::FamilySpec beta{FamilyId::Beta, 1, 1};
    const DataSampler unit = [](Rng& r) { return Vector::Constant(1, testing::uniform(r, 0.1, 0.9)); };
    const DsiviResult zero = mi_dsivi_bounds(beta, exp_family::make_point(beta, 1, exp_family::ConcentrationParams{0}),
                                             unit, 100, 20000, rng);
    CHECK(std::abs(zero.lower) <= 1e-12);
    CHECK(std::abs(zero.upper) <= 1e-12);

    // Standard-normal data at alpha_bar = 1/2: I = log(2) / 2.
    const exp_family::FamilySpec g{FamilyId::Gaussian, 1, 1};
    const auto half = exp_family::make_point(g, 1, exp_family::GaussianParams{0.5});
    const DsiviResult r = mi_dsivi_bounds(g, half, standard_normal_data(), 1000, 50000, rng);
    const double truth = 0.5 * std::log(2.0);
    CHECK(r.lower <= r.upper + 3.0 * std::hypot(r.se_lower, r.se_upper));
    CHECK(r.lower - 3.0 * r.se_lower <= truth);
    CHECK(r.upper + 3.0 * r.se_upper >= truth);

    const auto nu = exp_family::make_point(beta, 1, exp_family::ConcentrationParams{20});
    double previous = std::numeric_limits<double>::infinity();
    for (int k : {50, 100, 1000}) {
      Rng shared = make_stream(26, 0);
      const DsiviResult b = mi_dsivi_bounds(beta, nu, unit, k, 20000, shared);
      CHECK(b.upper - b.lower < previous);
      previous = b.upper - b.lower;
    }
  }

  TEST_CASE("parameter path round trip") {
    Rng rng = make_stream(27, 0);
    for (const auto& spec : testing::all_families()) {
      CAPTURE(exp_family::to_string(spec.id));
      for (int i = 0; i < 10; ++i) {
        const double nu = testing::log_uniform(rng, 1e-3, 1e3);
        const auto p = exp_family::make_point(spec, 1, params_from_nu(spec, nu));
        CHECK(nu_from_point(spec, p) == doctest::Approx(nu).epsilon(1e-10));
      }
    }
    // Gamma and Wishart tail coefficients equal nu.
    const exp_family::FamilySpec gamma{FamilyId::Gamma, 1, 1};
    CHECK(exp_family::make_point(gamma, 1, params_from_nu(gamma, 2.5)).a == doctest::Approx(2.5).epsilon(1e-14));
  }

  TEST_CASE("grid and isotonic helpers") {
    const std::vector<double> g = log_grid(1e-2, 1e2, 5);
    REQUIRE(g.size() == 5);
    CHECK(g[2] == doctest::Approx(1.0).epsilon(1e-14));
    const std::vector<double> raw{1, 3, 2, 4, 3.5, 5};
    const std::vector<double> iso = isotonic_increasing(raw);
    const std::vector<double> expected{1, 2.5, 2.5, 3.75, 3.75, 5};
    for (std::size_t i = 0; i < raw.size(); ++i) CHECK(iso[i] == doctest::Approx(expected[i]).epsilon(1e-15));
  }

  TEST_CASE("MI table and matching") {
    const exp_family::FamilySpec g{FamilyId::Gaussian, 1, 1};
    RegimeConfig cfg;
    cfg.analytic_gaussian_variance = 1.0;
    std::vector<double> grid = log_grid(1e-8, 1e6, 57);
    grid.insert(grid.begin(), 0.0);
    const MiTable table = build_mi_table(g, grid, standard_normal_data(), cfg);
    CHECK(table.rows.front().mi == 0.0);
    for (std::size_t i = 1; i < table.rows.size(); ++i) {
      CHECK(table.rows[i].mi >= table.rows[i - 1].mi);
      CHECK(table.rows[i].lower <= table.rows[i].mi);
      CHECK(table.rows[i].mi <= table.rows[i].upper);
    }

    // Exact hit returns the row's nu.
    CHECK(table_nu_for(table, table.rows[20].mi) == doctest::Approx(table.rows[20].nu).epsilon(1e-12));

    // Analytic target recovers the transformed cosine schedule.
    const std::vector<double> ss = ddpm_to_ss_gaussian(cosine_ddpm_schedule(100));
    const NoiseSchedule s = match_schedule(table, mi_gaussian_reference(ss, 1.0));
    CHECK(s.provenance == Provenance::MiMatched);
    double worst = 0.0;
    for (int t = 1; t <= 100; ++t) {
      worst = std::max(worst, std::abs(exp_family::gaussian(s.at(t)).alpha_bar - ss[t - 1]) / ss[t - 1]);
    }
    CHECK(worst <= 0.02);

    // Re-matching the matched trace is idempotent.
    const NoiseSchedule again = match_schedule(table, s.mi_trace);
    for (int t = 1; t <= 100; ++t) {
      CHECK(nu_from_point(g, again.at(t)) == doctest::Approx(nu_from_point(g, s.at(t))).epsilon(0.01));
    }

    std::vector<double> rising{0.1, 0.2};
    CHECK_THROWS_AS((void)match_schedule(table, rising), Error);
  }

  TEST_CASE("Beta table reaches the Kraskov regime") {
    const exp_family::FamilySpec beta{FamilyId::Beta, 1, 1};
    const DataSampler mixture = [](Rng& r) {
      const double x = uniform01(r) < 0.5 ? 0.3 + 0.05 * standard_normal(r) : 0.7 + 0.05 * standard_normal(r);
      return Vector::Constant(1, std::clamp(x, 0.02, 0.98));
    };
    RegimeConfig cfg;
    cfg.budget = 200'000;
    cfg.M_low = 5'000;
    cfg.kraskov_n = 20'000;
    cfg.pilot_M = 5'000;
    const std::vector<double> grid{0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0};
    const MiTable table = build_mi_table(beta, grid, mixture, cfg);
    CHECK(table.rows.back().mi > 2.0);
    CHECK(table.rows.back().estimator == Estimator::Kraskov);
  }

  TEST_CASE("table CSV round trip") {
    const exp_family::FamilySpec g{FamilyId::Gaussian, 1, 1};
    RegimeConfig cfg;
    cfg.analytic_gaussian_variance = 2.0;
    const MiTable table = build_mi_table(g, log_grid(1e-2, 1e2, 9), standard_normal_data(), cfg);
    const MiTable back = mi_table_from_csv("# stamp\n" + to_csv(table), g);
    REQUIRE(back.rows.size() == table.rows.size());
    for (std::size_t i = 0; i < back.rows.size(); ++i) {
      CHECK(back.rows[i].nu == table.rows[i].nu);
      CHECK(back.rows[i].mi == table.rows[i].mi);
      CHECK(back.rows[i].estimator == table.rows[i].estimator);
    }
  }

  TEST_CASE("schedule JSON round trip and hash") {
    for (const auto& spec : testing::all_families()) {
      CAPTURE(exp_family::to_string(spec.id));
      NoiseSchedule s;
      s.spec = spec;
      s.T = 4;
      s.provenance = Provenance::UserSupplied;
      for (int t = 1; t <= 4; ++t) {
        s.points.push_back(exp_family::make_point(spec, t, params_from_nu(spec, 10.0 / t)));
      }
      const NoiseSchedule back = schedule_from_json(to_json(s));
      CHECK(back.T == 4);
      CHECK(to_json(back) == to_json(s));
      CHECK(schedule_hash(back) == schedule_hash(s));
      NoiseSchedule other = s;
      other.points[1] = exp_family::make_point(spec, 2, params_from_nu(spec, 4.0));
      CHECK(schedule_hash(other) != schedule_hash(s));
    }
  }
}
