#include <cmath>
#include <numbers>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <doctest.h>

#include "generators.hpp"
#include "ssdiff/error.hpp"
#include "ssdiff/exp_family.hpp"

using namespace ssdiff;
using namespace ssdiff::exp_family;
using ssdiff::testing::all_families;

namespace {

Vector vec(std::initializer_list<double> values) {
  Vector v(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double d : values) v[i++] = d;
  return v;
}

ErrorCode code_of(const auto& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an ssdiff::Error");
  return ErrorCode::InvalidInput;
}

// Independent log densities for the 1-D quadrature oracle.
double oracle_log_q(FamilyId id, double x, double x0, const SchedulePoint& p) {
  switch (id) {
    case FamilyId::Gaussian: {
      const double ab = gaussian(p).alpha_bar;
      const double m = std::sqrt(ab) * x0, v = 1.0 - ab;
      return -0.5 * std::log(2.0 * std::numbers::pi * v) - (x - m) * (x - m) / (2.0 * v);
    }
    case FamilyId::Beta: {
      const double nu = concentration(p);
      const double a = 1.0 + nu * x0, b = 1.0 + nu * (1.0 - x0);
      return (a - 1.0) * std::log(x) + (b - 1.0) * std::log1p(-x) - std::lgamma(a) - std::lgamma(b) +
             std::lgamma(a + b);
    }
    case FamilyId::Gamma: {
      const auto& g = gamma(p);
      const double rate = g.alpha * (g.xi + (1.0 - g.xi) / x0);
      return g.alpha * std::log(rate) + (g.alpha - 1.0) * std::log(x) - rate * x - std::lgamma(g.alpha);
    }
    case FamilyId::VonMises: {
      const double k = concentration(p);
      return k * std::cos(x - x0) - std::log(2.0 * std::numbers::pi * std::cyl_bessel_i(0.0, k));
    }
    default: return 0.0;
  }
}

double quadrature_kl(FamilyId id, double x0, double xp, const SchedulePoint& p) {
  using boost::math::quadrature::gauss_kronrod;
  const auto f = [&](double x) {
    const double lq = oracle_log_q(id, x, x0, p);
    return std::exp(lq) * (lq - oracle_log_q(id, x, xp, p));
  };
  const double inf = std::numeric_limits<double>::infinity();
  switch (id) {
    case FamilyId::Gaussian: return gauss_kronrod<double, 61>::integrate(f, -inf, inf, 15, 1e-13);
    case FamilyId::Beta: return gauss_kronrod<double, 61>::integrate(f, 0.0, 1.0, 15, 1e-13);
    case FamilyId::Gamma: return gauss_kronrod<double, 61>::integrate(f, 0.0, inf, 15, 1e-13);
    case FamilyId::VonMises:
      return gauss_kronrod<double, 61>::integrate(f, -std::numbers::pi, std::numbers::pi, 15, 1e-13);
    default: return 0.0;
  }
}

}  // namespace

TEST_SUITE("exp_family") {
  TEST_CASE("natural parameters follow the linear map") {
    const FamilySpec beta{FamilyId::Beta, 1, 1};
    CHECK(natural_params(beta, vec({0.3}), make_point(beta, 1, ConcentrationParams{10}))[0] ==
          doctest::Approx(3.0).epsilon(1e-15));

    const FamilySpec vmf{FamilyId::VonMisesFisher, 3, 1};
    CHECK(natural_params(vmf, vec({1, 0, 0}), make_point(vmf, 1, ConcentrationParams{0})).norm() == 0.0);

    // mu = xi I + (1 - xi) I = I, eta = -n/2 I.
    const FamilySpec wish{FamilyId::Wishart, 2, 1};
    const Vector eta = natural_params(wish, vec({1, 0, 0, 1}), make_point(wish, 1, WishartParams{4, 0.5}));
    CHECK((eta - vec({-2, 0, 0, -2})).norm() < 1e-14);
  }

  TEST_CASE("sufficient statistics") {
    CHECK(sufficient_stat({FamilyId::Beta, 1, 1}, vec({0.5}))[0] == 0.0);
    CHECK((sufficient_stat({FamilyId::VonMises, 1, 1}, vec({0.0})) - vec({1, 0})).norm() == 0.0);
    const Vector d = sufficient_stat({FamilyId::Dirichlet, 3, 1}, vec({1.0 / 3, 1.0 / 3, 1.0 / 3}));
    for (int i = 0; i < 3; ++i) CHECK(d[i] == doctest::Approx(-std::log(3.0)).epsilon(1e-14));

    CHECK(code_of([] { (void)sufficient_stat({FamilyId::Beta, 1, 1}, vec({0.0})); }) == ErrorCode::DomainBoundary);
    CHECK(code_of([] { (void)sufficient_stat({FamilyId::Beta, 1, 1}, vec({1.0})); }) == ErrorCode::DomainBoundary);
    CHECK(code_of([] { (void)sufficient_stat({FamilyId::Beta, 2, 1}, vec({0.5})); }) == ErrorCode::Shape);
  }

  TEST_CASE("forward sampler limits") {
    Rng rng = make_stream(11, 0);
    const FamilySpec g{FamilyId::Gaussian, 2, 1};
    const Vector x0 = vec({0.4, -1.3});
    CHECK(sample_forward(g, x0, make_point(g, 1, GaussianParams{1.0}), rng) == x0);

    const FamilySpec cat{FamilyId::Categorical, 3, 2};
    CategoricalParams id{Matrix::Identity(3, 3), Eigen::RowVectorXd::Constant(3, 1.0 / 3)};
    const Vector tokens = vec({0, 1, 0, 0, 0, 1});
    CHECK(sample_forward(cat, tokens, make_point(cat, 1, id), rng) == tokens);
  }

  TEST_CASE("Beta sample mean matches (1 + nu x0) / (2 + nu)") {
    const FamilySpec spec{FamilyId::Beta, 1, 1};
    const auto p = make_point(spec, 1, ConcentrationParams{50});
    Rng rng = make_stream(12, 0);
    const int n = 100000;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const double x = sample_forward(spec, vec({0.5}), p, rng)[0];
      s += x;
      s2 += x * x;
    }
    const double mean = s / n, se = std::sqrt((s2 / n - mean * mean) / n);
    CHECK(std::abs(mean - 26.0 / 52.0) <= 3.0 * se);
  }

  TEST_CASE("log density closed forms") {
    const FamilySpec beta{FamilyId::Beta, 1, 1};
    CHECK(std::abs(log_pdf(beta, vec({0.37}), vec({0.8}), make_point(beta, 1, ConcentrationParams{0}))) < 1e-14);

    const FamilySpec g{FamilyId::Gaussian, 1, 1};
    CHECK(log_pdf(g, vec({0}), vec({0}), make_point(g, 1, GaussianParams{0.5})) ==
          doctest::Approx(-0.5 * std::log(2.0 * std::numbers::pi * 0.5)).epsilon(1e-14));

    const FamilySpec vmf{FamilyId::VonMisesFisher, 3, 1};
    const double k = 2.0;
    CHECK(log_pdf(vmf, vec({0, 1, 0}), vec({0, 1, 0}), make_point(vmf, 1, ConcentrationParams{k})) ==
          doctest::Approx(k + std::log(k / (4.0 * std::numbers::pi * std::sinh(k)))).epsilon(1e-13));
  }

  // Reference values computed with scipy.stats (logpdf, entropy) and the
  // standard closed-form KLs between members of each family.
  TEST_CASE("reference values") {
    struct Ref {
      FamilySpec spec;
      Params params;
      Vector x0, x_pred, x;
      double log_pdf, entropy, kl;
    };
    const std::vector<Ref> refs = {
        {{FamilyId::Gaussian, 1, 1}, GaussianParams{0.6}, vec({0.3}), vec({-0.2}), vec({0.5}), -0.5503194163020388,
         0.9607931672675951, 0.1875},
        {{FamilyId::Beta, 1, 1}, ConcentrationParams{10}, vec({0.3}), vec({0.7}), vec({0.4}), 0.8607354535960168,
         -0.6366135668069646, 3.038095238087012},
        {{FamilyId::Dirichlet, 3, 1}, ConcentrationParams{5}, vec({.2, .3, .5}), vec({.5, .3, .2}), vec({.3, .3, .4}),
         1.7388460477451932, -1.1967083961468123, 1.020558458320164},
        {{FamilyId::VonMises, 1, 1}, ConcentrationParams{3}, vec({0.5}), vec({-1.0}), vec({1.0}), -0.7904370025516478,
         0.9932288063532524, 2.2580676026100885},
        {{FamilyId::VonMisesFisher, 3, 1}, ConcentrationParams{5}, vec({0, 0, 1}), vec({.6, 0, .8}), vec({.6, 0, .8}),
         -1.228393753014882, 1.2279397331047859, 0.800090803982019},
        {{FamilyId::Gamma, 1, 1}, GammaParams{3, 0.4}, vec({2.0}), vec({1.0}), vec({1.5}), -0.8064049301554848,
         1.1056411656336338, 0.21568945389808875},
        {{FamilyId::Wishart, 2, 1}, WishartParams{5, 0.2}, vec({1, .3, .3, 2}), vec({1.5, -.2, -.2, 1}),
         vec({1.2, .1, .1, 1.5}), -2.2337864282633517, 2.6839139334587685, 0.731631150226026},
    };
    for (const Ref& r : refs) {
      CAPTURE(to_string(r.spec.id));
      const auto p = make_point(r.spec, 1, r.params);
      CHECK(log_pdf(r.spec, r.x, r.x0, p) == doctest::Approx(r.log_pdf).epsilon(1e-10));
      CHECK(entropy(r.spec, r.x0, p) == doctest::Approx(r.entropy).epsilon(1e-10));
      CHECK(kl_step(r.spec, r.x0, r.x_pred, p) == doctest::Approx(r.kl).epsilon(1e-10));
    }
  }

  TEST_CASE("Gaussian KL closed form") {
    const FamilySpec g{FamilyId::Gaussian, 1, 1};
    CHECK(kl_step(g, vec({0}), vec({1}), make_point(g, 1, GaussianParams{0.5})) ==
          doctest::Approx(0.5).epsilon(1e-15));
  }

  TEST_CASE("Beta KL against quadrature") {
    const FamilySpec beta{FamilyId::Beta, 1, 1};
    const auto p = make_point(beta, 1, ConcentrationParams{10});
    const double ref = quadrature_kl(FamilyId::Beta, 0.3, 0.7, p);
    CHECK(std::abs(kl_step(beta, vec({0.3}), vec({0.7}), p) - ref) <= 1e-6);
  }

  TEST_CASE("KL vanishes at x_pred = x0 and is non-negative") {
    Rng rng = make_stream(13, 0);
    for (const FamilySpec& spec : all_families()) {
      CAPTURE(to_string(spec.id));
      double worst_self = 0.0, most_negative = 0.0;
      for (int i = 0; i < 200; ++i) {
        const auto p = testing::random_schedule_point(spec, 1, rng);
        const Vector x0 = testing::random_point(spec, rng);
        const Vector xp = testing::random_point(spec, rng);
        worst_self = std::max(worst_self, std::abs(kl_step(spec, x0, x0, p)));
        most_negative = std::min(most_negative, kl_step(spec, x0, xp, p));
      }
      CHECK(worst_self <= 1e-12);
      CHECK(most_negative >= -1e-10);
    }
  }

  TEST_CASE("1-D KL matches quadrature on random draws") {
    Rng rng = make_stream(14, 0);
    for (FamilyId id : {FamilyId::Gaussian, FamilyId::Beta, FamilyId::Gamma, FamilyId::VonMises}) {
      const FamilySpec spec{id, 1, 1};
      CAPTURE(to_string(id));
      double worst = 0.0;
      for (int i = 0; i < 20; ++i) {
        const auto p = testing::random_schedule_point(spec, 1, rng);
        const double x0 = testing::random_point(spec, rng)[0];
        const double xp = testing::random_point(spec, rng)[0];
        const double ref = quadrature_kl(id, x0, xp, p);
        const double got = kl_step(spec, vec({x0}), vec({xp}), p);
        worst = std::max(worst, std::abs(got - ref) / std::max(std::abs(ref), 1e-8));
      }
      CHECK(worst <= 1e-5);
    }
  }

  TEST_CASE("KL gradient matches directional finite differences") {
    Rng rng = make_stream(15, 0);
    for (const FamilySpec& spec : all_families()) {
      if (spec.id == FamilyId::Categorical) continue;
      CAPTURE(to_string(spec.id));
      for (int i = 0; i < 10; ++i) {
        const auto p = testing::random_schedule_point(spec, 1, rng);
        const Vector x0 = testing::random_point(spec, rng);
        const Vector xp = testing::random_point(spec, rng);
        Vector v = Vector::Zero(xp.size());
        for (Eigen::Index j = 0; j < v.size(); ++j) v[j] = standard_normal(rng);
        if (spec.id == FamilyId::Wishart) {
          const Eigen::Map<const Matrix> m(v.data(), spec.dim, spec.dim);
          const Matrix sym = 0.5 * (m + m.transpose());
          v = Eigen::Map<const Vector>(sym.data(), v.size());
        }
        if (spec.id == FamilyId::Dirichlet) v.array() -= v.mean();
        if (spec.id == FamilyId::VonMisesFisher) v -= xp.dot(v) * xp;
        const double h = 1e-6 * std::min(1.0, 0.01 / v.cwiseAbs().maxCoeff() + 1e-3);
        const double fd = (kl_step(spec, x0, xp + h * v, p) - kl_step(spec, x0, xp - h * v, p)) / (2.0 * h);
        const double an = kl_grad_pred(spec, x0, xp, p).dot(v);
        CHECK(std::abs(fd - an) <= 1e-5 * std::max(1.0, std::abs(an)));
      }
    }
  }

  TEST_CASE("sampler moments") {
    const int n = 100000;
    Rng rng = make_stream(16, 0);
    struct Case {
      FamilySpec spec;
      Params params;
      Vector x0;
    };
    const std::vector<Case> cases = {
        {{FamilyId::Beta, 1, 1}, ConcentrationParams{7}, vec({0.2})},
        {{FamilyId::Dirichlet, 3, 1}, ConcentrationParams{4}, vec({.1, .3, .6})},
        {{FamilyId::Gamma, 1, 1}, GammaParams{2.5, 0.3}, vec({1.7})},
        {{FamilyId::Wishart, 2, 1}, WishartParams{6, 0.4}, vec({1.3, .4, .4, .8})},
    };
    for (const Case& c : cases) {
      CAPTURE(to_string(c.spec.id));
      const auto p = make_point(c.spec, 1, c.params);
      // Analytic means: Beta/Dirichlet alpha / sum(alpha), Gamma alpha / rate, Wishart n V.
      Vector expected;
      switch (c.spec.id) {
        case FamilyId::Beta:
        case FamilyId::Dirichlet: {
          const double nu = std::get<ConcentrationParams>(c.params).value;
          Vector a = (1.0 + nu * c.x0.array()).matrix();
          if (c.spec.id == FamilyId::Beta) {
            expected = vec({a[0] / (2.0 + nu)});
          } else {
            expected = a / a.sum();
          }
          break;
        }
        case FamilyId::Gamma: {
          const auto g = std::get<GammaParams>(c.params);
          expected = vec({g.alpha / (g.alpha * (g.xi + (1.0 - g.xi) / c.x0[0]))});
          break;
        }
        default: {
          const auto w = std::get<WishartParams>(c.params);
          const Eigen::Map<const Matrix> x0(c.x0.data(), 2, 2);
          const Matrix mu = w.xi * Matrix::Identity(2, 2) + (1.0 - w.xi) * x0.inverse();
          const Matrix mean = mu.inverse();
          expected = Eigen::Map<const Vector>(mean.data(), 4);
        }
      }
      Vector s = Vector::Zero(c.x0.size()), s2 = Vector::Zero(c.x0.size());
      for (int i = 0; i < n; ++i) {
        const Vector x = sample_forward(c.spec, c.x0, p, rng);
        REQUIRE(in_domain(c.spec, x));
        s += x;
        s2 += x.cwiseProduct(x);
      }
      const Vector mean = s / n;
      const Vector se = ((s2 / n - mean.cwiseProduct(mean)) / n).cwiseSqrt();
      for (Eigen::Index j = 0; j < mean.size(); ++j) CHECK(std::abs(mean[j] - expected[j]) <= 4.0 * se[j]);
    }
  }

  TEST_CASE("vMF and vM samples concentrate on x0") {
    Rng rng = make_stream(17, 0);
    const FamilySpec vmf{FamilyId::VonMisesFisher, 3, 1};
    const Vector x0 = vec({0.6, 0.0, -0.8});
    const auto p = make_point(vmf, 1, ConcentrationParams{8});
    Vector s = Vector::Zero(3);
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
      const Vector x = sample_forward(vmf, x0, p, rng);
      CHECK(std::abs(x.norm() - 1.0) <= 1e-12);
      s += x;
    }
    // Mean resultant length is A_3(kappa) = coth(kappa) - 1 / kappa.
    const Vector mean = s / n;
    CHECK((mean / mean.norm() - x0).norm() < 0.02);
    CHECK(mean.norm() == doctest::Approx(1.0 / std::tanh(8.0) - 1.0 / 8.0).epsilon(0.01));
  }

  TEST_CASE("map_to_domain heads") {
    CHECK((map_to_domain({FamilyId::Dirichlet, 3, 1}, vec({0, 0, 0})) - Vector::Constant(3, 1.0 / 3)).norm() < 1e-15);
    CHECK((map_to_domain({FamilyId::VonMisesFisher, 3, 1}, vec({3, 0, 0})) - vec({1, 0, 0})).norm() == 0.0);
    // raw is the packed lower factor (1, 0, 1).
    const Vector w = map_to_domain({FamilyId::Wishart, 2, 1}, vec({1, 0, 1}));
    CHECK((w - vec({1 + kWishartJitter, 0, 0, 1 + kWishartJitter})).norm() < 1e-15);
    CHECK(map_to_domain({FamilyId::Beta, 1, 1}, vec({0}))[0] == 0.5);
    CHECK(code_of([] { (void)map_to_domain({FamilyId::VonMisesFisher, 3, 1}, vec({0, 0, 0})); }) ==
          ErrorCode::DegenerateDirection);
  }

  TEST_CASE("map_to_domain closure and VJP") {
    Rng rng = make_stream(18, 0);
    for (const FamilySpec& spec : all_families()) {
      CAPTURE(to_string(spec.id));
      for (int i = 0; i < 100; ++i) {
        Vector raw(raw_size(spec));
        for (Eigen::Index j = 0; j < raw.size(); ++j) raw[j] = 3.0 * standard_normal(rng);
        const Vector x = map_to_domain(spec, raw);
        REQUIRE(in_domain(spec, x));
        if (spec.id == FamilyId::Wishart) {
          const Eigen::Map<const Matrix> m(x.data(), spec.dim, spec.dim);
          CHECK(Eigen::SelfAdjointEigenSolver<Matrix>(m).eigenvalues().minCoeff() >= kWishartJitter - 1e-9);
        }
      }
      // VJP against central differences of <u, map(raw)>.
      Vector raw(raw_size(spec)), u(point_size(spec));
      for (Eigen::Index j = 0; j < raw.size(); ++j) raw[j] = standard_normal(rng);
      for (Eigen::Index j = 0; j < u.size(); ++j) u[j] = standard_normal(rng);
      const Vector g = map_to_domain_vjp(spec, raw, u);
      for (Eigen::Index j = 0; j < raw.size(); ++j) {
        Vector e = Vector::Zero(raw.size());
        e[j] = 1e-6;
        const double fd = (u.dot(map_to_domain(spec, raw + e)) - u.dot(map_to_domain(spec, raw - e))) / 2e-6;
        CHECK(std::abs(fd - g[j]) <= 1e-6 * std::max(1.0, std::abs(g[j])));
      }
    }
  }

  TEST_CASE("schedule point validation") {
    CHECK(code_of([] { (void)make_point({FamilyId::Wishart, 3, 1}, 1, WishartParams{1.5, 0.5}); }) ==
          ErrorCode::InvalidInput);
    CHECK(code_of([] { (void)make_point({FamilyId::Gaussian, 1, 1}, 1, ConcentrationParams{2}); }) ==
          ErrorCode::InvalidInput);
    Matrix q = Matrix::Identity(2, 2);
    q(0, 1) = 1e-9;
    CHECK(code_of([&] {
            (void)make_point({FamilyId::Categorical, 2, 1}, 1,
                             CategoricalParams{q, Eigen::RowVectorXd::Constant(2, 0.5)});
          }) == ErrorCode::InvalidInput);
  }
}
