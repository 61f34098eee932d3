#pragma once

// Hand-rolled generators for property tests: random domain points and
// schedule points for every family.

#include <cmath>
#include <numbers>
#include <vector>

#include "ssdiff/exp_family.hpp"
#include "ssdiff/random.hpp"
#include "ssdiff/schedule.hpp"

namespace ssdiff::testing {

using exp_family::FamilyId;
using exp_family::FamilySpec;
using exp_family::Matrix;
using exp_family::SchedulePoint;
using exp_family::Vector;

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

inline double log_uniform(Rng& rng, double lo, double hi) {
  return std::exp(uniform(rng, std::log(lo), std::log(hi)));
}

inline std::vector<FamilySpec> all_families() {
  return {
      {FamilyId::Gaussian, 2, 1},       {FamilyId::Beta, 3, 1},     {FamilyId::Dirichlet, 3, 1},
      {FamilyId::Categorical, 4, 2},    {FamilyId::VonMises, 2, 1}, {FamilyId::VonMisesFisher, 3, 1},
      {FamilyId::Gamma, 2, 1},          {FamilyId::Wishart, 2, 1},
  };
}

inline Matrix random_stochastic(int d, Rng& rng) {
  Matrix m(d, d);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) m(i, j) = gamma_variate(rng, 1.0);
    m.row(i) /= m.row(i).sum();
  }
  return m;
}

// Interior points only: Beta/Dirichlet coordinates stay away from 0 and 1.
inline Vector random_point(const FamilySpec& spec, Rng& rng) {
  const int d = spec.dim;
  switch (spec.id) {
    case FamilyId::Gaussian: {
      Vector x(d);
      for (int i = 0; i < d; ++i) x[i] = 2.0 * standard_normal(rng);
      return x;
    }
    case FamilyId::Beta: {
      Vector x(d);
      for (int i = 0; i < d; ++i) x[i] = uniform(rng, 0.02, 0.98);
      return x;
    }
    case FamilyId::Dirichlet: {
      Vector x(d);
      for (int i = 0; i < d; ++i) x[i] = gamma_variate(rng, 2.0) + 0.05;
      return x / x.sum();
    }
    case FamilyId::Categorical: {
      Vector x = Vector::Zero(d * spec.tokens);
      for (int k = 0; k < spec.tokens; ++k) x[k * d + static_cast<int>(uniform01(rng) * d) % d] = 1.0;
      return x;
    }
    case FamilyId::VonMises: {
      Vector x(d);
      for (int i = 0; i < d; ++i) x[i] = uniform(rng, -std::numbers::pi, std::numbers::pi);
      return x;
    }
    case FamilyId::VonMisesFisher: {
      Vector x(d);
      for (int i = 0; i < d; ++i) x[i] = standard_normal(rng);
      return x / x.norm();
    }
    case FamilyId::Gamma: {
      Vector x(d);
      for (int i = 0; i < d; ++i) x[i] = std::exp(0.7 * standard_normal(rng));
      return x;
    }
    case FamilyId::Wishart: {
      Matrix a(d, d);
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) a(i, j) = standard_normal(rng);
      const Matrix x = a * a.transpose() / d + 0.3 * Matrix::Identity(d, d);
      return Eigen::Map<const Vector>(x.data(), d * d);
    }
  }
  return {};
}

inline exp_family::Params random_params(const FamilySpec& spec, Rng& rng) {
  switch (spec.id) {
    case FamilyId::Gaussian: return exp_family::GaussianParams{uniform(rng, 0.01, 0.99)};
    case FamilyId::Beta:
    case FamilyId::Dirichlet:
    case FamilyId::VonMises:
    case FamilyId::VonMisesFisher: return exp_family::ConcentrationParams{log_uniform(rng, 0.1, 100.0)};
    case FamilyId::Gamma: return exp_family::GammaParams{log_uniform(rng, 1.0, 50.0), uniform(rng, 0.05, 0.95)};
    case FamilyId::Wishart:
      return exp_family::WishartParams{spec.dim + log_uniform(rng, 1.0, 50.0), uniform(rng, 0.05, 0.95)};
    case FamilyId::Categorical: {
      const int d = spec.dim;
      const double keep = uniform(rng, 0.1, 0.9);
      exp_family::CategoricalParams c;
      c.q_bar = keep * Matrix::Identity(d, d) + (1.0 - keep) * random_stochastic(d, rng);
      c.stationary = Eigen::RowVectorXd::Constant(d, 1.0 / d);
      return c;
    }
  }
  return {};
}

inline SchedulePoint random_schedule_point(const FamilySpec& spec, int t, Rng& rng) {
  return exp_family::make_point(spec, t, random_params(spec, rng));
}

// Geometric nu path from nu_1 down to nu_T.
inline schedule::NoiseSchedule geometric_schedule(const FamilySpec& spec, int T, double nu_1, double nu_T) {
  schedule::NoiseSchedule s;
  s.spec = spec;
  s.T = T;
  for (int t = 1; t <= T; ++t) {
    const double f = T == 1 ? 0.0 : static_cast<double>(t - 1) / (T - 1);
    s.points.push_back(exp_family::make_point(spec, t, schedule::params_from_nu(spec, nu_1 * std::pow(nu_T / nu_1, f))));
  }
  return s;
}

}  // namespace ssdiff::testing
