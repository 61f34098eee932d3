#include <cmath>
#include <cstdint>
#include <vector>

#include <benchmark/benchmark.h>

#include "ssdiff/engine.hpp"
#include "ssdiff/exp_family.hpp"
#include "ssdiff/nnet.hpp"
#include "ssdiff/schedule.hpp"
#include "ssdiff/tail.hpp"

using namespace ssdiff;
using exp_family::FamilyId;
using exp_family::FamilySpec;
using exp_family::Matrix;
using exp_family::Vector;

namespace {

FamilySpec spec_for(int id) {
  switch (static_cast<FamilyId>(id)) {
    case FamilyId::Dirichlet: return {FamilyId::Dirichlet, 3, 1};
    case FamilyId::VonMisesFisher: return {FamilyId::VonMisesFisher, 3, 1};
    case FamilyId::Wishart: return {FamilyId::Wishart, 2, 1};
    case FamilyId::Gamma: return {FamilyId::Gamma, 2, 1};
    default: return {FamilyId::Beta, 2, 1};
  }
}

schedule::NoiseSchedule geometric(const FamilySpec& spec, int T) {
  schedule::NoiseSchedule s;
  s.spec = spec;
  s.T = T;
  for (int t = 1; t <= T; ++t) {
    const double f = static_cast<double>(t - 1) / (T - 1);
    s.points.push_back(exp_family::make_point(spec, t, schedule::params_from_nu(spec, 1e3 * std::pow(1e-3, f))));
  }
  return s;
}

std::vector<Vector> draws(const FamilySpec& spec, const schedule::NoiseSchedule& s, int n, Rng& rng) {
  std::vector<Vector> out;
  for (int i = 0; i < n; ++i) out.push_back(exp_family::sample_stationary(spec, s.at(s.T), rng));
  return out;
}

const std::vector<std::int64_t> kFamilies{static_cast<std::int64_t>(FamilyId::Beta), static_cast<std::int64_t>(FamilyId::Dirichlet),
                                 static_cast<std::int64_t>(FamilyId::VonMisesFisher), static_cast<std::int64_t>(FamilyId::Gamma),
                                 static_cast<std::int64_t>(FamilyId::Wishart)};

void BM_KlStep(benchmark::State& state) {
  const FamilySpec spec = spec_for(static_cast<int>(state.range(0)));
  const auto s = geometric(spec, 16);
  Rng rng = make_stream(1, 0);
  const auto xs = draws(spec, s, 2, rng);
  for (auto _ : state) benchmark::DoNotOptimize(exp_family::kl_step(spec, xs[0], xs[1], s.at(8)));
  state.SetLabel(std::string(exp_family::to_string(spec.id)));
}
BENCHMARK(BM_KlStep)->ArgsProduct({kFamilies});

void BM_SampleForward(benchmark::State& state) {
  const FamilySpec spec = spec_for(static_cast<int>(state.range(0)));
  const auto s = geometric(spec, 16);
  Rng rng = make_stream(2, 0);
  const Vector x0 = draws(spec, s, 1, rng)[0];
  for (auto _ : state) benchmark::DoNotOptimize(exp_family::sample_forward(spec, x0, s.at(8), rng));
  state.SetLabel(std::string(exp_family::to_string(spec.id)));
}
BENCHMARK(BM_SampleForward)->ArgsProduct({kFamilies});

// Full tail sweep x_T..x_1 for one datum.
void BM_SampleAllTails(benchmark::State& state) {
  const FamilySpec spec{FamilyId::Dirichlet, 3, 1};
  const auto s = geometric(spec, static_cast<int>(state.range(0)));
  Rng rng = make_stream(3, 0);
  const Vector x0 = draws(spec, s, 1, rng)[0];
  for (auto _ : state) benchmark::DoNotOptimize(tail::sample_all_tails(s, x0, rng));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_SampleAllTails)->RangeMultiplier(4)->Range(16, 1024)->Complexity(benchmark::oN);

void BM_MlpTrainStep(benchmark::State& state) {
  const FamilySpec spec{FamilyId::Dirichlet, 3, 1};
  const auto s = geometric(spec, 64);
  Rng rng = make_stream(4, 0);
  const auto data = draws(spec, s, 256, rng);
  const tail::TailNormalizer norm = tail::fit_tail_normalizer(s, data, 64, rng);
  nnet::MlpConfig mlp;
  mlp.width = static_cast<int>(state.range(0));
  engine::Model model = engine::make_model(s, norm, mlp, nnet::AdamConfig{}, rng);
  const engine::LossSpec loss = engine::make_loss(engine::LossMode::Vlb, s);
  const std::span<const Vector> batch(data.data(), 128);
  for (auto _ : state) benchmark::DoNotOptimize(engine::train_step(model, batch, loss, rng));
  state.SetItemsProcessed(state.iterations() * 128);
}
BENCHMARK(BM_MlpTrainStep)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_Sample(benchmark::State& state) {
  const FamilySpec spec{FamilyId::Dirichlet, 3, 1};
  const auto s = geometric(spec, 64);
  Rng rng = make_stream(5, 0);
  const auto data = draws(spec, s, 256, rng);
  const tail::TailNormalizer norm = tail::fit_tail_normalizer(s, data, 64, rng);
  nnet::MlpConfig mlp;
  mlp.width = 128;
  const engine::Model model = engine::make_model(s, norm, mlp, nnet::AdamConfig{}, rng);
  const engine::Predictor pred = engine::net_predictor(model, false);
  for (auto _ : state) benchmark::DoNotOptimize(engine::sample(pred, s, norm, 256, rng));
  state.SetItemsProcessed(state.iterations() * 256);
}
BENCHMARK(BM_Sample)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
