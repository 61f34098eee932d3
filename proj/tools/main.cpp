#include <atomic>
#include <csignal>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "ssdiff/analysis.hpp"
#include "ssdiff/engine.hpp"
#include "ssdiff/error.hpp"
#include "ssdiff/io.hpp"
#include "ssdiff/log.hpp"
#include "ssdiff/schedule.hpp"
#include "verify.hpp"

namespace fs = std::filesystem;
using namespace ssdiff;
using exp_family::Matrix;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitInvalid = 2;
constexpr int kExitEstimator = 3;
constexpr int kExitHash = 4;
constexpr int kExitInterrupted = 130;

std::atomic<bool> g_interrupted{false};

extern "C" void on_sigint(int) { g_interrupted.store(true); }

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::EstimatorFailure:
    case ErrorCode::Coverage: return kExitEstimator;
    case ErrorCode::HashMismatch: return kExitHash;
    case ErrorCode::InvalidInput:
    case ErrorCode::Config:
    case ErrorCode::Shape:
    case ErrorCode::Step:
    case ErrorCode::InvalidPlan:
    case ErrorCode::UnsupportedFamily:
    case ErrorCode::DomainBoundary:
    case ErrorCode::Io: return kExitInvalid;
    default: return kExitFailure;
  }
}

// Options shared by commands that take an experiment configuration.
struct ConfigArgs {
  std::string config_path;
  std::string experiment;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment configuration JSON");
    cmd->add_option("--experiment", experiment, "built-in experiment preset");
    cmd->add_option("--set", overrides, "dotted key=value override (repeatable)");
    cmd->add_option("--seed", seed, "master seed");
    cmd->add_option("--out", out, "output directory");
  }

  [[nodiscard]] engine::ExperimentConfig load() const {
    std::vector<std::string> all = overrides;
    if (seed) all.push_back(fmt::format("seed={}", *seed));
    if (!out.empty()) all.push_back(fmt::format("output_dir={}", nlohmann::json(out).dump()));
    if (!config_path.empty()) return engine::config_from_json(io::read_file(config_path), all);
    if (experiment.empty()) throw Error(ErrorCode::Config, "give --config or --experiment");
    return engine::config_from_json(engine::to_json(analysis::preset_config(experiment)), all);
  }
};

fs::path run_dir(const engine::ExperimentConfig& c) {
  return fs::path(c.output_dir) / (c.experiment.empty() ? c.dataset.id : c.experiment);
}

std::string stamped_json(const engine::ExperimentConfig& c, nlohmann::json j) {
  j["build"] = std::string(io::build_version());
  j["config_hash"] = io::hex64(engine::config_hash(c));
  return j.dump(1) + "\n";
}

// ---------------------------------------------------------------------------

struct ScheduleArgs {
  ConfigArgs cfg;
  std::string family;
  int dim = 0;
  int tokens = 0;
  std::optional<int> T;
  bool from_cosine = false;
  std::string match;
  std::string dataset;
  bool full_budget = false;
};

std::string default_dataset(exp_family::FamilyId id) {
  for (std::string_view e : analysis::experiment_ids()) {
    if (analysis::preset_config(e).family.id == id) return std::string(e);
  }
  throw Error(ErrorCode::Config, fmt::format("no built-in dataset for family '{}'; pass --config", exp_family::to_string(id)));
}

int cmd_schedule(const ScheduleArgs& a) {
  engine::ExperimentConfig c;
  if (!a.cfg.config_path.empty() || !a.cfg.experiment.empty()) {
    c = a.cfg.load();
  } else {
    if (a.family.empty()) throw Error(ErrorCode::Config, "give --family, --experiment or --config");
    const auto id = exp_family::family_from_string(a.family);
    c = analysis::preset_config(a.dataset.empty() ? default_dataset(id) : a.dataset);
    c.output_dir = a.cfg.out.empty() ? "." : a.cfg.out;
    if (a.cfg.seed) c.seed = *a.cfg.seed;
  }
  if (a.dim > 0) c.family.dim = a.dim;
  if (a.tokens > 0) c.family.tokens = a.tokens;
  if (a.T) c.T = *a.T;
  if (a.from_cosine) c.schedule.kind = "cosine_transform";
  if (!a.match.empty()) {
    if (a.match != "cosine") throw Error(ErrorCode::Config, fmt::format("unknown match target '{}'", a.match));
    c.schedule.kind = "mi_match";
  }
  engine::validate(c);

  analysis::Dataset data;
  data.spec = c.family;
  const bool needs_data = c.schedule.kind == "mi_match" ||
                          (c.schedule.kind == "default" && c.family.id != exp_family::FamilyId::Gaussian);
  if (needs_data) data = analysis::make_dataset(c);
  std::optional<schedule::RegimeConfig> regime;
  if (a.full_budget) regime = schedule::RegimeConfig{};
  const analysis::ScheduleBuild built = analysis::build_schedule(c, data, regime);

  const fs::path dir = a.cfg.out.empty() ? fs::path(".") : fs::path(a.cfg.out);
  fs::create_directories(dir);
  schedule::save_schedule(built.schedule, dir / "schedule.json");
  if (built.table) io::write_atomic(dir / "mi_table.csv", analysis::csv_stamp(c) + schedule::to_csv(*built.table));
  fmt::print("schedule {} T={} provenance={} hash={} -> {}\n", exp_family::to_string(c.family.id), built.schedule.T,
             schedule::to_string(built.schedule.provenance), io::hex64(schedule::schedule_hash(built.schedule)),
             (dir / "schedule.json").string());
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  ConfigArgs cfg;
  long checkpoint_every = 1000;
};

int cmd_train(const TrainArgs& a) {
  const engine::ExperimentConfig c = a.cfg.load();
  const fs::path dir = run_dir(c);
  fs::create_directories(dir);
  std::signal(SIGINT, on_sigint);

  const analysis::Prepared prep = analysis::prepare(c);
  schedule::save_schedule(prep.schedule.schedule, dir / "schedule.json");
  if (prep.schedule.table) {
    io::write_atomic(dir / "mi_table.csv", analysis::csv_stamp(c) + schedule::to_csv(*prep.schedule.table));
  }
  std::string log_csv = analysis::csv_stamp(c) + "step,loss,grad_norm,accepted\n";
  const auto save = [&](const engine::Model& model) {
    io::write_atomic(dir / "checkpoint.json", nnet::checkpoint_to_json(analysis::make_checkpoint(c, model)));
    io::write_atomic(dir / "train_log.csv", log_csv);
  };
  analysis::TrainHooks hooks;
  hooks.on_step = [&](long step, const engine::StepResult& s) {
    if ((step + 1) % 100 == 0 || !s.accepted) {
      log_csv += fmt::format("{},{:.9g},{:.9g},{}\n", step + 1, s.loss, s.grad_norm, s.accepted ? 1 : 0);
    }
    if ((step + 1) % 1000 == 0) log::info(fmt::format("step {} loss {:.6g}", step + 1, s.loss));
    return !g_interrupted.load();
  };
  hooks.checkpoint_every = a.checkpoint_every;
  hooks.on_checkpoint = [&](long, const engine::Model& model) { save(model); };
  long steps = 0;
  const engine::Model model = analysis::train_model(c, prep, hooks, &steps);
  save(model);
  fmt::print("trained {} steps -> {}\n", steps, (dir / "checkpoint.json").string());
  return g_interrupted.load() ? kExitInterrupted : kExitOk;
}

// ---------------------------------------------------------------------------

struct Loaded {
  engine::ExperimentConfig config;
  engine::Model model;
};

Loaded load_checkpoint(const std::string& checkpoint, const std::string& schedule_path) {
  const nnet::Checkpoint ckpt = nnet::checkpoint_from_json(io::read_file(checkpoint));
  const fs::path sched = schedule_path.empty() ? fs::path(checkpoint).parent_path() / "schedule.json" : fs::path(schedule_path);
  const schedule::NoiseSchedule s = schedule::load_schedule(sched);
  return {engine::config_from_json(ckpt.config_json), analysis::model_from_checkpoint(ckpt, s)};
}

struct SampleArgs {
  std::string checkpoint;
  std::string schedule;
  int steps = 0;
  int n = 0;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int cmd_sample(const SampleArgs& a) {
  Loaded l = load_checkpoint(a.checkpoint, a.schedule);
  if (a.seed) l.config.seed = *a.seed;
  if (a.steps < 0 || a.steps == 1 || a.steps > l.model.schedule.T) {
    throw Error(ErrorCode::InvalidPlan, fmt::format("--steps must be 0 or in 2..{}", l.model.schedule.T));
  }
  const int n = a.n > 0 ? a.n : l.config.sample_count;
  const Matrix samples = analysis::draw_samples(l.config, l.model, n, a.steps, 0);
  const fs::path out = a.out.empty() ? fs::path(a.checkpoint).parent_path() / fmt::format("samples_{}.csv", a.steps ? a.steps : l.model.schedule.T)
                                     : fs::path(a.out);
  io::write_atomic(out, analysis::samples_csv(l.config, samples));
  fmt::print("{} samples -> {}\n", n, out.string());
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string schedule;
  std::string samples;
  int steps = 0;
  std::string out;
};

int cmd_eval(const EvalArgs& a) {
  const Loaded l = load_checkpoint(a.checkpoint, a.schedule);
  const analysis::Dataset data = analysis::make_dataset(l.config);
  const Matrix samples = a.samples.empty()
                             ? analysis::draw_samples(l.config, l.model, l.config.sample_count, a.steps, 0)
                             : analysis::samples_from_csv(io::read_file(a.samples), exp_family::point_size(data.spec));
  const analysis::SampleMetrics m = analysis::evaluate_samples(l.config, data, samples);
  const engine::ElboResult e = analysis::evaluate_elbo(l.config, data, l.model);
  nlohmann::json j;
  j["format"] = "ssdiff-eval";
  j["samples"] = m.n;
  j["valid_fraction"] = m.n ? static_cast<double>(m.valid) / m.n : 0.0;
  if (m.kl_available) j["kl_to_data"] = m.kl.nats;
  if (!m.mode_fractions.empty()) j["mode_fractions"] = m.mode_fractions;
  j["elbo_nats"] = e.elbo_nats;
  j["elbo_se"] = e.se;
  j["bits_per_dim"] = e.bits_per_dim;
  const std::string text = stamped_json(l.config, j);
  if (!a.out.empty()) io::write_atomic(a.out, text);
  std::cout << text;
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct VerifyArgs {
  std::string suite = "all";
  std::vector<int> D;
  std::vector<int> T;
  std::string out;
  std::string gap_csv;
  std::uint64_t seed = 1;
};

int cmd_verify(const VerifyArgs& a) {
  cli::VerifyOptions o;
  o.seed = a.seed;
  o.gap_csv = a.gap_csv;
  if (!a.D.empty()) o.D = a.D;
  if (!a.T.empty()) {
    if (a.suite == "gap") {
      o.gap_T = a.T;
    } else {
      o.T = a.T;
    }
  }
  std::vector<cli::SuiteResult> results;
  const auto want = [&](const char* name) { return a.suite == "all" || a.suite == name; };
  if (!(want("sufficiency") || want("equivalence") || want("gap") || want("estimators"))) {
    throw Error(ErrorCode::Config, fmt::format("unknown suite '{}'", a.suite));
  }
  if (want("sufficiency")) results.push_back(cli::verify_sufficiency(o));
  if (want("equivalence")) results.push_back(cli::verify_equivalence(o));
  if (want("gap")) results.push_back(cli::verify_gap(o));
  if (want("estimators")) results.push_back(cli::verify_estimators(o));
  const std::string text = cli::report_json(results) + "\n";
  if (!a.out.empty()) io::write_atomic(a.out, text);
  std::cout << text;
  int code = kExitOk;
  for (const auto& r : results) {
    for (const auto& c : r.checks) {
      if (!c.passed) {
        std::cerr << fmt::format("FAILED {}: {} = {:.3g} (threshold {:.3g})\n", r.suite, c.name, c.value, c.threshold);
        code = kExitFailure;
      }
    }
  }
  return code;
}

// ---------------------------------------------------------------------------

int cmd_experiment(const ConfigArgs& a) {
  const engine::ExperimentConfig c = a.load();
  std::signal(SIGINT, on_sigint);
  analysis::TrainHooks hooks;
  hooks.on_step = [](long, const engine::StepResult&) { return !g_interrupted.load(); };
  const analysis::SyntheticResult r = analysis::run_synthetic(c, hooks);
  std::cout << r.metrics_json << "\n";
  return g_interrupted.load() ? kExitInterrupted : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ssdiff: star-shaped diffusion models on exponential-family data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(io::build_version()));

  ScheduleArgs sa;
  auto* sch = app.add_subcommand("schedule", "build a noise schedule (and MI table)");
  sa.cfg.attach(sch);
  sch->add_option("--family", sa.family, "family name");
  sch->add_option("--dim", sa.dim, "family dimension");
  sch->add_option("--tokens", sa.tokens, "tokens per datum (categorical)");
  sch->add_option("--T", sa.T, "number of steps");
  sch->add_flag("--from-cosine", sa.from_cosine, "analytic transform of the cosine DDPM schedule (gaussian)");
  sch->add_option("--match", sa.match, "match the mutual information of a reference schedule")->check(CLI::IsMember({"cosine"}));
  sch->add_option("--dataset", sa.dataset, "built-in dataset used for MI estimation");
  sch->add_flag("--full-budget", sa.full_budget, "use the full estimator budget instead of the desk one");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "train a model");
  ta.cfg.attach(tr);
  tr->add_option("--checkpoint-every", ta.checkpoint_every, "steps between checkpoints");

  SampleArgs sm;
  auto* sp = app.add_subcommand("sample", "draw samples from a checkpoint");
  sp->add_option("--checkpoint", sm.checkpoint, "checkpoint JSON")->required();
  sp->add_option("--schedule", sm.schedule, "schedule JSON (default: next to the checkpoint)");
  sp->add_option("--steps", sm.steps, "network evaluations (0 = every step)");
  sp->add_option("--n", sm.n, "number of samples");
  sp->add_option("--seed", sm.seed, "sampling seed");
  sp->add_option("--out", sm.out, "output CSV");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--checkpoint", ea.checkpoint, "checkpoint JSON")->required();
  ev->add_option("--schedule", ea.schedule, "schedule JSON (default: next to the checkpoint)");
  ev->add_option("--samples", ea.samples, "samples CSV (default: draw new samples)");
  ev->add_option("--steps", ea.steps, "network evaluations when drawing samples");
  ev->add_option("--out", ea.out, "metrics JSON");

  VerifyArgs va;
  auto* vf = app.add_subcommand("verify", "run verification suites");
  vf->add_option("--suite", va.suite, "all | sufficiency | equivalence | gap | estimators");
  vf->add_option("--D", va.D, "categorical vocabulary sizes")->delimiter(',');
  vf->add_option("--T", va.T, "step counts")->delimiter(',');
  vf->add_option("--out", va.out, "report JSON");
  vf->add_option("--gap-csv", va.gap_csv, "gap curve CSV");
  vf->add_option("--seed", va.seed, "seed");

  ConfigArgs xa;
  auto* ex = app.add_subcommand("experiment", "run a synthetic experiment end to end");
  xa.attach(ex);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitInvalid;
  }

  try {
    if (sch->parsed()) return cmd_schedule(sa);
    if (tr->parsed()) return cmd_train(ta);
    if (sp->parsed()) return cmd_sample(sm);
    if (ev->parsed()) return cmd_eval(ea);
    if (vf->parsed()) return cmd_verify(va);
    if (ex->parsed()) return cmd_experiment(xa);
  } catch (const Error& e) {
    std::cerr << "ssdiff: " << to_string(e.code()) << ": " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "ssdiff: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
