#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fastgsc/error.hpp"
#include "fastgsc/experiment.hpp"
#include "oracles.hpp"

using namespace fastgsc;
namespace fs = std::filesystem;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::kMalformedInput;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Fixture {
  WorldSpec world = make_world(7);
  NoiseSchedule sched = NoiseSchedule::linear();
  oracle::GaussianPredictor model{sched, 16, 0.25};

  ExperimentConfig config(Mode mode, int replicates = 40) const {
    ExperimentConfig c;
    c.mode = mode;
    c.replicates = replicates;
    return c;
  }
};

fs::path scratch(const char* name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("experiment config JSON round trip") {
  ExperimentConfig c;
  c.mode = Mode::kScdPgsc;
  c.alpha = 12.0;
  c.latency.tau_e = 7.5;
  c.latency.segment = 15;
  c.scd_duration = ScdDuration::kPerSegment;
  c.ppo.lr = 0.003;
  c.masked = false;
  c.output_dir = "x/y";
  const nlohmann::json j = to_json(c);
  CHECK(to_json(experiment_config_from_json(j)) == j);

  // Partial documents override only what they name.
  const ExperimentConfig partial = experiment_config_from_json({{"w", 1.5}}, c);
  CHECK(partial.w == 1.5);
  CHECK(partial.alpha == 12.0);

  CHECK(code_of([] { experiment_config_from_json({{"alpah", 3.0}}); }) == ErrorCode::kConfigInvalid);
  CHECK(code_of([] { experiment_config_from_json({{"mode", "fastest"}}); }) == ErrorCode::kConfigInvalid);
  CHECK(code_of([] { experiment_config_from_json({{"replicates", "many"}}); }) == ErrorCode::kConfigInvalid);
  CHECK(code_of([] { experiment_config_from_json(nlohmann::json::array()); }) == ErrorCode::kConfigInvalid);
}

TEST_CASE("config validation") {
  for (auto mutate : std::vector<std::function<void(ExperimentConfig&)>>{
           [](ExperimentConfig& c) { c.replicates = 0; }, [](ExperimentConfig& c) { c.max_units = 9; },
           [](ExperimentConfig& c) { c.min_units = 5, c.max_units = 4; }, [](ExperimentConfig& c) { c.sigma = 0; },
           [](ExperimentConfig& c) { c.latency.segment = 7; }, [](ExperimentConfig& c) { c.ppo.lr = 0; }}) {
    ExperimentConfig c;
    mutate(c);
    CHECK(code_of([&] { c.validate(); }) == ErrorCode::kConfigInvalid);
  }
  // RL fields do not matter without a learned policy.
  ExperimentConfig c;
  c.mode = Mode::kPgscRandom;
  c.ppo.lr = 0.0;
  CHECK_NOTHROW(c.validate());
  CHECK(c.effective_alpha() == 0.0);
  c.mode = Mode::kFastGsc;
  CHECK(c.effective_alpha() == c.alpha);
}

TEST_CASE("mode names round trip") {
  for (Mode m : {Mode::kConventional, Mode::kPgscRandom, Mode::kTpePgsc, Mode::kScdPgsc, Mode::kFastGsc}) {
    CHECK(parse_mode(mode_name(m)) == m);
  }
  CHECK(mode_name(Mode::kFastGsc) == "fast_gsc");
}

TEST_CASE("conventional mode has residual tau_e * K on every replicate") {
  Fixture f;
  const ExperimentResult r = evaluate_mode(f.config(Mode::kConventional), f.world, f.model, f.sched, nullptr);
  REQUIRE(r.replicates.size() == 40);
  for (const auto& rep : r.replicates) {
    CHECK(rep.residual_latency == 40.0);
    CHECK(rep.delivered == 8);
    CHECK(rep.efficiency == doctest::Approx(rep.score / 40.0).epsilon(1e-9));
  }
  const auto& agg = r.metrics.at("aggregate");
  CHECK(agg.at("residual_latency").at("mean") == 40.0);
  CHECK(agg.at("residual_latency").at("std") == 0.0);
  CHECK(r.metrics.at("schema_version") == kMetricsSchemaVersion);
  CHECK_FALSE(r.metrics.at("config").contains("output_dir"));
  CHECK_FALSE(r.metrics.at("config").contains("threads"));
}

TEST_CASE("evaluation is deterministic and thread-count independent") {
  Fixture f;
  ExperimentConfig c = f.config(Mode::kScdPgsc, 24);
  const std::string a = dump_json(evaluate_mode(c, f.world, f.model, f.sched, nullptr).metrics);
  c.threads = 3;
  const std::string b = dump_json(evaluate_mode(c, f.world, f.model, f.sched, nullptr).metrics);
  CHECK(a == b);
  c.seed += 1;
  CHECK(dump_json(evaluate_mode(c, f.world, f.model, f.sched, nullptr).metrics) != a);
}

TEST_CASE("modes share requests and noise per replicate") {
  Fixture f;
  const auto conv = evaluate_mode(f.config(Mode::kConventional, 10), f.world, f.model, f.sched, nullptr);
  ExperimentConfig c = f.config(Mode::kPgscRandom, 10);
  c.min_units = 3;
  const auto rnd = evaluate_mode(c, f.world, f.model, f.sched, nullptr);
  const auto rnd2 = evaluate_mode(c, f.world, f.model, f.sched, nullptr);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(rnd.replicates[i].units >= 3);
    CHECK(rnd.replicates[i].score == rnd2.replicates[i].score);
    CHECK(rnd.replicates[i].residual_latency <= 5.0 * rnd.replicates[i].units);
  }
  CHECK(conv.replicates[0].units == 8);
}

TEST_CASE("learned modes need a policy") {
  Fixture f;
  CHECK(code_of([&] { evaluate_mode(f.config(Mode::kFastGsc, 2), f.world, f.model, f.sched, nullptr); }) ==
        ErrorCode::kMissingCheckpoint);
  PolicyCritic pc(8, kNumCategories);
  Rng rng(1);
  pc.initialize(rng);
  const auto r = evaluate_mode(f.config(Mode::kTpePgsc, 4), f.world, f.model, f.sched, &pc);
  CHECK(r.replicates.size() == 4);
}

TEST_CASE("sweep at alpha zero is random-order PGSC") {
  Fixture f;
  ExperimentConfig c = f.config(Mode::kScdPgsc, 30);
  const SweepResult s = sweep_alpha(c, f.world, f.model, f.sched, {0.0, 4.0}, {{5.0, 10}, {2.5, 5}});
  REQUIRE(s.cells.size() == 4);
  REQUIRE(s.best_alpha.size() == 2);

  ExperimentConfig base = f.config(Mode::kPgscRandom, 30);
  const auto r = evaluate_mode(base, f.world, f.model, f.sched, nullptr);
  double mean = 0.0;
  for (const auto& rep : r.replicates) mean += rep.score;
  mean /= 30;
  CHECK(s.cells[0].alpha == 0.0);
  CHECK(s.cells[0].mean_score == doctest::Approx(mean).epsilon(1e-12));
  CHECK(s.cells[2].setting.segment == 5);
  CHECK(s.best_alpha[0] == (s.cells[1].mean_score > s.cells[0].mean_score ? 4.0 : 0.0));

  std::ostringstream csv;
  write_sweep_csv(csv, s);
  CHECK(csv.str().rfind("tau_e,segment,alpha,mean_score,std_error\n", 0) == 0);
  CHECK(to_json(s).at("cells").size() == 4);
  CHECK(code_of([&] { sweep_alpha(c, f.world, f.model, f.sched, {}, default_sweep_settings()); }) ==
        ErrorCode::kConfigInvalid);
}

TEST_CASE("run_experiment reports missing checkpoints") {
  const fs::path dir = scratch("fastgsc_exp_missing");
  ExperimentConfig c;
  c.mode = Mode::kConventional;
  c.denoiser_checkpoint = (dir / "none.ckpt").string();
  c.output_dir = (dir / "out").string();
  CHECK(code_of([&] { run_experiment(c); }) == ErrorCode::kMissingCheckpoint);
  CHECK_FALSE(fs::exists(dir / "out" / "metrics.json"));
  fs::remove_all(dir);
}

TEST_CASE("run_experiment writes its outputs and reruns byte-identically") {
  const fs::path dir = scratch("fastgsc_exp_run");
  ExperimentConfig c;
  c.mode = Mode::kScdPgsc;
  c.replicates = 6;
  c.denoiser_steps = 30;
  c.denoiser_checkpoint = (dir / "denoiser.ckpt").string();
  c.output_dir = (dir / "a").string();
  c.train_first = true;
  run_experiment(c);
  CHECK(fs::exists(dir / "denoiser.ckpt"));

  // Second run loads the checkpoint instead of training.
  c.output_dir = (dir / "b").string();
  c.train_first = false;
  run_experiment(c);
  for (const char* name : {"metrics.json", "replicates.csv", "trace.csv", "timeline.csv"}) {
    CHECK(slurp(dir / "a" / name) == slurp(dir / "b" / name));
  }
  CHECK(slurp(dir / "a" / "replicates.csv").rfind("id,score,residual_latency,efficiency,units,delivered\n", 0) == 0);
  const nlohmann::json cfg = nlohmann::json::parse(slurp(dir / "a" / "config.json"));
  CHECK(cfg.at("mode") == "scd_pgsc");

  // A checkpoint from another world is refused.
  c.world_seed = 8;
  CHECK(code_of([&] { run_experiment(c); }) == ErrorCode::kConfigInvalid);
  fs::remove_all(dir);
}
