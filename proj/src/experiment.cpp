#include "fastgsc/experiment.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <thread>

#include "fastgsc/checkpoint.hpp"
#include "fastgsc/error.hpp"

namespace fastgsc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<std::pair<Mode, std::string_view>, 5> kModeNames{{
    {Mode::kConventional, "conventional"},
    {Mode::kPgscRandom, "pgsc_random"},
    {Mode::kTpePgsc, "tpe_pgsc"},
    {Mode::kScdPgsc, "scd_pgsc"},
    {Mode::kFastGsc, "fast_gsc"},
}};

std::string_view duration_name(ScdDuration d) {
  return d == ScdDuration::kPerSegment ? "per_segment" : "first_step";
}

ScdDuration parse_duration(std::string_view s) {
  if (s == "per_segment") return ScdDuration::kPerSegment;
  if (s == "first_step") return ScdDuration::kFirstStepOnly;
  throw Error(ErrorCode::kConfigInvalid, "scd_duration must be per_segment or first_step");
}

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::kConfigInvalid, what);
}

std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kConfigInvalid, "cannot write " + path.string());
  return out;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return m;
}

json mean_std_json(const std::vector<double>& v) {
  const MeanStd m = mean_std(v);
  return {{"mean", m.mean}, {"std", m.std}};
}

// Fields that describe where things live rather than what is computed.
json computational_config(const ExperimentConfig& cfg) {
  json j = to_json(cfg);
  for (const char* key : {"output_dir", "denoiser_checkpoint", "policy_checkpoint", "train_first", "threads"}) {
    j.erase(key);
  }
  return j;
}

}  // namespace

std::string_view mode_name(Mode mode) {
  for (const auto& [m, name] : kModeNames)
    if (m == mode) return name;
  return "unknown";
}

Mode parse_mode(std::string_view name) {
  for (const auto& [m, n] : kModeNames)
    if (n == name) return m;
  throw Error(ErrorCode::kConfigInvalid, "unknown mode '" + std::string(name) + "'");
}

bool mode_uses_alpha(Mode mode) { return mode == Mode::kScdPgsc || mode == Mode::kFastGsc; }
bool mode_uses_policy(Mode mode) { return mode == Mode::kTpePgsc || mode == Mode::kFastGsc; }

void ExperimentConfig::validate() const {
  try {
    latency.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::kConfigInvalid, e.what());
  }
  require(sigma > 0.0 && std::isfinite(sigma), "sigma must be positive");
  require(w >= 0.0 && std::isfinite(w), "w must be non-negative");
  require(replicates >= 1, "replicates must be at least 1");
  require(threads >= 1, "threads must be at least 1");
  require(denoiser_steps >= 1, "denoiser_steps must be at least 1");
  const int k_max = WorldLayout{}.k_max;
  require(min_units >= 1 && min_units <= max_units && max_units <= k_max, "need 1 <= min_units <= max_units <= K_max");
  if (mode_uses_alpha(mode)) require(std::isfinite(alpha), "alpha must be finite");
  if (mode_uses_policy(mode)) {
    require(ppo.lr > 0.0, "lr must be positive");
    require(ppo.gamma > 0.0 && ppo.gamma <= 1.0, "gamma must be in (0, 1]");
    require(ppo.lambda >= 0.0 && ppo.lambda <= 1.0, "lambda must be in [0, 1]");
    require(ppo.eta > 0.0, "eta must be positive");
    require(ppo.xi >= 0.0, "xi must be non-negative");
    require(ppo.epochs >= 1 && ppo.minibatch >= 1, "epochs and minibatch must be positive");
    require(policy_iterations >= 1 && policy_batch >= 1, "policy_iterations and batch must be positive");
    require(train_min_units >= 1 && train_min_units <= train_max_units && train_max_units <= k_max,
            "need 1 <= train_min_units <= train_max_units <= K_max");
    require(policy_net.hidden >= 1 && policy_net.hidden_layers >= 1, "policy network shape must be positive");
    require(latency_weight >= 0.0, "latency_weight must be non-negative");
  }
}

EnvConfig ExperimentConfig::env_config() const {
  EnvConfig e;
  e.latency = latency;
  e.guidance = guidance();
  e.enforce_mask = mode_uses_policy(mode) ? masked : true;
  e.latency_weight = latency_weight;
  return e;
}

PolicyTrainConfig ExperimentConfig::policy_train_config() const {
  PolicyTrainConfig t;
  t.iterations = policy_iterations;
  t.episodes_per_batch = policy_batch;
  t.min_units = train_min_units;
  t.max_units = train_max_units;
  t.masked = masked;
  t.seed = policy_seed;
  t.threads = threads;
  return t;
}

json to_json(const ExperimentConfig& c) {
  return {
      {"world_seed", c.world_seed},
      {"sigma", c.sigma},
      {"tau_e", c.latency.tau_e},
      {"tau_m", c.latency.tau_m},
      {"M", c.latency.M},
      {"segment", c.latency.segment},
      {"tau_trans", c.latency.tau_trans},
      {"censor_late", c.latency.censor_late},
      {"w", c.w},
      {"alpha", c.alpha},
      {"scd_duration", duration_name(c.scd_duration)},
      {"denoiser_steps", c.denoiser_steps},
      {"denoiser_seed", c.denoiser_seed},
      {"lr", c.ppo.lr},
      {"gamma", c.ppo.gamma},
      {"lambda", c.ppo.lambda},
      {"xi", c.ppo.xi},
      {"eta", c.ppo.eta},
      {"epochs", c.ppo.epochs},
      {"minibatch", c.ppo.minibatch},
      {"max_grad_norm", c.ppo.max_grad_norm},
      {"policy_hidden", c.policy_net.hidden},
      {"policy_layers", c.policy_net.hidden_layers},
      {"policy_iterations", c.policy_iterations},
      {"batch", c.policy_batch},
      {"train_min_units", c.train_min_units},
      {"train_max_units", c.train_max_units},
      {"masked", c.masked},
      {"policy_seed", c.policy_seed},
      {"latency_weight", c.latency_weight},
      {"mode", mode_name(c.mode)},
      {"replicates", c.replicates},
      {"seed", c.seed},
      {"min_units", c.min_units},
      {"max_units", c.max_units},
      {"threads", c.threads},
      {"output_dir", c.output_dir},
      {"denoiser_checkpoint", c.denoiser_checkpoint},
      {"policy_checkpoint", c.policy_checkpoint},
      {"train_first", c.train_first},
  };
}

ExperimentConfig experiment_config_from_json(const json& j, ExperimentConfig c) {
  if (!j.is_object()) throw Error(ErrorCode::kConfigInvalid, "config must be a JSON object");
  const json known = to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw Error(ErrorCode::kConfigInvalid, "unknown config key '" + key + "'");
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("world_seed", c.world_seed);
    get("sigma", c.sigma);
    get("tau_e", c.latency.tau_e);
    get("tau_m", c.latency.tau_m);
    get("M", c.latency.M);
    get("segment", c.latency.segment);
    get("tau_trans", c.latency.tau_trans);
    get("censor_late", c.latency.censor_late);
    get("w", c.w);
    get("alpha", c.alpha);
    if (j.contains("scd_duration")) c.scd_duration = parse_duration(j.at("scd_duration").get<std::string>());
    get("denoiser_steps", c.denoiser_steps);
    get("denoiser_seed", c.denoiser_seed);
    get("lr", c.ppo.lr);
    get("gamma", c.ppo.gamma);
    get("lambda", c.ppo.lambda);
    get("xi", c.ppo.xi);
    get("eta", c.ppo.eta);
    get("epochs", c.ppo.epochs);
    get("minibatch", c.ppo.minibatch);
    get("max_grad_norm", c.ppo.max_grad_norm);
    get("policy_hidden", c.policy_net.hidden);
    get("policy_layers", c.policy_net.hidden_layers);
    get("policy_iterations", c.policy_iterations);
    get("batch", c.policy_batch);
    get("train_min_units", c.train_min_units);
    get("train_max_units", c.train_max_units);
    get("masked", c.masked);
    get("policy_seed", c.policy_seed);
    get("latency_weight", c.latency_weight);
    if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
    get("replicates", c.replicates);
    get("seed", c.seed);
    get("min_units", c.min_units);
    get("max_units", c.max_units);
    get("threads", c.threads);
    get("output_dir", c.output_dir);
    get("denoiser_checkpoint", c.denoiser_checkpoint);
    get("policy_checkpoint", c.policy_checkpoint);
    get("train_first", c.train_first);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfigInvalid, std::string("config value has the wrong type: ") + e.what());
  }
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path, ExperimentConfig base) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kConfigInvalid, "cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfigInvalid, "config " + path.string() + " is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(j, std::move(base));
}

// --- artifacts -----------------------------------------------------------------

namespace {

json world_stamp(const ExperimentConfig& cfg) { return {{"world_seed", cfg.world_seed}, {"sigma", cfg.sigma}}; }

void check_world_stamp(const json& header, const ExperimentConfig& cfg, const fs::path& path) {
  const json stamp = world_stamp(cfg);
  for (const auto& [key, value] : stamp.items()) {
    if (header.contains(key) && header.at(key) != value) {
      throw Error(ErrorCode::kConfigInvalid, path.string() + " was trained with " + key + "=" +
                                                 header.at(key).dump() + ", config has " + value.dump());
    }
  }
}

}  // namespace

DenoiserModel train_denoiser(const ExperimentConfig& cfg, const WorldSpec& world,
                             const std::function<void(int, double)>& on_step) {
  DenoiserConfig dc;
  dc.dim = world.dim();
  DenoiserModel model(dc, NoiseSchedule::linear());
  Rng rng(derive_seed(cfg.denoiser_seed, 0xD1FF));
  model.initialize(rng);
  DenoiserTrainConfig tc;
  tc.steps = cfg.denoiser_steps;
  DenoiserTrainer trainer(model, world, tc);
  trainer.train(rng, on_step);
  // Keep the in-memory model identical to what a reload would produce.
  round_to_float32(model.network().params());
  return model;
}

DenoiserModel obtain_denoiser(const ExperimentConfig& cfg, const WorldSpec& world, std::ostream* log) {
  const fs::path path = cfg.denoiser_checkpoint;
  if (fs::exists(path)) {
    check_world_stamp(read_checkpoint(path).header, cfg, path);
    return load_denoiser(path);
  }
  if (!cfg.train_first) throw Error(ErrorCode::kMissingCheckpoint, "no denoiser checkpoint at " + path.string());
  if (log) *log << "training denoiser (" << cfg.denoiser_steps << " steps) -> " << path.string() << '\n';
  DenoiserModel model = train_denoiser(cfg, world);
  json extra = world_stamp(cfg);
  extra["train_steps"] = cfg.denoiser_steps;
  extra["train_seed"] = cfg.denoiser_seed;
  save_denoiser(path, model, extra);
  return model;
}

PolicyTraining train_policy_for(const ExperimentConfig& cfg, const WorldSpec& world, const NoisePredictor& model,
                                const NoiseSchedule& sched,
                                const std::function<void(const CurvePoint&)>& on_iteration) {
  PolicyTraining out{PolicyCritic(world.table.k_max, world.table.n_e, cfg.policy_net), {}};
  Rng init(derive_seed(cfg.policy_seed, 0x1417));
  out.policy.initialize(init);
  // The schedule is learned on plain PGSC; SCD is layered on at evaluation.
  EnvConfig env = cfg.env_config();
  env.guidance.alpha = 0.0;
  out.curve = train_policy(out.policy, world, model, sched, env, cfg.ppo, cfg.policy_train_config(), on_iteration);
  return out;
}

PolicyCritic obtain_policy(const ExperimentConfig& cfg, const WorldSpec& world, const NoisePredictor& model,
                           const NoiseSchedule& sched, std::ostream* log) {
  const fs::path path = cfg.policy_checkpoint;
  if (fs::exists(path)) {
    json header;
    PolicyCritic pc = load_policy(path, &header);
    check_world_stamp(header, cfg, path);
    if (pc.k_max() != world.table.k_max || pc.n_e() != world.table.n_e) {
      throw Error(ErrorCode::kConfigInvalid, path.string() + " does not match the world shape");
    }
    return pc;
  }
  if (!cfg.train_first) throw Error(ErrorCode::kMissingCheckpoint, "no policy checkpoint at " + path.string());
  if (log) *log << "training policy (" << cfg.policy_iterations << " iterations) -> " << path.string() << '\n';
  PolicyTraining t = train_policy_for(cfg, world, model, sched);
  json extra = world_stamp(cfg);
  extra["masked"] = cfg.masked;
  extra["policy_seed"] = cfg.policy_seed;
  extra["iterations"] = cfg.policy_iterations;
  save_policy(path, t.policy, extra);
  return load_policy(path);
}

// --- evaluation ----------------------------------------------------------------

ExperimentResult evaluate_mode(const ExperimentConfig& cfg, const WorldSpec& world, const NoisePredictor& model,
                               const NoiseSchedule& sched, const PolicyCritic* policy) {
  cfg.validate();
  std::unique_ptr<Policy> actor;
  switch (cfg.mode) {
    case Mode::kConventional:
      actor = std::make_unique<AllAtOncePolicy>();
      break;
    case Mode::kPgscRandom:
    case Mode::kScdPgsc:
      actor = std::make_unique<RandomPolicy>(true);
      break;
    case Mode::kTpePgsc:
    case Mode::kFastGsc:
      if (!policy) throw Error(ErrorCode::kMissingCheckpoint, "mode needs a trained policy");
      actor = std::make_unique<LearnedPolicy>(*policy, cfg.masked);
      break;
  }
  const EnvConfig env_cfg = cfg.env_config();
  const int n = cfg.replicates;

  ExperimentResult res;
  res.replicates.resize(static_cast<std::size_t>(n));
  res.episodes.resize(static_cast<std::size_t>(n));
  auto work = [&](int begin, int stride) {
    SchedulingEnv env(world, model, sched, env_cfg);
    for (int i = begin; i < n; i += stride) {
      const std::uint64_t rep = derive_seed(cfg.seed, static_cast<std::uint64_t>(i));
      Rng request_rng(derive_seed(rep, 0)), action_rng(derive_seed(rep, 2));
      const TaskRequest req = sample_request(world, request_rng, cfg.min_units, cfg.max_units);
      EpisodeTrace tr = run_episode(env, *actor, req, derive_seed(rep, 1), action_rng);
      ReplicateResult& r = res.replicates[static_cast<std::size_t>(i)];
      r.id = i;
      r.score = tr.score;
      r.residual_latency = tr.residual_latency;
      r.efficiency = tr.residual_latency > 0.0 ? tr.score / tr.residual_latency : 0.0;
      r.units = req.size();
      r.delivered = static_cast<int>(std::count(tr.delivered.begin(), tr.delivered.end(), 1));
      if (i == 0) {
        res.first_trace = env.sampler_trace();
        res.first_phases = env.phase_units();
      }
      res.episodes[static_cast<std::size_t>(i)] = std::move(tr);
    }
  };
  const int threads = std::clamp(cfg.threads, 1, n);
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          work(t, threads);
        } catch (...) {
          errors[static_cast<std::size_t>(t)] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  std::vector<double> score, residual, efficiency;
  json reps = json::array();
  for (const auto& r : res.replicates) {
    score.push_back(r.score);
    residual.push_back(r.residual_latency);
    efficiency.push_back(r.efficiency);
    reps.push_back({{"id", r.id},
                    {"score", r.score},
                    {"residual_latency", r.residual_latency},
                    {"efficiency", r.efficiency},
                    {"units", r.units},
                    {"delivered", r.delivered}});
  }
  res.metrics = {
      {"schema_version", kMetricsSchemaVersion},
      {"mode", mode_name(cfg.mode)},
      {"config", computational_config(cfg)},
      {"aggregate",
       {{"score", mean_std_json(score)},
        {"residual_latency", mean_std_json(residual)},
        {"efficiency", mean_std_json(efficiency)}}},
      {"transmission", to_json(summarize_episodes(res.episodes, cfg.latency.num_phases()))},
      {"replicates", reps},
  };
  return res;
}

namespace {

void write_replicates_csv(std::ostream& out, const std::vector<ReplicateResult>& reps) {
  out.precision(17);
  out << "id,score,residual_latency,efficiency,units,delivered\n";
  for (const auto& r : reps) {
    out << r.id << ',' << r.score << ',' << r.residual_latency << ',' << r.efficiency << ',' << r.units << ','
        << r.delivered << '\n';
  }
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* log) {
  cfg.validate();
  const WorldSpec world = make_world(cfg.world_seed, cfg.sigma);
  const DenoiserModel model = obtain_denoiser(cfg, world, log);
  std::optional<PolicyCritic> policy;
  if (mode_uses_policy(cfg.mode)) policy.emplace(obtain_policy(cfg, world, model, model.schedule(), log));

  ExperimentResult res = evaluate_mode(cfg, world, model, model.schedule(), policy ? &*policy : nullptr);

  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  open_output(dir / "config.json") << dump_json(to_json(cfg));
  open_output(dir / "metrics.json") << dump_json(res.metrics);
  {
    auto out = open_output(dir / "replicates.csv");
    write_replicates_csv(out, res.replicates);
  }
  {
    auto out = open_output(dir / "trace.csv");
    write_trace_csv(out, res.first_trace);
  }
  {
    auto out = open_output(dir / "timeline.csv");
    if (!res.first_phases.empty() && !res.first_phases.front().empty()) {
      write_timeline_csv(out, res.first_phases, pgsc_timeline(res.first_phases, cfg.latency), cfg.latency);
    } else {
      out << "phase,n_t,overshoot,arrivals\n";
    }
  }
  if (log) {
    const auto& a = res.metrics.at("aggregate");
    *log << mode_name(cfg.mode) << ": score " << a.at("score").at("mean").get<double>() << ", residual "
         << a.at("residual_latency").at("mean").get<double>() << " -> " << dir.string() << '\n';
  }
  return res;
}

// --- alpha sweep ---------------------------------------------------------------

std::vector<double> default_alpha_grid() {
  std::vector<double> g;
  for (int a = 0; a <= 20; a += 2) g.push_back(a);
  return g;
}

std::vector<SweepSetting> default_sweep_settings() { return {{2.5, 5}, {5.0, 10}, {7.5, 15}}; }

SweepResult sweep_alpha(const ExperimentConfig& cfg, const WorldSpec& world, const NoisePredictor& model,
                        const NoiseSchedule& sched, const std::vector<double>& alphas,
                        const std::vector<SweepSetting>& settings) {
  if (alphas.empty() || settings.empty()) throw Error(ErrorCode::kConfigInvalid, "sweep grids must be non-empty");
  SweepResult out;
  for (const auto& s : settings) {
    double best = -1.0;
    double best_alpha = alphas.front();
    for (double a : alphas) {
      ExperimentConfig c = cfg;
      c.latency.tau_e = s.tau_e;
      c.latency.segment = s.segment;
      c.alpha = a;
      c.mode = a == 0.0 ? Mode::kPgscRandom : Mode::kScdPgsc;
      const ExperimentResult r = evaluate_mode(c, world, model, sched, nullptr);
      std::vector<double> scores;
      for (const auto& rep : r.replicates) scores.push_back(rep.score);
      const MeanStd m = mean_std(scores);
      out.cells.push_back({s, a, m.mean, m.std / std::sqrt(static_cast<double>(scores.size()))});
      if (m.mean > best) {
        best = m.mean;
        best_alpha = a;
      }
    }
    out.best_alpha.push_back(best_alpha);
  }
  return out;
}

SweepResult run_sweep_alpha(const ExperimentConfig& cfg, const std::vector<double>& alphas,
                            const std::vector<SweepSetting>& settings, std::ostream* log) {
  ExperimentConfig base = cfg;
  base.mode = Mode::kScdPgsc;
  base.validate();
  const WorldSpec world = make_world(cfg.world_seed, cfg.sigma);
  const DenoiserModel model = obtain_denoiser(cfg, world, log);
  SweepResult sweep = sweep_alpha(base, world, model, model.schedule(), alphas, settings);
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  {
    auto out = open_output(dir / "sweep.csv");
    write_sweep_csv(out, sweep);
  }
  json j = to_json(sweep);
  j["config"] = computational_config(base);
  open_output(dir / "sweep.json") << dump_json(j);
  if (log) {
    for (std::size_t i = 0; i < settings.size(); ++i) {
      *log << "tau_e " << settings[i].tau_e << " (segment " << settings[i].segment << "): best alpha "
           << sweep.best_alpha[i] << '\n';
    }
  }
  return sweep;
}

json to_json(const SweepResult& sweep) {
  json cells = json::array();
  for (const auto& c : sweep.cells) {
    cells.push_back({{"tau_e", c.setting.tau_e},
                     {"segment", c.setting.segment},
                     {"alpha", c.alpha},
                     {"mean_score", c.mean_score},
                     {"std_error", c.std_error}});
  }
  return {{"schema_version", kMetricsSchemaVersion}, {"cells", cells}, {"best_alpha", sweep.best_alpha}};
}

void write_sweep_csv(std::ostream& out, const SweepResult& sweep) {
  out.precision(17);
  out << "tau_e,segment,alpha,mean_score,std_error\n";
  for (const auto& c : sweep.cells) {
    out << c.setting.tau_e << ',' << c.setting.segment << ',' << c.alpha << ',' << c.mean_score << ','
        << c.std_error << '\n';
  }
}

std::string dump_json(const json& j) { return j.dump(2) + "\n"; }

}  // namespace fastgsc
