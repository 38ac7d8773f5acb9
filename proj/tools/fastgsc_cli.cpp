// fastgsc: train the denoiser and scheduling policy, run experiments, sweep
// the SCD intervention factor and summarize run directories.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "fastgsc/error.hpp"
#include "fastgsc/experiment.hpp"

namespace fs = std::filesystem;
using fastgsc::Error;
using fastgsc::ErrorCode;
using fastgsc::ExperimentConfig;
using nlohmann::json;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfigError = 2, kMissingArtifact = 3, kDivergence = 4 };

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfigInvalid:
    case ErrorCode::kMalformedInput:
      return kConfigError;
    case ErrorCode::kMissingCheckpoint:
      return kMissingArtifact;
    case ErrorCode::kNonFiniteLoss:
      return kDivergence;
    default:
      return kFailure;
  }
}

// One --flag per config key (underscores become dashes). Values are kept as
// text and converted with the type of the default, so the JSON config file
// and the command line share one parser.
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App& app) {
    app.add_option("-c,--config", config_path, "JSON config file; flags override its values");
    const json defaults = fastgsc::to_json(ExperimentConfig{});
    for (const auto& [key, value] : defaults.items()) {
      std::string flag = "--" + key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      options[key] = app.add_option(flag, values[key], "default " + value.dump());
    }
  }

  ExperimentConfig resolve() const {
    ExperimentConfig cfg;
    if (!config_path.empty()) cfg = fastgsc::load_experiment_config(config_path, cfg);
    const json defaults = fastgsc::to_json(cfg);
    json overrides = json::object();
    for (const auto& [key, opt] : options) {
      if (opt->count() == 0) continue;
      const std::string& text = values.at(key);
      if (defaults.at(key).is_string()) {
        overrides[key] = text;
        continue;
      }
      try {
        overrides[key] = json::parse(text);
      } catch (const json::exception&) {
        throw Error(ErrorCode::kConfigInvalid, "--" + key + ": cannot parse '" + text + "'");
      }
    }
    return fastgsc::experiment_config_from_json(overrides, cfg);
  }
};

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(json::parse(item).get<T>());
    } catch (const json::exception&) {
      throw Error(ErrorCode::kConfigInvalid, std::string(what) + ": bad list entry '" + item + "'");
    }
  }
  if (out.empty()) throw Error(ErrorCode::kConfigInvalid, std::string(what) + " must not be empty");
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kConfigInvalid, "cannot write " + path.string());
  out << text;
}

int cmd_train_denoiser(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto world = fastgsc::make_world(cfg.world_seed, cfg.sigma);
  std::ostringstream curve;
  curve << "step,mean_loss\n";
  double acc = 0.0;
  const int every = std::max(1, std::min(500, cfg.denoiser_steps));
  auto model = fastgsc::train_denoiser(cfg, world, [&](int step, double loss) {
    acc += loss;
    if ((step + 1) % every == 0) {
      curve << step + 1 << ',' << acc / every << '\n';
      std::cerr << "step " << step + 1 << " loss " << acc / every << '\n';
      acc = 0.0;
    }
  });

  // Held-out loss against the constant-zero predictor, whose expected loss is 1.
  fastgsc::Rng rng(fastgsc::derive_seed(cfg.denoiser_seed, 0xE7A1));
  std::vector<fastgsc::TrainingPair> pairs;
  for (int i = 0; i < 4096; ++i) pairs.push_back(fastgsc::sample_training_pair(world, rng));
  const auto batch = fastgsc::make_noised_batch(model, world, pairs, 0.1, rng);
  const double held_out = fastgsc::denoiser_loss(model, batch, nullptr);

  json extra = {{"world_seed", cfg.world_seed},
                {"sigma", cfg.sigma},
                {"train_steps", cfg.denoiser_steps},
                {"train_seed", cfg.denoiser_seed},
                {"held_out_loss", held_out}};
  fastgsc::save_denoiser(cfg.denoiser_checkpoint, model, extra);
  write_text(fs::path(cfg.output_dir) / "denoiser_loss.csv", curve.str());
  std::cout << "held-out loss " << held_out << " (constant-zero predictor: 1.0)\n"
            << "checkpoint " << cfg.denoiser_checkpoint << '\n';
  return kOk;
}

int cmd_train_policy(ExperimentConfig cfg, int eval_episodes) {
  if (!fastgsc::mode_uses_policy(cfg.mode)) cfg.mode = fastgsc::Mode::kTpePgsc;
  cfg.validate();
  const auto world = fastgsc::make_world(cfg.world_seed, cfg.sigma);
  const auto model = fastgsc::obtain_denoiser(cfg, world, &std::cerr);
  auto trained = fastgsc::train_policy_for(cfg, world, model, model.schedule(), [](const fastgsc::CurvePoint& p) {
    if (p.iteration % 10 == 0) {
      std::cerr << "iteration " << p.iteration << " return " << p.mean_return << " score " << p.mean_score
                << " residual " << p.mean_residual << " entropy " << p.entropy << '\n';
    }
  });
  fastgsc::save_policy(cfg.policy_checkpoint, trained.policy,
                       {{"world_seed", cfg.world_seed},
                        {"sigma", cfg.sigma},
                        {"masked", cfg.masked},
                        {"policy_seed", cfg.policy_seed},
                        {"iterations", cfg.policy_iterations}});
  const fs::path dir = cfg.output_dir;
  std::ostringstream curve;
  fastgsc::write_curve_csv(curve, trained.curve);
  write_text(dir / "policy_curve.csv", curve.str());

  fastgsc::EnvConfig env = cfg.env_config();
  env.guidance.alpha = 0.0;
  // Evaluate what was written, not the unrounded in-memory weights.
  const auto stored = fastgsc::load_policy(cfg.policy_checkpoint);
  const fastgsc::LearnedPolicy actor(stored, cfg.masked);
  const auto episodes = fastgsc::collect_episodes(world, model, model.schedule(), env, actor, eval_episodes,
                                                  cfg.train_min_units, cfg.train_max_units,
                                                  fastgsc::derive_seed(cfg.policy_seed, 0xE7A1), 0, cfg.threads);
  const auto summary = fastgsc::summarize_episodes(episodes, cfg.latency.num_phases());
  write_text(dir / "policy_eval.json", fastgsc::dump_json(fastgsc::to_json(summary)));
  std::cout << "checkpoint " << cfg.policy_checkpoint << "\nevaluation: score " << summary.mean_score
            << ", residual " << summary.mean_residual << ", discard probability " << summary.discard_probability
            << '\n';
  return kOk;
}

int cmd_run(const ExperimentConfig& cfg) {
  fastgsc::run_experiment(cfg, &std::cerr);
  std::cout << (fs::path(cfg.output_dir) / "metrics.json").string() << '\n';
  return kOk;
}

int cmd_sweep(const ExperimentConfig& cfg, const std::string& alphas, const std::string& tau_e,
              const std::string& segments) {
  const auto a = parse_list<double>(alphas, "--alphas");
  const auto t = parse_list<double>(tau_e, "--tau-e-list");
  const auto s = parse_list<int>(segments, "--segment-list");
  if (t.size() != s.size()) throw Error(ErrorCode::kConfigInvalid, "--tau-e-list and --segment-list differ in length");
  std::vector<fastgsc::SweepSetting> settings;
  for (std::size_t i = 0; i < t.size(); ++i) settings.push_back({t[i], s[i]});
  const auto sweep = fastgsc::run_sweep_alpha(cfg, a, settings, &std::cerr);
  fastgsc::write_sweep_csv(std::cout, sweep);
  return kOk;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kMissingCheckpoint, "missing " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformedInput, path.string() + ": " + e.what());
  }
}

int cmd_report(const std::vector<std::string>& dirs) {
  std::cout << std::left << std::setw(14) << "mode" << std::right << std::setw(22) << "score" << std::setw(22)
            << "residual" << std::setw(22) << "efficiency" << "  run\n";
  std::cout << std::fixed << std::setprecision(4);
  for (const auto& d : dirs) {
    const fs::path dir = d;
    if (fs::exists(dir / "metrics.json")) {
      const json m = read_json(dir / "metrics.json");
      const json& a = m.at("aggregate");
      auto cell = [](const json& v) {
        std::ostringstream s;
        s << std::fixed << std::setprecision(4) << v.at("mean").get<double>() << " +- " << v.at("std").get<double>();
        return s.str();
      };
      std::cout << std::left << std::setw(14) << m.at("mode").get<std::string>() << std::right << std::setw(22)
                << cell(a.at("score")) << std::setw(22) << cell(a.at("residual_latency")) << std::setw(22)
                << cell(a.at("efficiency")) << "  " << d << '\n';
    }
    if (fs::exists(dir / "sweep.json")) {
      const json s = read_json(dir / "sweep.json");
      std::cout << "sweep " << d << '\n';
      for (const auto& c : s.at("cells")) {
        std::cout << "  tau_e " << c.at("tau_e").get<double>() << " alpha " << std::setw(6) << c.at("alpha").get<double>()
                  << "  score " << c.at("mean_score").get<double>() << " +- " << c.at("std_error").get<double>()
                  << '\n';
      }
    }
    if (!fs::exists(dir / "metrics.json") && !fs::exists(dir / "sweep.json")) {
      throw Error(ErrorCode::kMissingCheckpoint, "no metrics.json or sweep.json in " + d);
    }
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FAST-GSC pipeline simulator"};
  app.require_subcommand(1);

  ConfigFlags denoiser_flags, policy_flags, run_flags, sweep_flags;
  auto* train_denoiser = app.add_subcommand("train-denoiser", "train the conditional denoiser");
  denoiser_flags.attach(*train_denoiser);

  int eval_episodes = 500;
  auto* train_policy = app.add_subcommand("train-policy", "train the extraction/transmission policy with PPO");
  policy_flags.attach(*train_policy);
  train_policy->add_option("--eval-episodes", eval_episodes, "episodes for the post-training summary")
      ->check(CLI::PositiveNumber);

  auto* run = app.add_subcommand("run", "evaluate one mode and write a run directory");
  run_flags.attach(*run);

  std::string alphas = "0,2,4,6,8,10,12,14,16,18,20", tau_e_list = "2.5,5,7.5", segment_list = "5,10,15";
  auto* sweep = app.add_subcommand("sweep-alpha", "score table over intervention factor and extraction latency");
  sweep_flags.attach(*sweep);
  sweep->add_option("--alphas", alphas, "comma-separated alpha grid");
  sweep->add_option("--tau-e-list", tau_e_list, "comma-separated extraction latencies");
  sweep->add_option("--segment-list", segment_list, "segment length paired with each latency");

  std::vector<std::string> report_dirs;
  auto* report = app.add_subcommand("report", "summarize run directories");
  report->add_option("dirs", report_dirs, "run directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*train_denoiser) return cmd_train_denoiser(denoiser_flags.resolve());
    if (*train_policy) return cmd_train_policy(policy_flags.resolve(), eval_episodes);
    if (*run) return cmd_run(run_flags.resolve());
    if (*sweep) return cmd_sweep(sweep_flags.resolve(), alphas, tau_e_list, segment_list);
    if (*report) return cmd_report(report_dirs);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}
