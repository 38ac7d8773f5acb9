#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fastgsc/diffusion.hpp"
#include "fastgsc/timeline.hpp"
#include "fastgsc/toyworld.hpp"
#include "fastgsc/tpe.hpp"

namespace fastgsc {

inline constexpr int kMetricsSchemaVersion = 1;

enum class Mode { kConventional, kPgscRandom, kTpePgsc, kScdPgsc, kFastGsc };

std::string_view mode_name(Mode mode);
Mode parse_mode(std::string_view name);  // throws ConfigInvalid
bool mode_uses_alpha(Mode mode);
bool mode_uses_policy(Mode mode);

// Flat on purpose: every field is one JSON key and one CLI flag.
struct ExperimentConfig {
  std::uint64_t world_seed = 7;
  double sigma = 0.25;
  LatencyConfig latency;

  double w = 2.0;
  double alpha = 4.0;  // only used by scd_pgsc and fast_gsc
  ScdDuration scd_duration = ScdDuration::kFirstStepOnly;
  int denoiser_steps = 100000;
  std::uint64_t denoiser_seed = 1;

  PpoConfig ppo;
  PolicyConfig policy_net;
  int policy_iterations = 150;
  int policy_batch = 32;
  int train_min_units = 4;
  int train_max_units = 8;
  bool masked = true;
  std::uint64_t policy_seed = 1;
  double latency_weight = 1.0;

  Mode mode = Mode::kFastGsc;
  int replicates = 200;
  std::uint64_t seed = 2024;
  int min_units = 8;
  int max_units = 8;
  int threads = 1;

  std::string output_dir = "runs/default";
  std::string denoiser_checkpoint = "artifacts/denoiser.ckpt";
  std::string policy_checkpoint = "artifacts/policy.ckpt";
  bool train_first = false;

  // Throws ConfigInvalid. RL fields are checked only for modes that use a
  // learned policy.
  void validate() const;
  double effective_alpha() const { return mode_uses_alpha(mode) ? alpha : 0.0; }
  GuidanceSettings guidance() const { return {w, effective_alpha(), scd_duration}; }
  EnvConfig env_config() const;
  PolicyTrainConfig policy_train_config() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
// Keys absent from j keep their value from base; unknown keys are rejected.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, ExperimentConfig base = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path, ExperimentConfig base = {});

// Checkpoints record the world they were trained on; loading one for a
// different world throws ConfigInvalid.
DenoiserModel train_denoiser(const ExperimentConfig& cfg, const WorldSpec& world,
                             const std::function<void(int, double)>& on_step = {});
DenoiserModel obtain_denoiser(const ExperimentConfig& cfg, const WorldSpec& world, std::ostream* log = nullptr);

struct PolicyTraining {
  PolicyCritic policy;
  std::vector<CurvePoint> curve;
};
PolicyTraining train_policy_for(const ExperimentConfig& cfg, const WorldSpec& world, const NoisePredictor& model,
                                const NoiseSchedule& sched,
                                const std::function<void(const CurvePoint&)>& on_iteration = {});
PolicyCritic obtain_policy(const ExperimentConfig& cfg, const WorldSpec& world, const NoisePredictor& model,
                           const NoiseSchedule& sched, std::ostream* log = nullptr);

struct ReplicateResult {
  int id = 0;
  double score = 0.0;
  double residual_latency = 0.0;
  double efficiency = 0.0;  // score / residual_latency
  int units = 0;
  int delivered = 0;
};

struct ExperimentResult {
  std::vector<ReplicateResult> replicates;
  std::vector<EpisodeTrace> episodes;
  // Sampler trace and per-phase selections of replicate 0.
  std::vector<TraceRow> first_trace;
  std::vector<std::vector<int>> first_phases;
  nlohmann::json metrics;
};

// Replicate i draws its request, noise and action streams from
// derive_seed(cfg.seed, i), so every mode sees the same requests and noise.
// `policy` is required for tpe_pgsc and fast_gsc.
ExperimentResult evaluate_mode(const ExperimentConfig& cfg, const WorldSpec& world, const NoisePredictor& model,
                               const NoiseSchedule& sched, const PolicyCritic* policy);

// Loads (or, with train_first, trains) the artifacts, evaluates, and writes
// config.json, metrics.json, replicates.csv, trace.csv and timeline.csv into
// cfg.output_dir. Throws MissingCheckpoint when an artifact is absent.
ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr);

struct SweepSetting {
  double tau_e = 5.0;
  int segment = 10;
};

struct SweepCell {
  SweepSetting setting;
  double alpha = 0.0;
  double mean_score = 0.0;
  double std_error = 0.0;
};

struct SweepResult {
  std::vector<SweepCell> cells;      // setting-major, alphas in input order
  std::vector<double> best_alpha;    // per setting, first maximizer on ties
};

std::vector<double> default_alpha_grid();          // 0, 2, ..., 20
std::vector<SweepSetting> default_sweep_settings();  // (2.5, 5), (5, 10), (7.5, 15)

// Random-order PGSC with SCD at each alpha; alpha = 0 is exactly the
// pgsc_random mode.
SweepResult sweep_alpha(const ExperimentConfig& cfg, const WorldSpec& world, const NoisePredictor& model,
                        const NoiseSchedule& sched, const std::vector<double>& alphas,
                        const std::vector<SweepSetting>& settings);
// As above, loading the denoiser and writing sweep.csv and sweep.json.
SweepResult run_sweep_alpha(const ExperimentConfig& cfg, const std::vector<double>& alphas,
                            const std::vector<SweepSetting>& settings, std::ostream* log = nullptr);

nlohmann::json to_json(const SweepResult& sweep);
void write_sweep_csv(std::ostream& out, const SweepResult& sweep);

// Canonical text of a JSON document as written to disk.
std::string dump_json(const nlohmann::json& j);

}  // namespace fastgsc
