#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <span>
#include <string_view>
#include <vector>

#include "fastgsc/mlp.hpp"
#include "fastgsc/rng.hpp"
#include "fastgsc/semunits.hpp"
#include "fastgsc/timeline.hpp"
#include "fastgsc/toyworld.hpp"

namespace fastgsc {

// beta, alpha and alpha_bar indexed by t in [0, T]; t = 0 is the clean end
// (beta = 0, alpha_bar = 1).
class NoiseSchedule {
 public:
  static NoiseSchedule linear(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02);

  int T() const { return T_; }
  double beta(int t) const { return beta_.at(static_cast<std::size_t>(t)); }
  double alpha(int t) const { return 1.0 - beta(t); }
  double alpha_bar(int t) const { return alpha_bar_.at(static_cast<std::size_t>(t)); }

  // M evenly spaced timesteps, descending, starting at T. Denoising step m
  // moves from timesteps[m] to timesteps[m + 1] (or to 0 after the last).
  std::vector<int> sampling_timesteps(int M) const;

  nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& j);

 private:
  int T_ = 0;
  double beta_start_ = 0.0;
  double beta_end_ = 0.0;
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

// x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) noise. Throws StepOutOfRange
// unless 1 <= t <= T.
Vec forward_noise(const Vec& x0, int t, const Vec& noise, const NoiseSchedule& sched);

// eps_theta(x_t, t, y). Conditions are offset-sum embeddings; the zero
// vector is the unconditional (null) condition.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual int dim() const = 0;
  // Column j of the result is eps(x, t, conditions.col(j)).
  virtual Mat predict(const Vec& x, int t, const Mat& conditions) const = 0;

  Vec predict(const Vec& x, int t, const Vec& condition) const;
};

Vec time_embedding(int t, int dim);

struct DenoiserConfig {
  int dim = 16;
  int time_dim = 32;
  int hidden = 128;
  int hidden_layers = 2;
};

class DenoiserModel final : public NoisePredictor {
 public:
  DenoiserModel(DenoiserConfig config, NoiseSchedule schedule);

  void initialize(Rng& rng);

  int dim() const override { return config_.dim; }
  Mat predict(const Vec& x, int t, const Mat& conditions) const override;

  // Network input for a batch: column j = [x_j; emb(t_j); cond_j].
  Mat network_input(const Mat& x, std::span<const int> t, const Mat& conditions) const;

  const DenoiserConfig& config() const { return config_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  Mlp& network() { return net_; }
  const Mlp& network() const { return net_; }

 private:
  DenoiserConfig config_;
  NoiseSchedule schedule_;
  Mlp net_;
};

// Noised training inputs with everything random already drawn, so the loss
// is a deterministic function of the parameters.
struct NoisedBatch {
  Mat x_t;
  std::vector<int> t;
  Mat condition;
  Mat noise;
};

NoisedBatch make_noised_batch(const DenoiserModel& model, const WorldSpec& world,
                              std::span<const TrainingPair> pairs, double p_uncond, Rng& rng);

// Mean over batch and coordinates of (eps - eps_theta)^2. When grad is
// non-null it receives dL/dparams (overwritten).
double denoiser_loss(const DenoiserModel& model, const NoisedBatch& batch, std::vector<double>* grad);

struct DenoiserTrainConfig {
  int steps = 100000;
  int batch = 256;
  double lr = 1e-3;
  double lr_final = 5e-5;  // cosine decay target
  double p_uncond = 0.1;
  double max_grad_norm = 1.0;
};

class DenoiserTrainer {
 public:
  DenoiserTrainer(DenoiserModel& model, const WorldSpec& world, DenoiserTrainConfig config);

  // One Adam step on the batch; returns the pre-update loss. Throws
  // NonFiniteLoss if the loss is NaN or infinite.
  double train_step(std::span<const TrainingPair> pairs, Rng& rng);

  // Runs config.steps steps drawing fresh pairs from the world.
  void train(Rng& rng, const std::function<void(int, double)>& on_step = {});

 private:
  DenoiserModel& model_;
  const WorldSpec& world_;
  DenoiserTrainConfig config_;
  Adam adam_;
  int step_ = 0;
};

nlohmann::json denoiser_header(const DenoiserModel& model);
void save_denoiser(const std::filesystem::path& path, const DenoiserModel& model, nlohmann::json extra = {});
DenoiserModel load_denoiser(const std::filesystem::path& path);

// eps~ = eps(y) + w (eps(y) - eps(null)).
Vec cfg_noise(const NoisePredictor& model, const Vec& x_t, const Vec& condition, int t, double w);

// eps^ = cfg_noise(y_combined) + alpha (eps(y_new) - eps(y_previous)), with
// raw conditional branches inside the difference. Throws
// InconsistentConditionSets unless y_combined = y_previous U y_new.
Vec scd_noise(const NoisePredictor& model, const Vec& x_t, std::span<const SemanticUnit> y_combined,
              std::span<const SemanticUnit> y_new, std::span<const SemanticUnit> y_previous, int t,
              double w, double alpha);

struct SamplerState {
  Vec x;
  int step_index = 0;
  std::vector<int> received;  // unit ids, ascending
};

struct DdimUpdate {
  Vec x_next;
  Vec x0_hat;
};

// Deterministic DDIM move from from_t to to_t <= from_t; to_t = 0 yields
// the clean estimate. Throws StepOrderViolation if to_t > from_t.
DdimUpdate ddim_update(const Vec& x, const Vec& eps, const NoiseSchedule& sched, int from_t, int to_t);
SamplerState ddim_step(const SamplerState& state, const Vec& eps, const NoiseSchedule& sched,
                       int from_t, int to_t);

enum class GuidanceMode { kCfg, kScd };
std::string_view guidance_mode_name(GuidanceMode mode);

// Duration of the semantic-difference correction after an arrival.
enum class ScdDuration { kPerSegment, kFirstStepOnly };

struct GuidanceSettings {
  double w = 2.0;
  double alpha = 0.0;
  ScdDuration duration = ScdDuration::kFirstStepOnly;
};

struct TraceRow {
  int step = 0;
  std::vector<int> arrivals;
  GuidanceMode mode = GuidanceMode::kCfg;
  double score_of_x0hat = 0.0;
};

// Columns: step,arrivals,guidance_mode,score_of_x0hat. Arrivals are unit ids
// joined by ';'.
void write_trace_csv(std::ostream& out, std::span<const TraceRow> trace);

// Incremental segmented DDIM sampler. Units can only be delivered at segment
// boundaries; the first advance needs at least one received unit.
class SegmentedSampler {
 public:
  SegmentedSampler(const NoisePredictor& model, const NoiseSchedule& sched, const WorldSpec& world,
                   int M, int segment, GuidanceSettings guidance, std::uint64_t noise_seed,
                   std::vector<SemanticUnit> requested = {});

  void deliver(std::span<const int> unit_ids);
  void advance(int steps);
  void run_to_end() { advance(M_ - state_.step_index); }

  int step() const { return state_.step_index; }
  bool finished() const { return state_.step_index >= M_; }
  const Vec& x() const { return state_.x; }
  const SamplerState& state() const { return state_; }
  const std::vector<TraceRow>& trace() const { return trace_; }

 private:
  void step_once();

  const NoisePredictor& model_;
  const NoiseSchedule& sched_;
  const WorldSpec& world_;
  int M_;
  int segment_;
  GuidanceSettings guidance_;
  std::vector<SemanticUnit> requested_;
  std::vector<int> timesteps_;
  SamplerState state_;
  std::vector<int> pending_batch_;  // delivered at the current boundary
  int batch_step_ = -1;             // boundary of the active arrival batch
  std::vector<SemanticUnit> batch_new_;
  std::vector<SemanticUnit> batch_previous_;
  Vec combined_condition_;
  std::vector<TraceRow> trace_;
};

struct SamplingResult {
  Vec x0;
  std::vector<TraceRow> trace;
};

// Runs a whole schedule. Throws EmptySchedule if nothing ever arrives; the
// schedule must deliver at step 0 (denoising starts with the first arrival).
SamplingResult run_segmented_sampling(const NoisePredictor& model, const NoiseSchedule& sched,
                                      const WorldSpec& world, const ArrivalSchedule& schedule, int M,
                                      int segment, GuidanceSettings guidance, std::uint64_t noise_seed,
                                      std::vector<SemanticUnit> requested = {});

}  // namespace fastgsc
