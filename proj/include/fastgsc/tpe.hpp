#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "fastgsc/diffusion.hpp"
#include "fastgsc/mlp.hpp"
#include "fastgsc/semunits.hpp"
#include "fastgsc/timeline.hpp"
#include "fastgsc/toyworld.hpp"

namespace fastgsc {

// s_t = [E_t, c_t, d_t].
struct MdpState {
  Mat E;                        // K_max x N_e one-hot request
  std::vector<std::uint8_t> c;  // 1 = still required
  int d = 0;                    // first denoising step the next selection can guide
};

int state_feature_dim(int k_max, int n_e);
// E row-major, then c, then d / M.
Vec flatten_state(const MdpState& state, int M);

// a_t as K_max selection bits; index is their binary encoding (bit k = slot k).
struct JointAction {
  std::vector<std::uint8_t> bits;
  std::uint32_t index = 0;

  static JointAction from_index(std::uint32_t index, int k_max);
  static JointAction from_bits(std::vector<std::uint8_t> bits);
  int count() const;
};

using ActionMask = std::vector<std::uint8_t>;  // one entry per joint action

// mask[a] = 1 iff a selects no slot with c[k] = 0; the empty action is also
// invalid while d = 0. Throws NoValidAction if nothing is left.
ActionMask action_mask(const MdpState& state);
ActionMask full_action_mask(int k_max);

// Softmax over unmasked logits; masked entries are exactly 0. Throws AllMasked.
Vec masked_policy_distribution(const Vec& logits, const ActionMask& mask);
double masked_entropy(const Vec& probs, const ActionMask& mask);
int sample_action(const Vec& probs, Rng& rng);

struct EnvConfig {
  LatencyConfig latency;
  GuidanceSettings guidance{2.0, 0.0, ScdDuration::kFirstStepOnly};
  // false: selections of empty or already sent slots are accepted, charged
  // extraction latency and deliver nothing.
  bool enforce_mask = true;
  double latency_weight = 1.0;  // reward = -latency_weight * latency (+ score)
};

struct StepResult {
  MdpState state;
  double reward = 0.0;
  bool done = false;
};

// One episode of extraction/transmission scheduling against a live segmented
// sampler. Phase 0 (d = 0) extracts the units that start denoising; phase t
// extracts while segment t runs and its units arrive at step t*segment.
// Units that would arrive at step M are dropped without a latency charge.
class SchedulingEnv {
 public:
  SchedulingEnv(const WorldSpec& world, const NoisePredictor& model, const NoiseSchedule& sched,
                EnvConfig config);

  const MdpState& reset(const TaskRequest& request, std::uint64_t noise_seed);
  StepResult step(const JointAction& action);

  const MdpState& state() const { return state_; }
  bool done() const { return done_; }
  int phase() const { return phase_; }
  const EnvConfig& config() const { return config_; }
  const TaskRequest& request() const { return *request_; }
  const TransmissionState& transmission() const { return *transmission_; }

  double score() const { return score_; }
  double residual_latency() const { return residual_; }
  const Vec& final_sample() const { return sample_; }
  // Phase in which each slot was extracted, -1 if never.
  const std::vector<int>& extraction_phase() const { return extraction_phase_; }
  // Unit ids newly extracted in each decision, including ones that arrive too
  // late to be used.
  const std::vector<std::vector<int>>& phase_units() const { return phase_units_; }
  const std::vector<TraceRow>& sampler_trace() const { return sampler_->trace(); }

 private:
  void finish();

  const WorldSpec& world_;
  const NoisePredictor& model_;
  const NoiseSchedule& sched_;
  EnvConfig config_;
  std::optional<TaskRequest> request_;
  std::optional<TransmissionState> transmission_;
  std::unique_ptr<SegmentedSampler> sampler_;
  MdpState state_;
  int phase_ = 0;
  bool done_ = true;
  double score_ = 0.0;
  double residual_ = 0.0;
  Vec sample_;
  std::vector<int> extraction_phase_;
  std::vector<std::vector<int>> phase_units_;
};

struct PhaseRecord {
  Vec features;
  ActionMask mask;
  std::uint32_t action = 0;
  double log_prob = 0.0;
  double reward = 0.0;
  double value = 0.0;
};

struct EpisodeTrace {
  std::vector<PhaseRecord> phases;
  double score = 0.0;             // r_p of the final sample
  double residual_latency = 0.0;  // latency beyond M * tau_m
  std::vector<Category> slot_category;
  std::vector<int> extraction_phase;  // per occupied slot, -1 = discarded
  std::vector<std::uint8_t> delivered;  // per occupied slot, arrived before step M

  int length() const { return static_cast<int>(phases.size()); }
  std::vector<double> rewards() const;
  std::vector<double> values() const;
};

double discounted_return(std::span<const double> rewards, double gamma);
double discounted_return(const EpisodeTrace& trace, double gamma);
std::vector<double> discounted_returns_to_go(std::span<const double> rewards, double gamma);

// Backward recursion A_t = delta_t + gamma*lambda*A_{t+1} with V(s_L) = 0.
std::vector<double> gae_advantages(std::span<const double> rewards, std::span<const double> values,
                                   double gamma, double lambda);
std::vector<double> gae_advantages(const EpisodeTrace& trace, double gamma, double lambda);

struct ActionChoice {
  std::uint32_t action = 0;
  double log_prob = 0.0;
  double value = 0.0;
  ActionMask mask;
};

class Policy {
 public:
  virtual ~Policy() = default;
  virtual ActionChoice choose(const MdpState& state, int M, Rng& rng) const = 0;
};

// Uniform over valid actions, or over all 2^K_max actions.
class RandomPolicy final : public Policy {
 public:
  explicit RandomPolicy(bool respect_mask = true) : respect_mask_(respect_mask) {}
  ActionChoice choose(const MdpState& state, int M, Rng& rng) const override;

 private:
  bool respect_mask_;
};

// Everything still pending, immediately: the conventional pipeline.
class AllAtOncePolicy final : public Policy {
 public:
  ActionChoice choose(const MdpState& state, int M, Rng& rng) const override;
};

struct PolicyConfig {
  int hidden = 64;
  int hidden_layers = 2;
  double output_scale = 0.01;  // near-uniform initial policy
};

// pi_phi, the frozen pi_phi' used for the ratio, and V_phi.
class PolicyCritic {
 public:
  PolicyCritic(int k_max, int n_e, PolicyConfig config = {});

  void initialize(Rng& rng);
  void snapshot() { old_policy = policy; }

  int k_max() const { return k_max_; }
  int n_e() const { return n_e_; }
  int num_actions() const { return 1 << k_max_; }
  const PolicyConfig& config() const { return config_; }

  Mlp policy;
  Mlp old_policy;
  Mlp critic;

 private:
  int k_max_;
  int n_e_;
  PolicyConfig config_;
};

// Samples from the current policy (or takes the argmax when greedy). Rollouts
// happen right after snapshot(), so this is also pi_phi'.
class LearnedPolicy final : public Policy {
 public:
  LearnedPolicy(const PolicyCritic& pc, bool masked, bool greedy = false)
      : pc_(pc), masked_(masked), greedy_(greedy) {}
  ActionChoice choose(const MdpState& state, int M, Rng& rng) const override;

 private:
  const PolicyCritic& pc_;
  bool masked_;
  bool greedy_;
};

void save_policy(const std::filesystem::path& path, const PolicyCritic& pc, nlohmann::json extra = {});
PolicyCritic load_policy(const std::filesystem::path& path, nlohmann::json* header = nullptr);

EpisodeTrace run_episode(SchedulingEnv& env, const Policy& policy, const TaskRequest& request,
                         std::uint64_t noise_seed, Rng& action_rng);

struct PpoConfig {
  double eta = 0.2;     // clip range
  double xi = 0.01;     // entropy coefficient
  double gamma = 0.99;
  double lambda = 0.95;
  double lr = 0.009;
  int epochs = 4;
  int minibatch = 64;
  bool normalize_advantages = true;
  double max_grad_norm = 0.5;
};

struct PpoSample {
  Vec features;
  ActionMask mask;
  std::uint32_t action = 0;
  double old_log_prob = 0.0;
  double advantage = 0.0;
  double target_return = 0.0;
};

std::vector<PpoSample> build_ppo_samples(std::span<const EpisodeTrace> traces, const PpoConfig& cfg);

struct PpoDiagnostics {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
};

// -(mean clipped surrogate + xi * mean entropy); grad (if non-null) is
// overwritten with d loss / d policy params.
double ppo_policy_loss(const Mlp& policy, std::span<const PpoSample> samples, double eta, double xi,
                       std::vector<double>* grad, PpoDiagnostics* diag = nullptr);
// mean (V(s) - R)^2.
double critic_loss(const Mlp& critic, std::span<const PpoSample> samples, std::vector<double>* grad);

class PpoLearner {
 public:
  PpoLearner(PolicyCritic& pc, PpoConfig config);

  // Consumes traces collected with the current snapshot, then re-snapshots.
  PpoDiagnostics update(std::span<const EpisodeTrace> traces, Rng& rng);

  const PpoConfig& config() const { return config_; }

 private:
  PolicyCritic& pc_;
  PpoConfig config_;
  Adam policy_adam_;
  Adam critic_adam_;
};

struct PolicyTrainConfig {
  int iterations = 150;
  int episodes_per_batch = 32;
  int min_units = 4;
  int max_units = 8;
  bool masked = true;
  std::uint64_t seed = 1;
  int threads = 1;
};

struct CurvePoint {
  int iteration = 0;
  double mean_return = 0.0;
  double mean_score = 0.0;
  double mean_residual = 0.0;
  double entropy = 0.0;
};

// Rollouts of one batch; episode i of iteration `iteration` owns streams
// derived from (seed, iteration, i), so results do not depend on `threads`.
std::vector<EpisodeTrace> collect_episodes(const WorldSpec& world, const NoisePredictor& model,
                                           const NoiseSchedule& sched, const EnvConfig& env_cfg,
                                           const Policy& policy, int count, int min_units, int max_units,
                                           std::uint64_t seed, std::uint64_t iteration, int threads);

std::vector<CurvePoint> train_policy(PolicyCritic& pc, const WorldSpec& world, const NoisePredictor& model,
                                     const NoiseSchedule& sched, EnvConfig env_cfg, const PpoConfig& ppo,
                                     const PolicyTrainConfig& train,
                                     const std::function<void(const CurvePoint&)>& on_iteration = {});

// Random-policy learning curve on the same protocol (no updates).
std::vector<CurvePoint> random_policy_curve(const WorldSpec& world, const NoisePredictor& model,
                                            const NoiseSchedule& sched, const EnvConfig& env_cfg,
                                            const PolicyTrainConfig& train, double gamma);

void write_curve_csv(std::ostream& out, std::span<const CurvePoint> curve);

// Per-category transmission statistics over evaluation episodes.
struct EvaluationSummary {
  int episodes = 0;
  double mean_score = 0.0;
  double mean_residual = 0.0;
  double discard_probability = 0.0;  // episodes that discard >= 1 unit
  // [category][round] counts of extracted units.
  std::array<std::vector<int>, kNumCategories> category_round;
  std::array<int, kNumCategories> discarded{};
  std::array<int, kNumCategories> requested{};
  std::vector<int> units_per_round;
  std::array<double, kNumCategories> mean_round{};  // NaN if never extracted
};

EvaluationSummary summarize_episodes(std::span<const EpisodeTrace> traces, int num_rounds);
nlohmann::json to_json(const EvaluationSummary& summary);

}  // namespace fastgsc
