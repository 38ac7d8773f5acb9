#include "fastgsc/tpe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

#include "fastgsc/checkpoint.hpp"
#include "fastgsc/error.hpp"

namespace fastgsc {

int state_feature_dim(int k_max, int n_e) { return k_max * n_e + k_max + 1; }

Vec flatten_state(const MdpState& state, int M) {
  const int k = static_cast<int>(state.E.rows());
  const int n_e = static_cast<int>(state.E.cols());
  Vec f(state_feature_dim(k, n_e));
  int i = 0;
  for (int r = 0; r < k; ++r)
    for (int c = 0; c < n_e; ++c) f[i++] = state.E(r, c);
  for (int r = 0; r < k; ++r) f[i++] = state.c[static_cast<std::size_t>(r)];
  f[i] = static_cast<double>(state.d) / M;
  return f;
}

JointAction JointAction::from_index(std::uint32_t index, int k_max) {
  if (k_max < 1 || k_max > 16 || index >= (1u << k_max)) {
    throw Error(ErrorCode::kInvalidAction, "action index out of range");
  }
  JointAction a;
  a.index = index;
  a.bits.resize(static_cast<std::size_t>(k_max));
  for (int k = 0; k < k_max; ++k) a.bits[static_cast<std::size_t>(k)] = (index >> k) & 1u;
  return a;
}

JointAction JointAction::from_bits(std::vector<std::uint8_t> bits) {
  JointAction a;
  for (std::size_t k = 0; k < bits.size(); ++k) {
    if (bits[k] > 1) throw Error(ErrorCode::kInvalidAction, "action bits must be 0 or 1");
    if (bits[k]) a.index |= 1u << k;
  }
  a.bits = std::move(bits);
  return a;
}

int JointAction::count() const { return static_cast<int>(std::count(bits.begin(), bits.end(), 1)); }

ActionMask action_mask(const MdpState& state) {
  const int k = static_cast<int>(state.c.size());
  std::uint32_t pending = 0;
  for (int i = 0; i < k; ++i)
    if (state.c[static_cast<std::size_t>(i)]) pending |= 1u << i;
  if (pending == 0 && state.d == 0) throw Error(ErrorCode::kNoValidAction, "nothing to extract at phase 0");
  ActionMask mask(std::size_t{1} << k, 0);
  for (std::uint32_t a = 0; a < mask.size(); ++a) mask[a] = (a & ~pending) == 0;
  if (state.d == 0) mask[0] = 0;
  return mask;
}

ActionMask full_action_mask(int k_max) { return ActionMask(std::size_t{1} << k_max, 1); }

Vec masked_policy_distribution(const Vec& logits, const ActionMask& mask) {
  if (static_cast<std::size_t>(logits.size()) != mask.size()) {
    throw Error(ErrorCode::kConfigInvalid, "logits and mask sizes differ");
  }
  double max_logit = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < logits.size(); ++i)
    if (mask[static_cast<std::size_t>(i)]) max_logit = std::max(max_logit, logits[i]);
  if (!std::isfinite(max_logit)) throw Error(ErrorCode::kAllMasked, "every action is masked");
  Vec p = Vec::Zero(logits.size());
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    p[i] = std::exp(logits[i] - max_logit);
    total += p[i];
  }
  return p / total;
}

double masked_entropy(const Vec& probs, const ActionMask& mask) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i)
    if (mask[static_cast<std::size_t>(i)] && probs[i] > 0.0) s -= probs[i] * std::log(probs[i]);
  return s;
}

int sample_action(const Vec& probs, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  int last = -1;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    acc += probs[i];
    last = static_cast<int>(i);
    if (u < acc) return last;
  }
  if (last < 0) throw Error(ErrorCode::kAllMasked, "no action has positive probability");
  return last;  // rounding left u beyond the accumulated mass
}

// --- environment -----------------------------------------------------------

SchedulingEnv::SchedulingEnv(const WorldSpec& world, const NoisePredictor& model, const NoiseSchedule& sched,
                             EnvConfig config)
    : world_(world), model_(model), sched_(sched), config_(config) {
  config_.latency.validate();
}

const MdpState& SchedulingEnv::reset(const TaskRequest& request, std::uint64_t noise_seed) {
  if (request.k_max() != world_.table.k_max || request.n_e() != world_.table.n_e) {
    throw Error(ErrorCode::kConfigInvalid, "request shape does not match the world");
  }
  request_.emplace(request);
  transmission_.emplace(*request_);
  sampler_ = std::make_unique<SegmentedSampler>(model_, sched_, world_, config_.latency.M, config_.latency.segment,
                                                config_.guidance, noise_seed, request_->units());
  state_.E = encode_request(*request_);
  state_.c = transmission_->pending();
  state_.d = 0;
  phase_ = 0;
  done_ = false;
  score_ = 0.0;
  residual_ = 0.0;
  sample_ = Vec::Zero(world_.dim());
  extraction_phase_.assign(static_cast<std::size_t>(request_->k_max()), -1);
  phase_units_.clear();
  return state_;
}

StepResult SchedulingEnv::step(const JointAction& action) {
  if (done_) throw Error(ErrorCode::kConfigInvalid, "episode is over; call reset");
  const int k_max = request_->k_max();
  if (static_cast<int>(action.bits.size()) != k_max) throw Error(ErrorCode::kInvalidAction, "wrong action width");
  if (config_.enforce_mask && !action_mask(state_)[action.index]) {
    throw Error(ErrorCode::kInvalidAction, "action selects a unit that is not pending");
  }
  const LatencyConfig& lc = config_.latency;
  const int t = state_.d / lc.segment;  // timeline phase; stays 0 until denoising starts
  const int arrival = phase_arrival_step(t, lc);

  std::vector<int> extracted, delivered;
  for (int k = 0; k < k_max; ++k) {
    if (!action.bits[static_cast<std::size_t>(k)] || !transmission_->is_pending(k)) continue;
    transmission_->mark_sent(k, std::min(arrival, lc.M), lc.M);
    extraction_phase_[static_cast<std::size_t>(k)] = t;
    extracted.push_back(request_->slot(k).id);
    if (arrival < lc.M) delivered.push_back(request_->slot(k).id);
  }
  const double latency = phase_latency(t, action.count(), lc);
  residual_ += latency;
  phase_units_.push_back(std::move(extracted));

  StepResult out;
  out.reward = -config_.latency_weight * latency;
  ++phase_;

  const bool started = state_.d > 0 || !delivered.empty();
  if (!delivered.empty()) sampler_->deliver(delivered);
  if (started) {
    sampler_->advance(lc.segment);
    state_.d += lc.segment;
  }
  state_.c = transmission_->pending();

  const bool out_of_phases = phase_ >= lc.num_phases();
  if (state_.d > lc.M || out_of_phases || (started && !transmission_->any_pending())) {
    if (started) {
      finish();
      out.reward += score_;
    }
    done_ = true;
  }
  out.state = state_;
  out.done = done_;
  return out;
}

void SchedulingEnv::finish() {
  sampler_->run_to_end();
  sample_ = sampler_->x();
  score_ = clip_analogue_score(sample_, request_->units());
}

// --- traces and returns ----------------------------------------------------

std::vector<double> EpisodeTrace::rewards() const {
  std::vector<double> r;
  r.reserve(phases.size());
  for (const auto& p : phases) r.push_back(p.reward);
  return r;
}

std::vector<double> EpisodeTrace::values() const {
  std::vector<double> v;
  v.reserve(phases.size());
  for (const auto& p : phases) v.push_back(p.value);
  return v;
}

double discounted_return(std::span<const double> rewards, double gamma) {
  double g = 0.0, discount = 1.0;
  for (double r : rewards) {
    g += discount * r;
    discount *= gamma;
  }
  return g;
}

double discounted_return(const EpisodeTrace& trace, double gamma) {
  const auto r = trace.rewards();
  return discounted_return(r, gamma);
}

std::vector<double> discounted_returns_to_go(std::span<const double> rewards, double gamma) {
  std::vector<double> g(rewards.size());
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc = rewards[i] + gamma * acc;
    g[i] = acc;
  }
  return g;
}

std::vector<double> gae_advantages(std::span<const double> rewards, std::span<const double> values, double gamma,
                                   double lambda) {
  if (rewards.size() != values.size()) throw Error(ErrorCode::kConfigInvalid, "rewards and values differ in length");
  std::vector<double> adv(rewards.size());
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    const double next_v = i + 1 < values.size() ? values[i + 1] : 0.0;
    const double delta = rewards[i] + gamma * next_v - values[i];
    acc = delta + gamma * lambda * acc;
    adv[i] = acc;
  }
  return adv;
}

std::vector<double> gae_advantages(const EpisodeTrace& trace, double gamma, double lambda) {
  const auto r = trace.rewards();
  const auto v = trace.values();
  return gae_advantages(r, v, gamma, lambda);
}

// --- policies ----------------------------------------------------------------

namespace {

ActionMask mask_for(const MdpState& state, bool masked) {
  return masked ? action_mask(state) : full_action_mask(static_cast<int>(state.c.size()));
}

}  // namespace

ActionChoice RandomPolicy::choose(const MdpState& state, int, Rng& rng) const {
  ActionChoice choice;
  choice.mask = mask_for(state, respect_mask_);
  const int valid = static_cast<int>(std::count(choice.mask.begin(), choice.mask.end(), 1));
  int pick = std::uniform_int_distribution<int>(0, valid - 1)(rng);
  for (std::uint32_t a = 0; a < choice.mask.size(); ++a) {
    if (!choice.mask[a]) continue;
    if (pick-- == 0) {
      choice.action = a;
      break;
    }
  }
  choice.log_prob = -std::log(static_cast<double>(valid));
  return choice;
}

ActionChoice AllAtOncePolicy::choose(const MdpState& state, int, Rng&) const {
  ActionChoice choice;
  choice.mask = action_mask(state);
  choice.action = JointAction::from_bits(state.c).index;
  return choice;
}

PolicyCritic::PolicyCritic(int k_max, int n_e, PolicyConfig config) : k_max_(k_max), n_e_(n_e), config_(config) {
  if (k_max < 1 || k_max > 12) throw Error(ErrorCode::kConfigInvalid, "k_max must be in [1, 12]");
  if (config.hidden < 1 || config.hidden_layers < 1) throw Error(ErrorCode::kConfigInvalid, "bad policy shape");
  const int in = state_feature_dim(k_max, n_e);
  std::vector<int> p{in}, v{in};
  for (int i = 0; i < config.hidden_layers; ++i) {
    p.push_back(config.hidden);
    v.push_back(config.hidden);
  }
  p.push_back(1 << k_max);
  v.push_back(1);
  policy = Mlp(p, Activation::kTanh);
  critic = Mlp(v, Activation::kTanh);
  old_policy = policy;
}

void PolicyCritic::initialize(Rng& rng) {
  policy.initialize(rng, config_.output_scale);
  critic.initialize(rng, 1.0);
  snapshot();
}

ActionChoice LearnedPolicy::choose(const MdpState& state, int M, Rng& rng) const {
  ActionChoice choice;
  choice.mask = mask_for(state, masked_);
  const Vec f = flatten_state(state, M);
  const Vec logits = pc_.policy.forward(f).col(0);
  const Vec p = masked_policy_distribution(logits, choice.mask);
  if (greedy_) {
    Eigen::Index best = 0;
    p.maxCoeff(&best);
    choice.action = static_cast<std::uint32_t>(best);
  } else {
    choice.action = static_cast<std::uint32_t>(sample_action(p, rng));
  }
  choice.log_prob = std::log(p[choice.action]);
  choice.value = pc_.critic.forward(f)(0, 0);
  return choice;
}

void save_policy(const std::filesystem::path& path, const PolicyCritic& pc, nlohmann::json extra) {
  nlohmann::json h = extra.is_object() ? std::move(extra) : nlohmann::json::object();
  h["kind"] = "policy";
  h["k_max"] = pc.k_max();
  h["n_e"] = pc.n_e();
  h["hidden"] = pc.config().hidden;
  h["hidden_layers"] = pc.config().hidden_layers;
  h["output_scale"] = pc.config().output_scale;
  h["policy_params"] = pc.policy.num_params();
  h["critic_params"] = pc.critic.num_params();
  std::vector<double> flat(pc.policy.params());
  flat.insert(flat.end(), pc.critic.params().begin(), pc.critic.params().end());
  write_checkpoint(path, h, flat);
}

PolicyCritic load_policy(const std::filesystem::path& path, nlohmann::json* header) {
  Checkpoint ck = read_checkpoint(path);
  try {
    const auto& h = ck.header;
    if (h.at("kind") != "policy") throw Error(ErrorCode::kMalformedInput, "checkpoint is not a policy");
    PolicyConfig cfg;
    cfg.hidden = h.at("hidden").get<int>();
    cfg.hidden_layers = h.at("hidden_layers").get<int>();
    cfg.output_scale = h.at("output_scale").get<double>();
    PolicyCritic pc(h.at("k_max").get<int>(), h.at("n_e").get<int>(), cfg);
    const std::size_t np = pc.policy.num_params(), nc = pc.critic.num_params();
    if (ck.params.size() != np + nc) throw Error(ErrorCode::kMalformedInput, "policy checkpoint size mismatch");
    std::copy(ck.params.begin(), ck.params.begin() + static_cast<std::ptrdiff_t>(np), pc.policy.params().begin());
    std::copy(ck.params.begin() + static_cast<std::ptrdiff_t>(np), ck.params.end(), pc.critic.params().begin());
    pc.snapshot();
    if (header) *header = h;
    return pc;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kMalformedInput, std::string("policy header: ") + e.what());
  }
}

EpisodeTrace run_episode(SchedulingEnv& env, const Policy& policy, const TaskRequest& request,
                         std::uint64_t noise_seed, Rng& action_rng) {
  EpisodeTrace trace;
  const int M = env.config().latency.M;
  env.reset(request, noise_seed);
  while (!env.done()) {
    const MdpState& s = env.state();
    ActionChoice choice = policy.choose(s, M, action_rng);
    PhaseRecord rec;
    rec.features = flatten_state(s, M);
    rec.mask = std::move(choice.mask);
    rec.action = choice.action;
    rec.log_prob = choice.log_prob;
    rec.value = choice.value;
    rec.reward = env.step(JointAction::from_index(choice.action, request.k_max())).reward;
    trace.phases.push_back(std::move(rec));
  }
  trace.score = env.score();
  trace.residual_latency = env.residual_latency();
  const auto& sent = env.transmission().sent_at_step();
  for (int k = 0; k < request.size(); ++k) {
    trace.slot_category.push_back(request.slot(k).category);
    trace.extraction_phase.push_back(env.extraction_phase()[static_cast<std::size_t>(k)]);
    const auto& at = sent[static_cast<std::size_t>(k)];
    trace.delivered.push_back(at.has_value() && *at < M);
  }
  return trace;
}

// --- PPO ---------------------------------------------------------------------

std::vector<PpoSample> build_ppo_samples(std::span<const EpisodeTrace> traces, const PpoConfig& cfg) {
  std::vector<PpoSample> out;
  for (const auto& tr : traces) {
    const auto r = tr.rewards();
    const auto adv = gae_advantages(tr, cfg.gamma, cfg.lambda);
    const auto ret = discounted_returns_to_go(r, cfg.gamma);
    for (std::size_t i = 0; i < tr.phases.size(); ++i) {
      const auto& p = tr.phases[i];
      out.push_back({p.features, p.mask, p.action, p.log_prob, adv[i], ret[i]});
    }
  }
  if (cfg.normalize_advantages && out.size() > 1) {
    double mean = 0.0;
    for (const auto& s : out) mean += s.advantage;
    mean /= static_cast<double>(out.size());
    double var = 0.0;
    for (const auto& s : out) var += (s.advantage - mean) * (s.advantage - mean);
    const double sd = std::sqrt(var / static_cast<double>(out.size()));
    for (auto& s : out) s.advantage = (s.advantage - mean) / (sd + 1e-8);
  }
  return out;
}

namespace {

Eigen::MatrixXd stack_features(std::span<const PpoSample> samples) {
  Eigen::MatrixXd X(samples.front().features.size(), static_cast<Eigen::Index>(samples.size()));
  for (std::size_t i = 0; i < samples.size(); ++i) X.col(static_cast<Eigen::Index>(i)) = samples[i].features;
  return X;
}

}  // namespace

double ppo_policy_loss(const Mlp& policy, std::span<const PpoSample> samples, double eta, double xi,
                       std::vector<double>* grad, PpoDiagnostics* diag) {
  if (samples.empty()) throw Error(ErrorCode::kConfigInvalid, "no PPO samples");
  const double n = static_cast<double>(samples.size());
  Mlp::Cache cache;
  const Eigen::MatrixXd logits = policy.forward(stack_features(samples), cache);
  Eigen::MatrixXd g_logits = Eigen::MatrixXd::Zero(logits.rows(), logits.cols());

  double surrogate = 0.0, entropy = 0.0, kl = 0.0;
  int clipped = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const auto col = static_cast<Eigen::Index>(i);
    const Vec p = masked_policy_distribution(logits.col(col), s.mask);
    const double logp = std::log(p[s.action]);
    const double ratio = std::exp(logp - s.old_log_prob);
    const double clipped_ratio = std::clamp(ratio, 1.0 - eta, 1.0 + eta);
    const double u = ratio * s.advantage, c = clipped_ratio * s.advantage;
    surrogate += std::min(u, c);
    if (clipped_ratio != ratio) ++clipped;
    kl += s.old_log_prob - logp;
    const double S = masked_entropy(p, s.mask);
    entropy += S;
    // d/dz_j of min(u, c): ratio*A*(1[j=a] - p_j) while the unclipped term is
    // active, 0 otherwise. d S / d z_j = -p_j (log p_j + S).
    const double g_logp = u <= c ? ratio * s.advantage : 0.0;
    for (Eigen::Index j = 0; j < p.size(); ++j) {
      if (!s.mask[static_cast<std::size_t>(j)]) continue;
      const double pj = p[j];
      const double d_logp = (j == static_cast<Eigen::Index>(s.action) ? 1.0 : 0.0) - pj;
      const double d_ent = pj > 0.0 ? -pj * (std::log(pj) + S) : 0.0;
      g_logits(j, col) = -(g_logp * d_logp + xi * d_ent) / n;
    }
  }
  const double loss = -(surrogate + xi * entropy) / n;
  if (!std::isfinite(loss)) throw Error(ErrorCode::kNonFiniteLoss, "policy loss is not finite");
  if (grad) {
    grad->assign(policy.num_params(), 0.0);
    policy.backward(cache, g_logits, *grad);
  }
  if (diag) {
    diag->policy_loss = loss;
    diag->entropy = entropy / n;
    diag->approx_kl = kl / n;
    diag->clip_fraction = clipped / n;
  }
  return loss;
}

double critic_loss(const Mlp& critic, std::span<const PpoSample> samples, std::vector<double>* grad) {
  if (samples.empty()) throw Error(ErrorCode::kConfigInvalid, "no PPO samples");
  const double n = static_cast<double>(samples.size());
  Mlp::Cache cache;
  const Eigen::MatrixXd v = critic.forward(stack_features(samples), cache);
  Eigen::MatrixXd g(1, v.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < v.cols(); ++i) {
    const double diff = v(0, i) - samples[static_cast<std::size_t>(i)].target_return;
    loss += diff * diff;
    g(0, i) = 2.0 * diff / n;
  }
  loss /= n;
  if (!std::isfinite(loss)) throw Error(ErrorCode::kNonFiniteLoss, "critic loss is not finite");
  if (grad) {
    grad->assign(critic.num_params(), 0.0);
    critic.backward(cache, g, *grad);
  }
  return loss;
}

PpoLearner::PpoLearner(PolicyCritic& pc, PpoConfig config)
    : pc_(pc),
      config_(config),
      policy_adam_(pc.policy.num_params(), config.lr),
      critic_adam_(pc.critic.num_params(), config.lr) {}

PpoDiagnostics PpoLearner::update(std::span<const EpisodeTrace> traces, Rng& rng) {
  if (traces.empty()) throw Error(ErrorCode::kConfigInvalid, "no traces to learn from");
  const std::vector<PpoSample> samples = build_ppo_samples(traces, config_);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t mb = static_cast<std::size_t>(std::max(1, config_.minibatch));

  PpoDiagnostics total;
  int batches = 0;
  std::vector<double> grad;
  std::vector<PpoSample> batch;
  for (int epoch = 0; epoch < config_.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += mb) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + mb); ++i) batch.push_back(samples[order[i]]);
      PpoDiagnostics d;
      ppo_policy_loss(pc_.policy, batch, config_.eta, config_.xi, &grad, &d);
      if (config_.max_grad_norm > 0) clip_grad_norm(grad, config_.max_grad_norm);
      policy_adam_.step(pc_.policy.params(), grad);
      d.value_loss = critic_loss(pc_.critic, batch, &grad);
      if (config_.max_grad_norm > 0) clip_grad_norm(grad, config_.max_grad_norm);
      critic_adam_.step(pc_.critic.params(), grad);

      total.policy_loss += d.policy_loss;
      total.value_loss += d.value_loss;
      total.entropy += d.entropy;
      total.approx_kl += d.approx_kl;
      total.clip_fraction += d.clip_fraction;
      ++batches;
    }
  }
  pc_.snapshot();
  total.policy_loss /= batches;
  total.value_loss /= batches;
  total.entropy /= batches;
  total.approx_kl /= batches;
  total.clip_fraction /= batches;
  return total;
}

// --- training loop -----------------------------------------------------------

std::vector<EpisodeTrace> collect_episodes(const WorldSpec& world, const NoisePredictor& model,
                                           const NoiseSchedule& sched, const EnvConfig& env_cfg,
                                           const Policy& policy, int count, int min_units, int max_units,
                                           std::uint64_t seed, std::uint64_t iteration, int threads) {
  std::vector<EpisodeTrace> traces(static_cast<std::size_t>(count));
  auto work = [&](int begin, int stride) {
    SchedulingEnv env(world, model, sched, env_cfg);
    for (int i = begin; i < count; i += stride) {
      const std::uint64_t ep = derive_seed(seed, iteration, static_cast<std::uint64_t>(i));
      Rng request_rng(derive_seed(ep, 0)), action_rng(derive_seed(ep, 2));
      const TaskRequest req = sample_request(world, request_rng, min_units, max_units);
      traces[static_cast<std::size_t>(i)] = run_episode(env, policy, req, derive_seed(ep, 1), action_rng);
    }
  };
  threads = std::clamp(threads, 1, std::max(1, count));
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
  return traces;
}

namespace {

CurvePoint curve_point(int iteration, std::span<const EpisodeTrace> traces, double gamma, double entropy) {
  CurvePoint pt;
  pt.iteration = iteration;
  for (const auto& tr : traces) {
    pt.mean_return += discounted_return(tr, gamma);
    pt.mean_score += tr.score;
    pt.mean_residual += tr.residual_latency;
  }
  const double n = static_cast<double>(traces.size());
  pt.mean_return /= n;
  pt.mean_score /= n;
  pt.mean_residual /= n;
  pt.entropy = entropy;
  return pt;
}

double mean_rollout_entropy(const PolicyCritic& pc, std::span<const EpisodeTrace> traces) {
  double s = 0.0;
  int n = 0;
  for (const auto& tr : traces) {
    for (const auto& ph : tr.phases) {
      const Vec p = masked_policy_distribution(pc.old_policy.forward(ph.features).col(0), ph.mask);
      s += masked_entropy(p, ph.mask);
      ++n;
    }
  }
  return n ? s / n : 0.0;
}

}  // namespace

std::vector<CurvePoint> train_policy(PolicyCritic& pc, const WorldSpec& world, const NoisePredictor& model,
                                     const NoiseSchedule& sched, EnvConfig env_cfg, const PpoConfig& ppo,
                                     const PolicyTrainConfig& train,
                                     const std::function<void(const CurvePoint&)>& on_iteration) {
  env_cfg.enforce_mask = train.masked;
  PpoLearner learner(pc, ppo);
  Rng update_rng(derive_seed(train.seed, 0x7070));
  std::vector<CurvePoint> curve;
  pc.snapshot();
  for (int it = 0; it < train.iterations; ++it) {
    const LearnedPolicy actor(pc, train.masked);
    const auto traces = collect_episodes(world, model, sched, env_cfg, actor, train.episodes_per_batch,
                                         train.min_units, train.max_units, train.seed,
                                         static_cast<std::uint64_t>(it), train.threads);
    CurvePoint pt = curve_point(it, traces, ppo.gamma, mean_rollout_entropy(pc, traces));
    learner.update(traces, update_rng);
    curve.push_back(pt);
    if (on_iteration) on_iteration(pt);
  }
  return curve;
}

std::vector<CurvePoint> random_policy_curve(const WorldSpec& world, const NoisePredictor& model,
                                            const NoiseSchedule& sched, const EnvConfig& env_cfg,
                                            const PolicyTrainConfig& train, double gamma) {
  const RandomPolicy policy(true);
  std::vector<CurvePoint> curve;
  for (int it = 0; it < train.iterations; ++it) {
    const auto traces = collect_episodes(world, model, sched, env_cfg, policy, train.episodes_per_batch,
                                         train.min_units, train.max_units, train.seed,
                                         static_cast<std::uint64_t>(it), train.threads);
    double entropy = 0.0;
    int n = 0;
    for (const auto& tr : traces)
      for (const auto& ph : tr.phases) {
        entropy -= ph.log_prob;
        ++n;
      }
    curve.push_back(curve_point(it, traces, gamma, n ? entropy / n : 0.0));
  }
  return curve;
}

void write_curve_csv(std::ostream& out, std::span<const CurvePoint> curve) {
  out << "iteration,mean_return,mean_score,mean_residual_latency,entropy\n";
  out.precision(10);
  for (const auto& p : curve) {
    out << p.iteration << ',' << p.mean_return << ',' << p.mean_score << ',' << p.mean_residual << ','
        << p.entropy << '\n';
  }
}

// --- evaluation summary --------------------------------------------------------

EvaluationSummary summarize_episodes(std::span<const EpisodeTrace> traces, int num_rounds) {
  EvaluationSummary s;
  s.episodes = static_cast<int>(traces.size());
  for (auto& h : s.category_round) h.assign(static_cast<std::size_t>(num_rounds), 0);
  s.units_per_round.assign(static_cast<std::size_t>(num_rounds), 0);
  std::array<double, kNumCategories> round_sum{};
  std::array<int, kNumCategories> round_count{};
  int discarding = 0;
  for (const auto& tr : traces) {
    s.mean_score += tr.score;
    s.mean_residual += tr.residual_latency;
    bool any_discard = false;
    for (std::size_t k = 0; k < tr.slot_category.size(); ++k) {
      const auto cat = static_cast<std::size_t>(tr.slot_category[k]);
      ++s.requested[cat];
      if (!tr.delivered[k]) {
        ++s.discarded[cat];
        any_discard = true;
        continue;
      }
      const int round = tr.extraction_phase[k];
      if (round >= 0 && round < num_rounds) {
        ++s.category_round[cat][static_cast<std::size_t>(round)];
        ++s.units_per_round[static_cast<std::size_t>(round)];
      }
      round_sum[cat] += round;
      ++round_count[cat];
    }
    if (any_discard) ++discarding;
  }
  if (s.episodes > 0) {
    s.mean_score /= s.episodes;
    s.mean_residual /= s.episodes;
    s.discard_probability = static_cast<double>(discarding) / s.episodes;
  }
  for (std::size_t c = 0; c < kNumCategories; ++c) {
    s.mean_round[c] = round_count[c] ? round_sum[c] / round_count[c] : std::numeric_limits<double>::quiet_NaN();
  }
  return s;
}

nlohmann::json to_json(const EvaluationSummary& s) {
  nlohmann::json j;
  j["episodes"] = s.episodes;
  j["mean_score"] = s.mean_score;
  j["mean_residual_latency"] = s.mean_residual;
  j["discard_probability"] = s.discard_probability;
  j["units_per_round"] = s.units_per_round;
  nlohmann::json cats = nlohmann::json::object();
  for (std::size_t c = 0; c < kNumCategories; ++c) {
    nlohmann::json e;
    e["rounds"] = s.category_round[c];
    e["requested"] = s.requested[c];
    e["discarded"] = s.discarded[c];
    e["mean_round"] = std::isfinite(s.mean_round[c]) ? nlohmann::json(s.mean_round[c]) : nlohmann::json(nullptr);
    cats[category_name(static_cast<Category>(c))] = e;
  }
  j["categories"] = cats;
  return j;
}

}  // namespace fastgsc
