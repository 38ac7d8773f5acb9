#include "fastgsc/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "fastgsc/checkpoint.hpp"
#include "fastgsc/error.hpp"

namespace fastgsc {

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
  if (T < 2 || !(beta_start > 0.0) || !(beta_end < 1.0) || beta_end < beta_start) {
    throw Error(ErrorCode::kConfigInvalid, "invalid linear beta schedule");
  }
  NoiseSchedule s;
  s.T_ = T;
  s.beta_start_ = beta_start;
  s.beta_end_ = beta_end;
  s.beta_.assign(static_cast<std::size_t>(T) + 1, 0.0);
  s.alpha_bar_.assign(static_cast<std::size_t>(T) + 1, 1.0);
  for (int t = 1; t <= T; ++t) {
    const double beta = beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) / (T - 1);
    s.beta_[static_cast<std::size_t>(t)] = beta;
    s.alpha_bar_[static_cast<std::size_t>(t)] = s.alpha_bar_[static_cast<std::size_t>(t) - 1] * (1.0 - beta);
  }
  return s;
}

std::vector<int> NoiseSchedule::sampling_timesteps(int M) const {
  if (M < 1 || M > T_) throw Error(ErrorCode::kConfigInvalid, "need 1 <= M <= T");
  std::vector<int> ts;
  ts.reserve(static_cast<std::size_t>(M));
  for (int i = 0; i < M; ++i) {
    ts.push_back(static_cast<int>(std::lround(static_cast<double>(M - i) * T_ / M)));
  }
  return ts;
}

nlohmann::json NoiseSchedule::to_json() const {
  return {{"type", "linear"}, {"T", T_}, {"beta_start", beta_start_}, {"beta_end", beta_end_}};
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
  return linear(j.at("T").get<int>(), j.at("beta_start").get<double>(), j.at("beta_end").get<double>());
}

Vec forward_noise(const Vec& x0, int t, const Vec& noise, const NoiseSchedule& sched) {
  if (t < 1 || t > sched.T()) throw Error(ErrorCode::kStepOutOfRange, "t must lie in [1, T]");
  const double ab = sched.alpha_bar(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * noise;
}

Vec NoisePredictor::predict(const Vec& x, int t, const Vec& condition) const {
  return predict(x, t, Mat(condition)).col(0);
}

Vec time_embedding(int t, int dim) {
  Vec emb(dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    emb[i] = std::sin(t * freq);
    emb[half + i] = std::cos(t * freq);
  }
  if (dim % 2 == 1) emb[dim - 1] = 0.0;
  return emb;
}

DenoiserModel::DenoiserModel(DenoiserConfig config, NoiseSchedule schedule)
    : config_(config), schedule_(std::move(schedule)) {
  if (config_.dim < 1 || config_.time_dim < 0 || config_.hidden < 1 || config_.hidden_layers < 1) {
    throw Error(ErrorCode::kConfigInvalid, "invalid denoiser architecture");
  }
  std::vector<int> sizes = {2 * config_.dim + config_.time_dim};
  for (int i = 0; i < config_.hidden_layers; ++i) sizes.push_back(config_.hidden);
  sizes.push_back(config_.dim);
  net_ = Mlp(sizes, Activation::kSilu);
}

void DenoiserModel::initialize(Rng& rng) { net_.initialize(rng); }

Mat DenoiserModel::network_input(const Mat& x, std::span<const int> t, const Mat& conditions) const {
  const int d = config_.dim;
  const int e = config_.time_dim;
  const auto n = conditions.cols();
  Mat input(2 * d + e, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    input.col(j).head(d) = x.cols() == 1 ? x.col(0) : x.col(j);
    const int tj = t.size() == 1 ? t[0] : t[static_cast<std::size_t>(j)];
    if (e > 0) input.col(j).segment(d, e) = time_embedding(tj, e);
    input.col(j).tail(d) = conditions.col(j);
  }
  return input;
}

Mat DenoiserModel::predict(const Vec& x, int t, const Mat& conditions) const {
  const int ts[1] = {t};
  return net_.forward(network_input(Mat(x), ts, conditions));
}

NoisedBatch make_noised_batch(const DenoiserModel& model, const WorldSpec& world,
                              std::span<const TrainingPair> pairs, double p_uncond, Rng& rng) {
  const int d = model.dim();
  const auto n = static_cast<Eigen::Index>(pairs.size());
  NoisedBatch b{Mat(d, n), std::vector<int>(pairs.size()), Mat::Zero(d, n), Mat(d, n)};
  std::uniform_int_distribution<int> pick_t(1, model.schedule().T());
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto& pair = pairs[static_cast<std::size_t>(j)];
    const int t = pick_t(rng);
    Vec noise = standard_normal(d, rng);
    if (uniform01(rng) >= p_uncond) {
      b.condition.col(j) = offset_sum(units_by_id(world, pair.prompt), d);
    }
    b.t[static_cast<std::size_t>(j)] = t;
    b.x_t.col(j) = forward_noise(pair.x0, t, noise, model.schedule());
    b.noise.col(j) = noise;
  }
  return b;
}

double denoiser_loss(const DenoiserModel& model, const NoisedBatch& batch, std::vector<double>* grad) {
  const Mat input = model.network_input(batch.x_t, batch.t, batch.condition);
  const double count = static_cast<double>(batch.noise.size());
  if (grad == nullptr) {
    const Mat diff = model.network().forward(input) - batch.noise;
    return diff.squaredNorm() / count;
  }
  Mlp::Cache cache;
  const Mat diff = model.network().forward(input, cache) - batch.noise;
  grad->assign(model.network().num_params(), 0.0);
  model.network().backward(cache, (2.0 / count) * diff, *grad);
  return diff.squaredNorm() / count;
}

DenoiserTrainer::DenoiserTrainer(DenoiserModel& model, const WorldSpec& world, DenoiserTrainConfig config)
    : model_(model), world_(world), config_(config), adam_(model.network().num_params(), config.lr) {
  if (world.dim() != model.dim()) throw Error(ErrorCode::kConfigInvalid, "world and model dimension differ");
}

double DenoiserTrainer::train_step(std::span<const TrainingPair> pairs, Rng& rng) {
  if (pairs.empty()) throw Error(ErrorCode::kConfigInvalid, "empty training batch");
  const NoisedBatch batch = make_noised_batch(model_, world_, pairs, config_.p_uncond, rng);
  std::vector<double> grad;
  const double loss = denoiser_loss(model_, batch, &grad);
  if (!std::isfinite(loss)) throw Error(ErrorCode::kNonFiniteLoss, "denoiser loss diverged");
  clip_grad_norm(grad, config_.max_grad_norm);
  if (config_.steps > 0) {
    const double progress = std::min(1.0, static_cast<double>(step_) / config_.steps);
    adam_.set_learning_rate(config_.lr_final + 0.5 * (config_.lr - config_.lr_final) *
                                                   (1.0 + std::cos(std::numbers::pi * progress)));
  }
  adam_.step(model_.network().params(), grad);
  ++step_;
  return loss;
}

void DenoiserTrainer::train(Rng& rng, const std::function<void(int, double)>& on_step) {
  std::vector<TrainingPair> pairs(static_cast<std::size_t>(config_.batch));
  for (int s = 0; s < config_.steps; ++s) {
    for (auto& p : pairs) p = sample_training_pair(world_, rng);
    const double loss = train_step(pairs, rng);
    if (on_step) on_step(s, loss);
  }
}

nlohmann::json denoiser_header(const DenoiserModel& model) {
  const auto& c = model.config();
  return {{"kind", "denoiser"},
          {"config", {{"dim", c.dim}, {"time_dim", c.time_dim}, {"hidden", c.hidden}, {"hidden_layers", c.hidden_layers}}},
          {"layer_sizes", model.network().layer_sizes()},
          {"schedule", model.schedule().to_json()}};
}

void save_denoiser(const std::filesystem::path& path, const DenoiserModel& model, nlohmann::json extra) {
  auto header = denoiser_header(model);
  if (extra.is_object()) header.update(extra);
  write_checkpoint(path, header, model.network().params());
}

DenoiserModel load_denoiser(const std::filesystem::path& path) {
  Checkpoint ck = read_checkpoint(path);
  try {
    if (ck.header.at("kind") != "denoiser") throw Error(ErrorCode::kMalformedInput, "not a denoiser checkpoint");
    const auto& jc = ck.header.at("config");
    DenoiserConfig cfg{jc.at("dim").get<int>(), jc.at("time_dim").get<int>(), jc.at("hidden").get<int>(),
                       jc.at("hidden_layers").get<int>()};
    DenoiserModel model(cfg, NoiseSchedule::from_json(ck.header.at("schedule")));
    if (model.network().num_params() != ck.params.size()) {
      throw Error(ErrorCode::kMalformedInput, "parameter count does not match architecture");
    }
    model.network().params() = std::move(ck.params);
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kMalformedInput, e.what());
  }
}

Vec cfg_noise(const NoisePredictor& model, const Vec& x_t, const Vec& condition, int t, double w) {
  Mat conds = Mat::Zero(model.dim(), 2);
  conds.col(0) = condition;
  const Mat eps = model.predict(x_t, t, conds);
  return eps.col(0) + w * (eps.col(0) - eps.col(1));
}

namespace {

std::set<int> id_set(std::span<const SemanticUnit> units) {
  std::set<int> ids;
  for (const auto& u : units) ids.insert(u.id);
  return ids;
}

}  // namespace

Vec scd_noise(const NoisePredictor& model, const Vec& x_t, std::span<const SemanticUnit> y_combined,
              std::span<const SemanticUnit> y_new, std::span<const SemanticUnit> y_previous, int t,
              double w, double alpha) {
  std::set<int> merged = id_set(y_previous);
  const std::set<int> added = id_set(y_new);
  merged.insert(added.begin(), added.end());
  if (merged != id_set(y_combined)) {
    throw Error(ErrorCode::kInconsistentConditionSets, "y_combined must equal y_previous U y_new");
  }
  const int d = model.dim();
  Vec eps = cfg_noise(model, x_t, offset_sum(y_combined, d), t, w);
  Mat branches(d, 2);
  branches.col(0) = offset_sum(y_new, d);
  branches.col(1) = offset_sum(y_previous, d);
  const Mat diff = model.predict(x_t, t, branches);
  eps += alpha * (diff.col(0) - diff.col(1));
  return eps;
}

DdimUpdate ddim_update(const Vec& x, const Vec& eps, const NoiseSchedule& sched, int from_t, int to_t) {
  if (from_t < 1 || from_t > sched.T() || to_t < 0) {
    throw Error(ErrorCode::kStepOutOfRange, "DDIM timesteps outside the schedule");
  }
  if (to_t > from_t) throw Error(ErrorCode::kStepOrderViolation, "DDIM must move toward t = 0");
  const double ab_from = sched.alpha_bar(from_t);
  const double ab_to = sched.alpha_bar(to_t);
  Vec x0_hat = (x - std::sqrt(1.0 - ab_from) * eps) / std::sqrt(ab_from);
  Vec x_next = std::sqrt(ab_to) * x0_hat + std::sqrt(1.0 - ab_to) * eps;
  return {std::move(x_next), std::move(x0_hat)};
}

SamplerState ddim_step(const SamplerState& state, const Vec& eps, const NoiseSchedule& sched, int from_t,
                       int to_t) {
  SamplerState next = state;
  next.x = ddim_update(state.x, eps, sched, from_t, to_t).x_next;
  ++next.step_index;
  return next;
}

std::string_view guidance_mode_name(GuidanceMode mode) {
  return mode == GuidanceMode::kScd ? "scd" : "cfg";
}

void write_trace_csv(std::ostream& out, std::span<const TraceRow> trace) {
  out << "step,arrivals,guidance_mode,score_of_x0hat\n";
  for (const auto& row : trace) {
    out << row.step << ',';
    for (std::size_t i = 0; i < row.arrivals.size(); ++i) out << (i ? ";" : "") << row.arrivals[i];
    out << ',' << guidance_mode_name(row.mode) << ',' << row.score_of_x0hat << '\n';
  }
}

SegmentedSampler::SegmentedSampler(const NoisePredictor& model, const NoiseSchedule& sched,
                                   const WorldSpec& world, int M, int segment, GuidanceSettings guidance,
                                   std::uint64_t noise_seed, std::vector<SemanticUnit> requested)
    : model_(model),
      sched_(sched),
      world_(world),
      M_(M),
      segment_(segment),
      guidance_(guidance),
      requested_(std::move(requested)),
      timesteps_(sched.sampling_timesteps(M)),
      combined_condition_(Vec::Zero(world.dim())) {
  if (segment < 1 || M % segment != 0) throw Error(ErrorCode::kConfigInvalid, "M must be a multiple of segment");
  if (model.dim() != world.dim()) throw Error(ErrorCode::kConfigInvalid, "model and world dimension differ");
  Rng rng(noise_seed);
  state_.x = standard_normal(world.dim(), rng);
}

void SegmentedSampler::deliver(std::span<const int> unit_ids) {
  if (unit_ids.empty()) return;
  if (finished()) throw Error(ErrorCode::kStepOutOfRange, "sampling already finished");
  if (state_.step_index % segment_ != 0) {
    throw Error(ErrorCode::kConfigInvalid, "units can only arrive at segment boundaries");
  }
  for (int id : unit_ids) {
    if (id < 0 || id >= static_cast<int>(world_.table.units.size())) {
      throw Error(ErrorCode::kConfigInvalid, "unknown unit id");
    }
    const bool seen = std::find(state_.received.begin(), state_.received.end(), id) != state_.received.end() ||
                      std::find(pending_batch_.begin(), pending_batch_.end(), id) != pending_batch_.end();
    if (seen) throw Error(ErrorCode::kConfigInvalid, "unit delivered twice");
    pending_batch_.push_back(id);
  }
}

void SegmentedSampler::advance(int steps) {
  for (int i = 0; i < steps && !finished(); ++i) step_once();
}

void SegmentedSampler::step_once() {
  const int m = state_.step_index;
  TraceRow row;
  row.step = m;
  if (!pending_batch_.empty()) {
    std::sort(pending_batch_.begin(), pending_batch_.end());
    batch_previous_ = units_by_id(world_, state_.received);
    batch_new_ = units_by_id(world_, pending_batch_);
    batch_step_ = m;
    row.arrivals = pending_batch_;
    state_.received.insert(state_.received.end(), pending_batch_.begin(), pending_batch_.end());
    std::sort(state_.received.begin(), state_.received.end());
    pending_batch_.clear();
    combined_condition_ = offset_sum(units_by_id(world_, state_.received), world_.dim());
  }
  if (state_.received.empty()) throw Error(ErrorCode::kEmptySchedule, "denoising cannot start without units");

  const bool in_window = batch_step_ >= 0 && (guidance_.duration == ScdDuration::kPerSegment
                                                  ? m < batch_step_ + segment_
                                                  : m == batch_step_);
  const bool use_scd = guidance_.alpha != 0.0 && in_window && !batch_previous_.empty();
  const int from_t = timesteps_[static_cast<std::size_t>(m)];
  const int to_t = m + 1 < M_ ? timesteps_[static_cast<std::size_t>(m) + 1] : 0;

  Vec eps;
  if (use_scd) {
    const auto combined = units_by_id(world_, state_.received);
    eps = scd_noise(model_, state_.x, combined, batch_new_, batch_previous_, from_t, guidance_.w, guidance_.alpha);
  } else {
    eps = cfg_noise(model_, state_.x, combined_condition_, from_t, guidance_.w);
  }
  DdimUpdate update = ddim_update(state_.x, eps, sched_, from_t, to_t);
  row.mode = use_scd ? GuidanceMode::kScd : GuidanceMode::kCfg;
  if (update.x0_hat.norm() >= 1e-12) {
    const auto target = requested_.empty() ? units_by_id(world_, state_.received) : requested_;
    row.score_of_x0hat = clip_analogue_score(update.x0_hat, target);
  }
  state_.x = std::move(update.x_next);
  ++state_.step_index;
  trace_.push_back(std::move(row));
}

SamplingResult run_segmented_sampling(const NoisePredictor& model, const NoiseSchedule& sched,
                                      const WorldSpec& world, const ArrivalSchedule& schedule, int M,
                                      int segment, GuidanceSettings guidance, std::uint64_t noise_seed,
                                      std::vector<SemanticUnit> requested) {
  if (schedule.empty()) throw Error(ErrorCode::kEmptySchedule, "no unit ever arrives");
  if (segment < 1 || M % segment != 0) throw Error(ErrorCode::kConfigInvalid, "M must be a multiple of segment");
  schedule.validate(M, segment);
  if (schedule.arrivals.begin()->first != 0) {
    throw Error(ErrorCode::kConfigInvalid, "the first arrival must start denoising at step 0");
  }
  SegmentedSampler sampler(model, sched, world, M, segment, guidance, noise_seed, std::move(requested));
  for (int boundary = 0; boundary < M; boundary += segment) {
    if (auto it = schedule.arrivals.find(boundary); it != schedule.arrivals.end()) sampler.deliver(it->second);
    sampler.advance(segment);
  }
  return {sampler.x(), sampler.trace()};
}

}  // namespace fastgsc
