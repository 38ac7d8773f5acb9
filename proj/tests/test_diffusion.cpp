#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "fastgsc/checkpoint.hpp"
#include "fastgsc/diffusion.hpp"
#include "fastgsc/error.hpp"
#include "oracles.hpp"

using namespace fastgsc;

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

double max_abs(const Vec& v) { return v.cwiseAbs().maxCoeff(); }

WorldSpec small_world() {
  WorldLayout layout;
  layout.dim = 4;
  layout.k_max = 3;
  layout.categories = {Category::kNoun, Category::kVerb, Category::kOthers};
  return make_world(5, 0.25, layout);
}

DenoiserModel small_model(const WorldSpec& world, std::uint64_t seed) {
  DenoiserModel model({world.dim(), 4, 6, 2}, NoiseSchedule::linear());
  Rng rng(seed);
  model.initialize(rng);
  return model;
}

bool bit_equal(const Vec& a, const Vec& b) { return a.size() == b.size() && (a.array() == b.array()).all(); }

}  // namespace

TEST_CASE("linear schedule invariants") {
  const NoiseSchedule s = NoiseSchedule::linear();
  CHECK(s.T() == 1000);
  CHECK(s.alpha_bar(0) == 1.0);
  CHECK(s.beta(1) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(s.beta(1000) == doctest::Approx(0.02).epsilon(1e-12));
  for (int t = 1; t <= s.T(); ++t) {
    CHECK(s.beta(t) > 0.0);
    CHECK(s.beta(t) < 1.0);
    CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    CHECK(s.alpha_bar(t) > 0.0);
    CHECK(std::abs(s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)) < 1e-12);
  }
}

TEST_CASE("sampling timesteps are an even descending sub-sequence") {
  const NoiseSchedule s = NoiseSchedule::linear();
  const auto ts = s.sampling_timesteps(60);
  REQUIRE(ts.size() == 60);
  CHECK(ts.front() == 1000);
  CHECK(ts.back() == 17);
  for (std::size_t i = 1; i < ts.size(); ++i) {
    CHECK(ts[i] < ts[i - 1]);
    CHECK(std::abs((ts[i - 1] - ts[i]) - 1000.0 / 60.0) < 1.0);
  }
}

TEST_CASE("forward_noise examples") {
  const NoiseSchedule s = NoiseSchedule::linear();
  Rng rng(1);
  const Vec x0 = standard_normal(16, rng), n = standard_normal(16, rng);
  // abar_1 = 1 - 1e-4, so x_1 = x_0 + O(1e-2 |n|).
  CHECK(max_abs(forward_noise(x0, 1, n, s) - x0) < 0.0101 * max_abs(n) + 1e-4 * max_abs(x0));
  CHECK(max_abs(forward_noise(x0, 500, Vec::Zero(16), s) - std::sqrt(s.alpha_bar(500)) * x0) < 1e-15);
  CHECK(max_abs(forward_noise(Vec::Zero(16), 500, n, s) - std::sqrt(1.0 - s.alpha_bar(500)) * n) < 1e-15);
  CHECK(code_of([&] { forward_noise(x0, 0, n, s); }) == ErrorCode::kStepOutOfRange);
  CHECK(code_of([&] { forward_noise(x0, 1001, n, s); }) == ErrorCode::kStepOutOfRange);
}

TEST_CASE("time embedding") {
  const Vec e = time_embedding(37, 32);
  CHECK(e[0] == doctest::Approx(std::sin(37.0)));
  CHECK(e[16] == doctest::Approx(std::cos(37.0)));
  for (int i = 0; i < 16; ++i) CHECK(e[i] * e[i] + e[16 + i] * e[16 + i] == doctest::Approx(1.0));
}

TEST_CASE("cfg_noise identities") {
  const WorldSpec world = make_world(7);
  DenoiserModel m(DenoiserConfig{}, NoiseSchedule::linear());
  Rng rng(2);
  m.initialize(rng);
  const Vec x = standard_normal(16, rng);
  const Vec y = offset_sum(units_by_id(world, std::vector<int>{0, 3}), 16);
  const Vec cond = m.predict(x, 400, y);
  const Vec uncond = m.predict(x, 400, Vec::Zero(16).eval());
  // Batched and single-column forwards may round differently.
  CHECK(max_abs(cfg_noise(m, x, y, 400, 0.0) - cond) < 1e-12);
  CHECK(max_abs(cfg_noise(m, x, y, 400, 1.0) - (2.0 * cond - uncond)) < 1e-12);
  CHECK(max_abs(cfg_noise(m, x, y, 400, 2.0) - (cond + 2.0 * (cond - uncond))) < 1e-12);
  // Equal branches: the guidance term vanishes for any w.
  const Vec zero = Vec::Zero(16);
  CHECK(max_abs(cfg_noise(m, x, zero, 400, 7.0) - uncond) < 1e-12);
}

TEST_CASE("scd_noise identities") {
  const WorldSpec world = make_world(7);
  DenoiserModel m(DenoiserConfig{}, NoiseSchedule::linear());
  Rng rng(4);
  m.initialize(rng);
  const auto prev = units_by_id(world, std::vector<int>{1, 4});
  const auto add = units_by_id(world, std::vector<int>{0});
  const auto comb = units_by_id(world, std::vector<int>{0, 1, 4});
  for (int trial = 0; trial < 20; ++trial) {
    const Vec x = standard_normal(16, rng);
    const int t = 1 + trial * 49;
    const Vec reference = cfg_noise(m, x, offset_sum(comb, 16), t, 2.0);
    CHECK(bit_equal(scd_noise(m, x, comb, add, prev, t, 2.0, 0.0), reference));
    // y_new == y_previous: the difference branches coincide.
    CHECK(bit_equal(scd_noise(m, x, prev, prev, prev, t, 2.0, 9.0),
                    cfg_noise(m, x, offset_sum(prev, 16), t, 2.0)));
    const Vec diff = m.predict(x, t, offset_sum(add, 16)) - m.predict(x, t, offset_sum(prev, 16));
    CHECK(max_abs(scd_noise(m, x, comb, add, prev, t, 2.0, 4.0) - (reference + 4.0 * diff)) < 1e-12);
  }
  const Vec x = standard_normal(16, rng);
  CHECK(code_of([&] { scd_noise(m, x, prev, add, prev, 10, 2.0, 4.0); }) ==
        ErrorCode::kInconsistentConditionSets);
}

TEST_CASE("ddim_update identities") {
  const NoiseSchedule s = NoiseSchedule::linear();
  Rng rng(6);
  const Vec x0 = standard_normal(16, rng), n = standard_normal(16, rng);
  for (int t : {17, 300, 1000}) {
    const Vec xt = forward_noise(x0, t, n, s);
    const DdimUpdate u = ddim_update(xt, n, s, t, t / 2);
    CHECK(max_abs(u.x0_hat - x0) < 1e-9);
    // With the true noise the move lands exactly on the forward process.
    if (t / 2 >= 1) CHECK(max_abs(u.x_next - forward_noise(x0, t / 2, n, s)) < 1e-9);
    const DdimUpdate same = ddim_update(xt, standard_normal(16, rng), s, t, t);
    CHECK(max_abs(same.x_next - xt) < 1e-12);
    const DdimUpdate clean = ddim_update(xt, n, s, t, 0);
    CHECK(bit_equal(clean.x_next, clean.x0_hat));
  }
  CHECK(code_of([&] { ddim_update(x0, n, s, 10, 20); }) == ErrorCode::kStepOrderViolation);
  CHECK(code_of([&] { ddim_update(x0, n, s, 0, 0); }) == ErrorCode::kStepOutOfRange);

  SamplerState st{x0, 3, {1, 2}};
  const SamplerState a = ddim_step(st, n, s, 500, 483);
  const SamplerState b = ddim_step(st, n, s, 500, 483);
  CHECK(a.step_index == 4);
  CHECK(a.received == st.received);
  CHECK(bit_equal(a.x, b.x));
}

TEST_CASE("denoiser loss is zero when the prediction equals the noise") {
  const WorldSpec world = small_world();
  const DenoiserModel model = small_model(world, 1);
  Rng rng(3);
  std::vector<TrainingPair> pairs;
  for (int i = 0; i < 8; ++i) pairs.push_back(sample_training_pair(world, rng));
  NoisedBatch batch = make_noised_batch(model, world, pairs, 0.1, rng);
  batch.noise = model.network().forward(model.network_input(batch.x_t, batch.t, batch.condition));
  CHECK(denoiser_loss(model, batch, nullptr) == 0.0);
}

TEST_CASE("noised batches follow the forward process and condition dropout") {
  const WorldSpec world = small_world();
  const DenoiserModel model = small_model(world, 1);
  Rng rng(8);
  std::vector<TrainingPair> pairs;
  for (int i = 0; i < 64; ++i) pairs.push_back(sample_training_pair(world, rng));
  const NoisedBatch kept = make_noised_batch(model, world, pairs, 0.0, rng);
  const NoisedBatch dropped = make_noised_batch(model, world, pairs, 1.0, rng);
  for (int j = 0; j < 64; ++j) {
    const auto& p = pairs[static_cast<std::size_t>(j)];
    CHECK(max_abs(kept.condition.col(j) - offset_sum(units_by_id(world, p.prompt), 4)) == 0.0);
    CHECK(dropped.condition.col(j).isZero(0.0));
    CHECK(max_abs(kept.x_t.col(j) - forward_noise(p.x0, kept.t[static_cast<std::size_t>(j)], kept.noise.col(j),
                                                   model.schedule())) == 0.0);
  }
}

TEST_CASE("denoiser gradient matches finite differences") {
  const WorldSpec world = small_world();
  DenoiserModel model = small_model(world, 11);
  REQUIRE(model.network().num_params() <= 1000);
  Rng rng(12);
  std::vector<TrainingPair> pairs;
  for (int i = 0; i < 6; ++i) pairs.push_back(sample_training_pair(world, rng));
  const NoisedBatch batch = make_noised_batch(model, world, pairs, 0.3, rng);
  std::vector<double> grad;
  denoiser_loss(model, batch, &grad);
  const double err =
      oracle::max_fd_error(model.network().params(), grad, [&] { return denoiser_loss(model, batch, nullptr); });
  CHECK(err <= 1e-4);
}

TEST_CASE("denoiser training lowers the loss and reports divergence") {
  const WorldSpec world = small_world();
  DenoiserModel model = small_model(world, 2);
  DenoiserTrainConfig cfg;
  cfg.steps = 400;
  cfg.batch = 64;
  DenoiserTrainer trainer(model, world, cfg);
  Rng rng(5);
  double first = 0.0, last = 0.0;
  trainer.train(rng, [&](int step, double loss) {
    if (step < 20) first += loss / 20;
    if (step >= 380) last += loss / 20;
  });
  CHECK(last < 0.8 * first);
  CHECK(last < 1.0);

  model.network().params()[0] = std::nan("");
  std::vector<TrainingPair> pairs{sample_training_pair(world, rng)};
  CHECK(code_of([&] { trainer.train_step(pairs, rng); }) == ErrorCode::kNonFiniteLoss);
}

TEST_CASE("denoiser checkpoint round trip") {
  const WorldSpec world = small_world();
  DenoiserModel model = small_model(world, 9);
  const auto path = std::filesystem::temp_directory_path() / "fastgsc_test_denoiser.ckpt";
  save_denoiser(path, model, {{"world_seed", 5}});
  const DenoiserModel loaded = load_denoiser(path);
  CHECK(read_checkpoint(path).header.at("world_seed") == 5);
  round_to_float32(model.network().params());
  CHECK(loaded.network().params() == model.network().params());
  CHECK(loaded.config().hidden == 6);
  Rng rng(1);
  const Vec x = standard_normal(4, rng);
  const Vec c = standard_normal(4, rng);
  CHECK(bit_equal(loaded.predict(x, 123, c), model.predict(x, 123, c)));
  std::filesystem::remove(path);
}

TEST_CASE("all-at-step-0 segmented sampling equals plain DDIM with the full prompt") {
  const WorldSpec world = make_world(7);
  const NoiseSchedule s = NoiseSchedule::linear();
  const oracle::GaussianPredictor oracle(s, 16, world.base_noise_sigma);
  ArrivalSchedule sched;
  sched.arrivals[0] = {0, 1, 2, 3, 4, 5, 6, 7};
  const GuidanceSettings g{2.0, 4.0, ScdDuration::kPerSegment};
  const SamplingResult r = run_segmented_sampling(oracle, s, world, sched, 60, 10, g, 99);

  Rng rng(99);
  Vec x = standard_normal(16, rng);
  const Vec y = offset_sum(world.table.units, 16);
  const auto ts = s.sampling_timesteps(60);
  for (int m = 0; m < 60; ++m) {
    const int to = m + 1 < 60 ? ts[static_cast<std::size_t>(m) + 1] : 0;
    x = ddim_update(x, cfg_noise(oracle, x, y, ts[static_cast<std::size_t>(m)], 2.0), s,
                    ts[static_cast<std::size_t>(m)], to)
            .x_next;
  }
  CHECK(bit_equal(r.x0, x));
  REQUIRE(r.trace.size() == 60);
  CHECK(r.trace[0].arrivals.size() == 8);
  for (const auto& row : r.trace) CHECK(row.mode == GuidanceMode::kCfg);
}

TEST_CASE("full-prompt sampling with the exact predictor scores near 1") {
  const WorldSpec world = make_world(7);
  const NoiseSchedule s = NoiseSchedule::linear();
  const oracle::GaussianPredictor oracle(s, 16, world.base_noise_sigma);
  ArrivalSchedule sched;
  sched.arrivals[0] = {0, 1, 2, 3, 4, 5, 6, 7};
  double total = 0.0;
  for (int seed = 0; seed < 50; ++seed) {
    const auto r = run_segmented_sampling(oracle, s, world, sched, 60, 10, {0.0, 0.0}, seed);
    total += clip_analogue_score(r.x0, world.table.units);
  }
  CHECK(total / 50 >= 0.9);
}

TEST_CASE("order of units inside one arrival batch does not matter") {
  const WorldSpec world = make_world(7);
  DenoiserModel m(DenoiserConfig{}, NoiseSchedule::linear());
  Rng rng(3);
  m.initialize(rng);
  for (const auto duration : {ScdDuration::kPerSegment, ScdDuration::kFirstStepOnly}) {
    SegmentedSampler a(m, m.schedule(), world, 60, 10, {2.0, 4.0, duration}, 5);
    SegmentedSampler b(m, m.schedule(), world, 60, 10, {2.0, 4.0, duration}, 5);
    a.deliver(std::vector<int>{6, 2});
    b.deliver(std::vector<int>{2, 6});
    a.advance(10);
    b.advance(10);
    a.deliver(std::vector<int>{7, 0, 3});
    b.deliver(std::vector<int>{3, 7});
    b.deliver(std::vector<int>{0});
    a.run_to_end();
    b.run_to_end();
    CHECK(bit_equal(a.x(), b.x()));
    CHECK(a.state().received == std::vector<int>{0, 2, 3, 6, 7});
  }
}

TEST_CASE("guidance mode per step follows the SCD duration") {
  const WorldSpec world = make_world(7);
  const NoiseSchedule s = NoiseSchedule::linear();
  const oracle::GaussianPredictor oracle(s, 16, 0.25);
  ArrivalSchedule sched;
  sched.arrivals[0] = {1};
  sched.arrivals[20] = {0};
  sched.arrivals[30] = {2, 5};

  auto modes = [&](GuidanceSettings g) {
    const auto r = run_segmented_sampling(oracle, s, world, sched, 60, 10, g, 1);
    std::vector<int> scd;
    for (const auto& row : r.trace) {
      if (row.mode == GuidanceMode::kScd) scd.push_back(row.step);
    }
    return scd;
  };
  CHECK(modes({2.0, 0.0, ScdDuration::kPerSegment}).empty());
  CHECK(modes({2.0, 4.0, ScdDuration::kFirstStepOnly}) == std::vector<int>{20, 30});
  std::vector<int> per_segment;
  for (int m = 20; m < 40; ++m) per_segment.push_back(m);
  CHECK(modes({2.0, 4.0, ScdDuration::kPerSegment}) == per_segment);

  std::ostringstream csv;
  const auto r = run_segmented_sampling(oracle, s, world, sched, 60, 10, {2.0, 4.0}, 1);
  write_trace_csv(csv, r.trace);
  std::istringstream lines(csv.str());
  std::string header, row0;
  std::getline(lines, header);
  std::getline(lines, row0);
  CHECK(header == "step,arrivals,guidance_mode,score_of_x0hat");
  CHECK(row0.rfind("0,1,cfg,", 0) == 0);
  CHECK(csv.str().find("\n30,2;5,scd,") != std::string::npos);
}

TEST_CASE("segmented sampling input validation") {
  const WorldSpec world = make_world(7);
  const NoiseSchedule s = NoiseSchedule::linear();
  const oracle::GaussianPredictor oracle(s, 16, 0.25);
  ArrivalSchedule empty;
  CHECK(code_of([&] { run_segmented_sampling(oracle, s, world, empty, 60, 10, {}, 1); }) ==
        ErrorCode::kEmptySchedule);
  ArrivalSchedule late;
  late.arrivals[10] = {0};
  CHECK(code_of([&] { run_segmented_sampling(oracle, s, world, late, 60, 10, {}, 1); }) ==
        ErrorCode::kConfigInvalid);
  ArrivalSchedule off;
  off.arrivals[0] = {0};
  off.arrivals[15] = {1};
  CHECK(code_of([&] { run_segmented_sampling(oracle, s, world, off, 60, 10, {}, 1); }) ==
        ErrorCode::kConfigInvalid);

  SegmentedSampler sampler(oracle, s, world, 60, 10, {}, 1);
  CHECK(code_of([&] { sampler.advance(1); }) == ErrorCode::kEmptySchedule);
  sampler.deliver(std::vector<int>{0});
  sampler.advance(3);
  CHECK(code_of([&] { sampler.deliver(std::vector<int>{1}); }) == ErrorCode::kConfigInvalid);
  sampler.advance(7);
  CHECK(code_of([&] { sampler.deliver(std::vector<int>{0}); }) == ErrorCode::kConfigInvalid);
  sampler.run_to_end();
  CHECK(sampler.finished());
  CHECK(code_of([&] { sampler.deliver(std::vector<int>{1}); }) == ErrorCode::kStepOutOfRange);
}

TEST_CASE("a later arrival is incorporated less (exact predictor, alpha = 0)") {
  const WorldSpec world = make_world(7);
  const NoiseSchedule s = NoiseSchedule::linear();
  const oracle::GaussianPredictor oracle(s, 16, world.base_noise_sigma);
  const SemanticUnit& noun = world.table.unit(0);
  auto mean_ratio = [&](int arrival) {
    std::vector<double> r;
    for (int seed = 0; seed < 100; ++seed) {
      ArrivalSchedule sched;
      sched.arrivals[0] = {5};
      sched.arrivals[arrival] = {0};
      r.push_back(incorporation_ratio(run_segmented_sampling(oracle, s, world, sched, 30, 10, {2.0, 0.0}, seed).x0,
                                      noun));
    }
    return oracle::mean(r);
  };
  CHECK(mean_ratio(20) < mean_ratio(10));
}
