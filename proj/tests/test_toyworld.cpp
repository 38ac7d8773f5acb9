#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "fastgsc/error.hpp"
#include "fastgsc/toyworld.hpp"
#include "oracles.hpp"

using namespace fastgsc;

namespace {

Vec basis(int dim, int i, double scale = 1.0) {
  Vec v = Vec::Zero(dim);
  v[i] = scale;
  return v;
}

WorldSpec single_unit_world(double sigma) {
  WorldSpec w;
  w.base_noise_sigma = sigma;
  w.table.dim = 16;
  w.table.k_max = 1;
  w.table.units = {make_unit(0, Category::kNoun, basis(16, 0, 3.0))};
  return w;
}

}  // namespace

TEST_CASE("training pairs in the zero-noise limit equal the offset sum") {
  const WorldSpec world = make_world(3, 1e-300);
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const TrainingPair p = sample_training_pair(world, rng);
    REQUIRE_FALSE(p.prompt.empty());
    CHECK(std::is_sorted(p.prompt.begin(), p.prompt.end()));
    const Vec mean = offset_sum(units_by_id(world, p.prompt), world.dim());
    CHECK((p.x0 - mean).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("Monte-Carlo mean of a single-unit prompt") {
  // 10^4 draws at sigma = 0.1: standard error per coordinate is 1e-3, so
  // 0.01 is a 10 SE bound.
  const WorldSpec world = single_unit_world(0.1);
  Rng rng(2024);
  Vec sum = Vec::Zero(16);
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const TrainingPair p = sample_training_pair(world, rng);
    REQUIRE(p.prompt == std::vector<int>{0});
    sum += p.x0;
  }
  const Vec mean = sum / n;
  CHECK((mean - basis(16, 0, 3.0)).cwiseAbs().maxCoeff() < 0.01);
}

TEST_CASE("prompts are never empty and cover all subsets") {
  const WorldSpec world = make_world(9);
  Rng rng(5);
  std::vector<int> hits(256, 0);
  for (int i = 0; i < 100000; ++i) {
    const TrainingPair p = sample_training_pair(world, rng);
    REQUIRE_FALSE(p.prompt.empty());
    int bits = 0;
    for (int id : p.prompt) bits |= 1 << id;
    ++hits[static_cast<std::size_t>(bits)];
  }
  CHECK(hits[0] == 0);
  // Each of the 255 subsets expects ~392 hits with sd ~20.
  for (int b = 1; b < 256; ++b) CHECK(std::abs(hits[static_cast<std::size_t>(b)] - 100000.0 / 255.0) < 120.0);
}

TEST_CASE("clip_analogue_score examples") {
  const std::vector<SemanticUnit> req{make_unit(0, Category::kNoun, basis(4, 0, 3.0)),
                                      make_unit(1, Category::kVerb, basis(4, 1, 2.0))};
  const Vec h = prompt_embedding(req);
  CHECK(clip_analogue_score(5.0 * h, req) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(clip_analogue_score(basis(4, 2), req) == 0.0);
  CHECK(clip_analogue_score(-h, req) == 0.0);
  const Vec perfect = offset_sum(req, 4);
  CHECK(clip_analogue_score(perfect, req) == doctest::Approx(1.0).epsilon(1e-15));
  try {
    clip_analogue_score(Vec::Zero(4), req);
    FAIL("expected ZeroSample");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kZeroSample);
  }
}

TEST_CASE("clip_analogue_score is scale invariant and bounded") {
  const WorldSpec world = make_world(4);
  const TaskRequest req = full_request(world);
  Rng rng(8);
  for (int i = 0; i < 100; ++i) {
    const Vec v = standard_normal(16, rng);
    const double s = clip_analogue_score(v, req.units());
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
    CHECK(clip_analogue_score(7.5 * v, req.units()) == doctest::Approx(s).epsilon(1e-12));
  }
}

TEST_CASE("incorporation_ratio examples and orthogonal invariance") {
  const SemanticUnit a = make_unit(0, Category::kNoun, basis(4, 0, 3.0));
  const SemanticUnit b = make_unit(1, Category::kVerb, basis(4, 1, 2.0));
  CHECK(incorporation_ratio(a.offset, a) == 1.0);
  CHECK(incorporation_ratio(Vec::Zero(4), a) == 0.0);
  CHECK(incorporation_ratio(a.offset + b.offset, a) == 1.0);

  const WorldSpec world = make_world(12);
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const Vec v = standard_normal(16, rng);
    const double base = incorporation_ratio(v, world.table.unit(0));
    const double shifted = incorporation_ratio(v + 3.7 * world.table.unit(5).offset, world.table.unit(0));
    CHECK(shifted == doctest::Approx(base).epsilon(1e-9));
  }
}

TEST_CASE("default noise level separates correct from incorrect prompts") {
  // Average score of samples drawn for prompt P, evaluated against P and
  // against an independently drawn prompt Q != P.
  const WorldSpec world = make_world(7, 0.25);
  Rng rng(77);
  double correct = 0.0, wrong = 0.0;
  const int n = 4000;
  for (int i = 0; i < n; ++i) {
    const TrainingPair p = sample_training_pair(world, rng);
    TrainingPair q = sample_training_pair(world, rng);
    while (q.prompt == p.prompt) q = sample_training_pair(world, rng);
    correct += clip_analogue_score(p.x0, units_by_id(world, p.prompt));
    wrong += clip_analogue_score(p.x0, units_by_id(world, q.prompt));
  }
  CHECK((correct - wrong) / n > 0.1);
}

TEST_CASE("sample_request draws distinct units within the size range") {
  const WorldSpec world = make_world(7);
  Rng rng(4);
  std::vector<int> sizes(9, 0);
  for (int i = 0; i < 2000; ++i) {
    const TaskRequest r = sample_request(world, rng, 4, 8);
    ++sizes[static_cast<std::size_t>(r.size())];
    CHECK(r.k_max() == 8);
    std::vector<int> ids;
    for (const auto& u : r.units()) ids.push_back(u.id);
    std::sort(ids.begin(), ids.end());
    CHECK(std::adjacent_find(ids.begin(), ids.end()) == ids.end());
  }
  for (int s = 0; s < 4; ++s) CHECK(sizes[static_cast<std::size_t>(s)] == 0);
  for (int s = 4; s <= 8; ++s) CHECK(sizes[static_cast<std::size_t>(s)] > 300);
}

TEST_CASE("world JSON round trip") {
  const WorldSpec a = make_world(21, 0.3);
  const WorldSpec b = world_from_json(to_json(a));
  CHECK(b.base_noise_sigma == 0.3);
  CHECK(b.seed == 21);
  for (int i = 0; i < 8; ++i) CHECK((a.table.unit(i).offset - b.table.unit(i).offset).norm() == 0.0);
}
