#include "fastgsc/toyworld.hpp"

#include <algorithm>
#include <numeric>

#include "fastgsc/error.hpp"

namespace fastgsc {

WorldSpec make_world(std::uint64_t seed, double base_noise_sigma, const WorldLayout& layout) {
  if (!(base_noise_sigma > 0.0)) throw Error(ErrorCode::kConfigInvalid, "base_noise_sigma must be > 0");
  return WorldSpec{base_noise_sigma, generate_unit_table(seed, layout), seed};
}

nlohmann::json to_json(const WorldSpec& world) {
  auto j = to_json(world.table);
  j["base_noise_sigma"] = world.base_noise_sigma;
  j["seed"] = world.seed;
  return j;
}

WorldSpec world_from_json(const nlohmann::json& j) {
  WorldSpec world;
  world.table = unit_table_from_json(j);
  world.base_noise_sigma = j.value("base_noise_sigma", 0.25);
  world.seed = j.value("seed", std::uint64_t{0});
  if (!(world.base_noise_sigma > 0.0)) throw Error(ErrorCode::kMalformedInput, "base_noise_sigma must be > 0");
  return world;
}

TrainingPair sample_training_pair(const WorldSpec& world, Rng& rng) {
  const int k = static_cast<int>(world.table.units.size());
  std::uniform_int_distribution<std::uint64_t> pick(1, (std::uint64_t{1} << k) - 1);
  const std::uint64_t bits = pick(rng);
  TrainingPair pair;
  Vec mean = Vec::Zero(world.dim());
  for (int i = 0; i < k; ++i) {
    if ((bits >> i) & 1U) {
      pair.prompt.push_back(i);
      mean += world.table.unit(i).offset;
    }
  }
  pair.x0 = mean + world.base_noise_sigma * standard_normal(world.dim(), rng);
  return pair;
}

TaskRequest sample_request(const WorldSpec& world, Rng& rng, int min_units, int max_units) {
  const int k = static_cast<int>(world.table.units.size());
  min_units = std::clamp(min_units, 1, k);
  max_units = std::clamp(max_units, min_units, k);
  const int n = std::uniform_int_distribution<int>(min_units, max_units)(rng);
  std::vector<int> ids(static_cast<std::size_t>(k));
  std::iota(ids.begin(), ids.end(), 0);
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(static_cast<std::size_t>(n));
  return TaskRequest(units_by_id(world, ids), world.k_max(), world.table.n_e);
}

TaskRequest full_request(const WorldSpec& world) {
  return TaskRequest(world.table.units, world.k_max(), world.table.n_e);
}

std::vector<SemanticUnit> units_by_id(const WorldSpec& world, std::span<const int> ids) {
  std::vector<SemanticUnit> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(world.table.unit(id));
  return out;
}

double clip_analogue_score(const Vec& sample, std::span<const SemanticUnit> requested) {
  const double norm = sample.norm();
  if (norm < 1e-12) throw Error(ErrorCode::kZeroSample, "sample has zero norm");
  const Vec h = prompt_embedding(requested);
  return std::max(h.dot(sample) / norm, 0.0);
}

double incorporation_ratio(const Vec& sample, const SemanticUnit& unit) {
  return sample.dot(unit.offset) / unit.offset.squaredNorm();
}

}  // namespace fastgsc
