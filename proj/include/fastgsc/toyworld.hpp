#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fastgsc/rng.hpp"
#include "fastgsc/semunits.hpp"

namespace fastgsc {

// Synthetic conditional world: a prompt P generates
//   x_0 ~ Normal(sum_{k in P} offset_k, base_noise_sigma^2 I).
struct WorldSpec {
  double base_noise_sigma = 0.25;
  UnitTable table;
  std::uint64_t seed = 0;

  int dim() const { return table.dim; }
  int k_max() const { return table.k_max; }
};

WorldSpec make_world(std::uint64_t seed, double base_noise_sigma = 0.25,
                     const WorldLayout& layout = {});

nlohmann::json to_json(const WorldSpec& world);
WorldSpec world_from_json(const nlohmann::json& j);

struct TrainingPair {
  Vec x0;
  std::vector<int> prompt;  // unit ids, ascending
};

// Prompt is a uniformly random non-empty subset of the unit table.
TrainingPair sample_training_pair(const WorldSpec& world, Rng& rng);

// Request of |units| ~ U{min_units..max_units} distinct units in shuffled
// slot order.
TaskRequest sample_request(const WorldSpec& world, Rng& rng, int min_units, int max_units);

// All units of the table, slot k = unit k.
TaskRequest full_request(const WorldSpec& world);

std::vector<SemanticUnit> units_by_id(const WorldSpec& world, std::span<const int> ids);

// max(cos(h, v), 0) with h the prompt embedding of `requested`.
double clip_analogue_score(const Vec& sample, std::span<const SemanticUnit> requested);

// <sample, offset> / |offset|^2.
double incorporation_ratio(const Vec& sample, const SemanticUnit& unit);

}  // namespace fastgsc
