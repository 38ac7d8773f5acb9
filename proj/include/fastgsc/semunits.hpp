#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace fastgsc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

enum class Category : int {
  kNoun = 0,
  kVerb = 1,
  kAdjective = 2,
  kStyle = 3,
  kOthers = 4,
};

inline constexpr int kNumCategories = 5;

std::string_view category_name(Category c);
Category parse_category(std::string_view name);

// One transmittable condition element. Immutable once built; construct
// through make_unit so the invariants hold.
struct SemanticUnit {
  int id = 0;
  Category category = Category::kOthers;
  Vec offset;
  double magnitude_class = 0.0;  // == offset.norm()
};

SemanticUnit make_unit(int id, Category category, Vec offset);

// Magnitudes used when a world is generated. Larger edits are harder to
// add late, so they give the scheduler something to learn.
struct WorldLayout {
  int dim = 16;
  int k_max = 8;
  int n_e = kNumCategories;
  std::vector<Category> categories = {
      Category::kNoun,      Category::kNoun,  Category::kVerb,
      Category::kAdjective, Category::kAdjective, Category::kStyle,
      Category::kOthers,    Category::kOthers};
  std::array<double, kNumCategories> magnitude = {3.0, 2.0, 1.2, 1.2, 0.4};
};

// The K_max-entry unit table of one world. Offsets are mutually orthogonal.
struct UnitTable {
  int dim = 0;
  int k_max = 0;
  int n_e = kNumCategories;
  std::vector<SemanticUnit> units;

  const SemanticUnit& unit(int id) const { return units.at(static_cast<std::size_t>(id)); }
};

UnitTable generate_unit_table(std::uint64_t seed, const WorldLayout& layout = {});

nlohmann::json to_json(const UnitTable& table);
UnitTable unit_table_from_json(const nlohmann::json& j);

// The receiver's request: units occupy slots [0, units.size()); the rest of
// the K_max slots are empty.
class TaskRequest {
 public:
  TaskRequest(std::vector<SemanticUnit> units, int k_max, int n_e = kNumCategories);

  const std::vector<SemanticUnit>& units() const { return units_; }
  int k_max() const { return k_max_; }
  int n_e() const { return n_e_; }
  int size() const { return static_cast<int>(units_.size()); }
  bool slot_empty(int slot) const { return slot >= size(); }
  const SemanticUnit& slot(int k) const { return units_.at(static_cast<std::size_t>(k)); }

 private:
  std::vector<SemanticUnit> units_;
  int k_max_;
  int n_e_;
};

// K_max x N_e one-hot matrix; empty slots encode to zero rows.
Mat encode_request(const TaskRequest& req);

// Sum of offsets accumulated in ascending id order, so the result does not
// depend on how the caller ordered the set. Zero vector for an empty set.
Vec offset_sum(std::span<const SemanticUnit> units, int dim);

// Normalized offset sum; throws EmptyPrompt / DegenerateSum.
Vec prompt_embedding(std::span<const SemanticUnit> units);

// Per-slot pending indicator and arrival bookkeeping for one run.
class TransmissionState {
 public:
  explicit TransmissionState(const TaskRequest& req);

  const std::vector<std::uint8_t>& pending() const { return pending_; }
  const std::vector<std::optional<int>>& sent_at_step() const { return sent_at_step_; }
  bool is_pending(int slot) const { return pending_.at(static_cast<std::size_t>(slot)) != 0; }
  bool any_pending() const;

  // Clears pending[slot]. arrival_step lies in [0, max_step]; a unit that
  // arrives at max_step is recorded but never conditions the sampler.
  void mark_sent(int slot, int arrival_step, int max_step);

 private:
  std::vector<std::uint8_t> pending_;
  std::vector<std::optional<int>> sent_at_step_;
};

}  // namespace fastgsc
