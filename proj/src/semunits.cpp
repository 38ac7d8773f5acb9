#include "fastgsc/semunits.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "fastgsc/error.hpp"
#include "fastgsc/rng.hpp"

namespace fastgsc {

std::string_view category_name(Category c) {
  switch (c) {
    case Category::kNoun: return "NOUN";
    case Category::kVerb: return "VERB";
    case Category::kAdjective: return "ADJECTIVE";
    case Category::kStyle: return "STYLE";
    case Category::kOthers: return "OTHERS";
  }
  return "OTHERS";
}

Category parse_category(std::string_view name) {
  for (int i = 0; i < kNumCategories; ++i) {
    auto c = static_cast<Category>(i);
    if (category_name(c) == name) return c;
  }
  throw Error(ErrorCode::kMalformedInput, "unknown category '" + std::string(name) + "'");
}

SemanticUnit make_unit(int id, Category category, Vec offset) {
  if (id < 0) throw Error(ErrorCode::kMalformedInput, "unit id must be >= 0");
  if (offset.size() == 0 || !offset.allFinite()) {
    throw Error(ErrorCode::kMalformedInput, "unit offset must be non-empty and finite");
  }
  const double norm = offset.norm();
  if (!(norm > 0.0)) throw Error(ErrorCode::kMalformedInput, "unit offset must be non-zero");
  return SemanticUnit{id, category, std::move(offset), norm};
}

UnitTable generate_unit_table(std::uint64_t seed, const WorldLayout& layout) {
  if (layout.dim < 1 || layout.k_max < 1 || layout.k_max > layout.dim) {
    throw Error(ErrorCode::kConfigInvalid, "world needs 1 <= K_max <= D");
  }
  if (static_cast<int>(layout.categories.size()) != layout.k_max) {
    throw Error(ErrorCode::kConfigInvalid, "category layout must list K_max entries");
  }
  Rng rng(derive_seed(seed, 0x776f726c64ULL));
  Mat gaussian(layout.dim, layout.k_max);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int c = 0; c < layout.k_max; ++c)
    for (int r = 0; r < layout.dim; ++r) gaussian(r, c) = normal(rng);

  // Thin Q of a Gaussian matrix gives K_max orthonormal directions.
  Eigen::HouseholderQR<Mat> qr(gaussian);
  Mat q = qr.householderQ() * Mat::Identity(layout.dim, layout.k_max);

  UnitTable table;
  table.dim = layout.dim;
  table.k_max = layout.k_max;
  table.n_e = layout.n_e;
  for (int k = 0; k < layout.k_max; ++k) {
    const Category cat = layout.categories[static_cast<std::size_t>(k)];
    const double mag = layout.magnitude[static_cast<std::size_t>(cat)];
    Vec dir = q.col(k);
    dir.normalize();
    table.units.push_back(make_unit(k, cat, mag * dir));
  }
  return table;
}

nlohmann::json to_json(const UnitTable& table) {
  nlohmann::json units = nlohmann::json::array();
  for (const auto& u : table.units) {
    units.push_back({{"id", u.id},
                     {"category", category_name(u.category)},
                     {"offset", std::vector<double>(u.offset.data(), u.offset.data() + u.offset.size())}});
  }
  return {{"D", table.dim}, {"K_max", table.k_max}, {"N_e", table.n_e}, {"units", units}};
}

UnitTable unit_table_from_json(const nlohmann::json& j) {
  try {
    UnitTable table;
    table.dim = j.at("D").get<int>();
    table.k_max = j.at("K_max").get<int>();
    table.n_e = j.at("N_e").get<int>();
    for (const auto& ju : j.at("units")) {
      auto values = ju.at("offset").get<std::vector<double>>();
      if (static_cast<int>(values.size()) != table.dim) {
        throw Error(ErrorCode::kMalformedInput, "offset length differs from D");
      }
      Vec offset = Eigen::Map<Vec>(values.data(), table.dim);
      table.units.push_back(make_unit(ju.at("id").get<int>(),
                                      parse_category(ju.at("category").get<std::string>()),
                                      std::move(offset)));
    }
    if (static_cast<int>(table.units.size()) > table.k_max) {
      throw Error(ErrorCode::kMalformedInput, "more units than K_max");
    }
    for (std::size_t i = 0; i < table.units.size(); ++i) {
      if (table.units[i].id != static_cast<int>(i)) {
        throw Error(ErrorCode::kMalformedInput, "unit ids must be 0..n-1 in order");
      }
    }
    return table;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kMalformedInput, e.what());
  }
}

TaskRequest::TaskRequest(std::vector<SemanticUnit> units, int k_max, int n_e)
    : units_(std::move(units)), k_max_(k_max), n_e_(n_e) {
  if (units_.empty() || static_cast<int>(units_.size()) > k_max_) {
    throw Error(ErrorCode::kMalformedInput, "request needs 1..K_max units");
  }
  if (n_e_ < kNumCategories) throw Error(ErrorCode::kMalformedInput, "N_e smaller than category count");
  std::set<int> ids;
  for (const auto& u : units_) {
    if (!ids.insert(u.id).second) throw Error(ErrorCode::kMalformedInput, "duplicate unit id in request");
  }
}

Mat encode_request(const TaskRequest& req) {
  Mat e = Mat::Zero(req.k_max(), req.n_e());
  for (int k = 0; k < req.size(); ++k) e(k, static_cast<int>(req.slot(k).category)) = 1.0;
  return e;
}

Vec offset_sum(std::span<const SemanticUnit> units, int dim) {
  std::vector<const SemanticUnit*> sorted;
  sorted.reserve(units.size());
  for (const auto& u : units) sorted.push_back(&u);
  std::sort(sorted.begin(), sorted.end(),
            [](const SemanticUnit* a, const SemanticUnit* b) { return a->id < b->id; });
  Vec sum = Vec::Zero(dim);
  for (const auto* u : sorted) sum += u->offset;
  return sum;
}

Vec prompt_embedding(std::span<const SemanticUnit> units) {
  if (units.empty()) throw Error(ErrorCode::kEmptyPrompt, "prompt has no units");
  Vec sum = offset_sum(units, static_cast<int>(units.front().offset.size()));
  const double norm = sum.norm();
  if (norm < 1e-12) throw Error(ErrorCode::kDegenerateSum, "offsets cancel out");
  return sum / norm;
}

TransmissionState::TransmissionState(const TaskRequest& req)
    : pending_(static_cast<std::size_t>(req.k_max()), 0),
      sent_at_step_(static_cast<std::size_t>(req.k_max())) {
  for (int k = 0; k < req.size(); ++k) pending_[static_cast<std::size_t>(k)] = 1;
}

bool TransmissionState::any_pending() const {
  return std::any_of(pending_.begin(), pending_.end(), [](std::uint8_t p) { return p != 0; });
}

void TransmissionState::mark_sent(int slot, int arrival_step, int max_step) {
  if (!is_pending(slot)) throw Error(ErrorCode::kInvalidAction, "slot is not pending");
  if (arrival_step < 0 || arrival_step > max_step) {
    throw Error(ErrorCode::kStepOutOfRange, "arrival step outside [0, M]");
  }
  pending_[static_cast<std::size_t>(slot)] = 0;
  sent_at_step_[static_cast<std::size_t>(slot)] = arrival_step;
}

}  // namespace fastgsc
