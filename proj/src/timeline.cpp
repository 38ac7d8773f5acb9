#include "fastgsc/timeline.hpp"

#include <algorithm>
#include <set>

#include "fastgsc/error.hpp"

namespace fastgsc {

void LatencyConfig::validate() const {
  if (!(tau_e > 0.0)) throw Error(ErrorCode::kConfigInvalid, "tau_e must be > 0");
  if (!(tau_m > 0.0)) throw Error(ErrorCode::kConfigInvalid, "tau_m must be > 0");
  if (M < 1 || segment < 1 || M % segment != 0) {
    throw Error(ErrorCode::kConfigInvalid, "M must be a positive multiple of segment");
  }
  if (!(tau_trans >= 0.0)) throw Error(ErrorCode::kConfigInvalid, "tau_trans must be >= 0");
}

double phase_latency(int phase, int n_units, const LatencyConfig& cfg) {
  if (n_units <= 0) return 0.0;
  const double busy = cfg.tau_e * n_units + cfg.tau_trans;
  if (phase == 0) return busy;
  if (!arrives_in_time(phase, cfg)) return 0.0;
  return std::max(busy - cfg.tau_s(), 0.0);
}

void ArrivalSchedule::validate(int M, int segment) const {
  std::set<int> seen;
  for (const auto& [step, ids] : arrivals) {
    if (step < 0 || step >= M || step % segment != 0) {
      throw Error(ErrorCode::kConfigInvalid, "arrival step " + std::to_string(step) + " is not a segment boundary in [0, M)");
    }
    for (int id : ids) {
      if (!seen.insert(id).second) throw Error(ErrorCode::kConfigInvalid, "unit delivered twice");
    }
  }
  for (int id : dropped) {
    if (!seen.insert(id).second) throw Error(ErrorCode::kConfigInvalid, "dropped unit also delivered");
  }
}

Timeline conventional_timeline(std::span<const int> unit_ids, const LatencyConfig& cfg) {
  cfg.validate();
  if (unit_ids.empty()) throw Error(ErrorCode::kEmptyFirstPhase, "conventional timeline needs >= 1 unit");
  Timeline tl;
  const double startup = cfg.tau_e * static_cast<double>(unit_ids.size()) + cfg.tau_trans;
  tl.report.residual_latency = startup;
  tl.report.total_latency = startup + cfg.M * cfg.tau_m;
  tl.report.per_phase_overshoot = {startup};
  tl.schedule.arrivals[0] = std::vector<int>(unit_ids.begin(), unit_ids.end());
  return tl;
}

Timeline conventional_timeline(int n_units, const LatencyConfig& cfg) {
  std::vector<int> ids;
  for (int i = 0; i < n_units; ++i) ids.push_back(i);
  return conventional_timeline(ids, cfg);
}

Timeline pgsc_timeline(const std::vector<std::vector<int>>& phases, const LatencyConfig& cfg) {
  cfg.validate();
  if (phases.empty() || phases.front().empty()) {
    throw Error(ErrorCode::kEmptyFirstPhase, "phase 0 must select at least one unit");
  }
  Timeline tl;
  for (std::size_t t = 0; t < phases.size(); ++t) {
    const int phase = static_cast<int>(t);
    const auto& ids = phases[t];
    const double cost = phase_latency(phase, static_cast<int>(ids.size()), cfg);
    tl.report.per_phase_overshoot.push_back(cost);
    tl.report.residual_latency += cost;
    if (ids.empty()) continue;
    if (arrives_in_time(phase, cfg)) {
      auto& slot = tl.schedule.arrivals[phase_arrival_step(phase, cfg)];
      slot.insert(slot.end(), ids.begin(), ids.end());
    } else if (!cfg.censor_late) {
      tl.schedule.dropped.insert(tl.schedule.dropped.end(), ids.begin(), ids.end());
    }
  }
  tl.report.total_latency = tl.report.residual_latency + cfg.M * cfg.tau_m;
  tl.schedule.validate(cfg.M, cfg.segment);
  return tl;
}

nlohmann::json to_json(const LatencyReport& report) {
  return {{"total_latency", report.total_latency},
          {"residual_latency", report.residual_latency},
          {"per_phase_overshoot", report.per_phase_overshoot}};
}

nlohmann::json to_json(const LatencyConfig& cfg) {
  return {{"tau_e", cfg.tau_e}, {"tau_m", cfg.tau_m},         {"M", cfg.M},
          {"segment", cfg.segment}, {"tau_trans", cfg.tau_trans}, {"censor_late", cfg.censor_late}};
}

LatencyConfig latency_config_from_json(const nlohmann::json& j, LatencyConfig base) {
  base.tau_e = j.value("tau_e", base.tau_e);
  base.tau_m = j.value("tau_m", base.tau_m);
  base.M = j.value("M", base.M);
  base.segment = j.value("segment", base.segment);
  base.tau_trans = j.value("tau_trans", base.tau_trans);
  base.censor_late = j.value("censor_late", base.censor_late);
  return base;
}

void write_timeline_csv(std::ostream& out, const std::vector<std::vector<int>>& phases,
                        const Timeline& timeline, const LatencyConfig& cfg) {
  out << "phase,n_t,overshoot,arrivals\n";
  for (std::size_t t = 0; t < phases.size(); ++t) {
    const int phase = static_cast<int>(t);
    out << phase << ',' << phases[t].size() << ',';
    out << (t < timeline.report.per_phase_overshoot.size() ? timeline.report.per_phase_overshoot[t] : 0.0) << ',';
    if (!phases[t].empty()) {
      if (arrives_in_time(phase, cfg)) {
        out << phase_arrival_step(phase, cfg);
      } else {
        out << (cfg.censor_late ? "censored" : "dropped");
      }
    }
    out << '\n';
  }
}

}  // namespace fastgsc
