#pragma once

#include <map>
#include <ostream>
#include <span>
#include <vector>

#include <json.hpp>

namespace fastgsc {

// Time is measured in denoising-step units (tau_m == 1 by default).
struct LatencyConfig {
  double tau_e = 5.0;      // extraction latency of one unit
  double tau_m = 1.0;      // duration of one denoising step
  int M = 60;              // total denoising steps
  int segment = 10;        // denoising steps per phase
  double tau_trans = 0.0;  // transmission latency per phase
  // When set, the transmitter knows M and does not extract units that could
  // only arrive after the last denoising step. Otherwise they are extracted
  // and dropped.
  bool censor_late = false;

  double tau_s() const { return segment * tau_m; }
  // Phases of a full episode: the start-up phase plus one per segment.
  int num_phases() const { return M / segment + 1; }
  void validate() const;
};

// Denoising step at which units extracted in `phase` reach the receiver.
inline int phase_arrival_step(int phase, const LatencyConfig& cfg) { return phase * cfg.segment; }
inline bool arrives_in_time(int phase, const LatencyConfig& cfg) {
  return phase_arrival_step(phase, cfg) < cfg.M;
}

// Residual latency contributed by one phase that extracts n units: the whole
// extraction for the start-up phase, the overshoot beyond the segment for
// later phases, nothing for units that cannot arrive before step M.
double phase_latency(int phase, int n_units, const LatencyConfig& cfg);

struct ArrivalSchedule {
  std::map<int, std::vector<int>> arrivals;  // step -> unit ids
  std::vector<int> dropped;                  // never delivered before step M

  bool empty() const { return arrivals.empty(); }
  // Keys must be multiples of `segment` in [0, M); no unit twice.
  void validate(int M, int segment) const;
};

struct LatencyReport {
  double total_latency = 0.0;
  double residual_latency = 0.0;
  std::vector<double> per_phase_overshoot;
};

struct Timeline {
  LatencyReport report;
  ArrivalSchedule schedule;
};

// Extract everything, then transmit, then denoise with the full prompt.
// Unit ids are 0..n_units-1.
Timeline conventional_timeline(int n_units, const LatencyConfig& cfg);
Timeline conventional_timeline(std::span<const int> unit_ids, const LatencyConfig& cfg);

// Parallel extraction and denoising; phases[t] lists the unit ids extracted
// in phase t. Throws EmptyFirstPhase if phase 0 selects nothing.
Timeline pgsc_timeline(const std::vector<std::vector<int>>& phases, const LatencyConfig& cfg);

nlohmann::json to_json(const LatencyReport& report);
nlohmann::json to_json(const LatencyConfig& cfg);
LatencyConfig latency_config_from_json(const nlohmann::json& j, LatencyConfig base = {});

// Columns: phase,n_t,overshoot,arrivals (arrival step, or "dropped").
void write_timeline_csv(std::ostream& out, const std::vector<std::vector<int>>& phases,
                        const Timeline& timeline, const LatencyConfig& cfg);

}  // namespace fastgsc
