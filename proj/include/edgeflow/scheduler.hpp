#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "edgeflow/gateway.hpp"

namespace edgeflow {

// One benchmark scenario: which workflow, what load shape, how the tiers
// look, and where the data lives. Parsed from the same flat key-value
// syntax the function templates use.
struct ScenarioConfig {
  enum class Mode { Closed, Cron };

  std::string name = "run";
  std::string workflow_dir;
  Mode mode = Mode::Closed;
  int concurrency = 1;     // closed-loop streams
  double duration_ms = 0;  // declared duration; multiplied by time_scale
  uint64_t seed = 0;
  double time_scale = 1.0 / 60;  // desk-scale compression factor

  std::map<std::string, double> tier_speeds;
  std::map<std::string, std::string> tier_urls;
  std::map<std::string, std::set<std::string>> tier_serves;
  DelayMatrix delays;
  std::vector<BackendHome> backends;
  std::map<std::string, std::string> placement;  // function -> tier
  AutoscalePolicy autoscale;
  double sync_timeout_ms = 30000;
  double failure_budget = 1.0;  // tolerated failed fraction before exit 3
  std::map<std::string, std::string> params;  // workload tuning passthrough

  double effective_duration_ms() const { return duration_ms * time_scale; }
  double scale(double declared_ms) const { return declared_ms * time_scale; }
};

// Accepts "0.5" style decimals and "1/60" style fractions; must be > 0.
double parse_time_scale(const std::string& text);

ScenarioConfig parse_scenario(const std::string& content,
                              const std::string& name_hint = "run");
ScenarioConfig load_scenario_file(const std::string& path);

// Rewrites function tiers (and every successor edge pointing at them) from
// the scenario's place.<function> overrides.
void apply_placement(WorkflowGraph& g,
                     const std::map<std::string, std::string>& placement);

ClusterConfig cluster_config_from(const ScenarioConfig& cfg);

// Deterministic request identifiers shared by the sim and real drivers, so
// twin runs of one scenario meet on the same ids.
std::string closed_loop_request_id(uint64_t seed, int stream, int seq);
std::string cron_request_id(uint64_t seed, int64_t firing, int index);

struct RunStats {
  int issued = 0;
  int ok = 0;
  int failed = 0;        // entry invocations that raised
  int inflight_max = 0;  // concurrent entry requests, driver-side gauge
};

struct RunOutcome {
  RunReport report;
  RunStats stats;
  std::map<std::string, int64_t> counters;
  std::vector<MetricSpan> spans;  // the raw trace behind the report
};

// Runs the scenario on the simulated clock: closed-loop streams (each
// completion immediately triggers the next request) or anchored cron bursts
// at t = k * period for k >= 0 while t < duration. Entry failures are
// counted, never fatal. Fully deterministic for a fixed seed.
RunOutcome run_sim(const ScenarioConfig& cfg, const WorkflowGraph& g,
                   HandlerRegistry& handlers);

// Drives a live deployment through the tier URLs in the scenario, then
// gathers every tier's spans into the report. The autoscale trace stays
// empty: replica state lives in the serving processes.
RunOutcome run_real(const ScenarioConfig& cfg, const WorkflowGraph& g);

}  // namespace edgeflow
