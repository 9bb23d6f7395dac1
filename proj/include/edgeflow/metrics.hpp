#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace edgeflow {

enum class SpanKind { Handler, Load, Store, Comm };

const char* span_kind_name(SpanKind k);
SpanKind span_kind_from(const std::string& name);

// One timed segment of work. Spans from every module and process share this
// shape and are joined by request_id when the report is built.
struct MetricSpan {
  SpanKind kind = SpanKind::Handler;
  std::string workflow;
  std::string function;
  std::string tier;
  std::string request_id;
  std::string invocation_id;
  double start_ms = 0.0;
  double duration_ms = 0.0;
  int64_t size = -1;  // byte count for Load/Store; -1 = not applicable
  bool failed = false;
  std::string error;  // empty = none
  std::map<std::string, std::string> labels;
};

nlohmann::ordered_json span_to_json(const MetricSpan& s);
MetricSpan span_from_json(const nlohmann::json& j);

// Append-only span sink, safe from any number of concurrent recorders.
// Beyond `limit` spans the buffer is flushed to `spill_path` (JSON lines)
// so long runs cannot exhaust memory.
class Collector {
 public:
  explicit Collector(size_t limit = 1000000) : limit_(limit) {}

  void set_spill_path(const std::string& path);
  void record(MetricSpan span);
  size_t count() const;                      // recorded total, spilled included
  std::vector<MetricSpan> snapshot() const;  // in-memory tail only
  std::vector<MetricSpan> all_spans() const;  // spill file + memory, in order

 private:
  void flush_locked();

  mutable std::mutex mu_;
  size_t limit_;
  std::string spill_path_;
  std::vector<MetricSpan> spans_;
  size_t spilled_ = 0;
};

// Nearest-rank percentile: sort ascending, take the 1-based element at
// ceil(q * n). Throws on an empty sample set.
double percentile(std::vector<double> samples, double q);
inline double p95(std::vector<double> samples) {
  return percentile(std::move(samples), 0.95);
}
double mean_of(const std::vector<double>& samples);

struct FunctionRow {
  std::string name;
  std::string tier;
  SpanKind kind = SpanKind::Handler;
  int64_t count = 0;
  int64_t failures = 0;
  std::optional<double> mean_ms;
  std::optional<double> p95_ms;
};

struct RequestOutcome {
  std::string request_id;
  bool complete = false;
  bool failed = false;
  double end_to_end_ms = 0.0;  // meaningful when complete
};

struct AutoscaleEvent {
  double t_ms = 0.0;
  std::string function;
  int replicas = 0;
};

struct RunReport {
  std::string scenario;
  double time_scale = 1.0;
  std::vector<FunctionRow> functions;
  int64_t requests = 0;
  int64_t complete = 0;
  int64_t incomplete = 0;
  std::optional<double> p95_end_to_end_ms;
  std::optional<double> mean_end_to_end_ms;
  std::vector<AutoscaleEvent> autoscale;
  std::vector<RequestOutcome> outcomes;  // per request, id-sorted
};

// Joins spans by request. A request's tree is complete when its entry
// invocation produced a span and every communication span's recorded child
// invocation also produced one. Failed requests keep their completeness but
// are excluded from latency statistics.
std::vector<RequestOutcome> end_to_end(const std::vector<MetricSpan>& spans);

RunReport build_report(const std::vector<MetricSpan>& spans,
                       const std::string& scenario, double time_scale,
                       std::vector<AutoscaleEvent> autoscale);

std::string report_json(const RunReport& r);
std::string report_csv(const RunReport& r);

}  // namespace edgeflow
