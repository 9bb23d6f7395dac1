#include "edgeflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <stdexcept>

#include "edgeflow/errors.hpp"

namespace edgeflow {

const char* span_kind_name(SpanKind k) {
  switch (k) {
    case SpanKind::Handler: return "handler";
    case SpanKind::Load: return "load";
    case SpanKind::Store: return "store";
    case SpanKind::Comm: return "comm";
  }
  return "?";
}

SpanKind span_kind_from(const std::string& name) {
  if (name == "handler") return SpanKind::Handler;
  if (name == "load") return SpanKind::Load;
  if (name == "store") return SpanKind::Store;
  if (name == "comm") return SpanKind::Comm;
  throw Error(Err::InvalidEnvelope, "unknown span kind '" + name + "'");
}

nlohmann::ordered_json span_to_json(const MetricSpan& s) {
  nlohmann::ordered_json j;
  j["kind"] = span_kind_name(s.kind);
  j["workflow"] = s.workflow;
  j["function"] = s.function;
  j["tier"] = s.tier;
  j["request_id"] = s.request_id;
  j["invocation_id"] = s.invocation_id;
  j["start_ms"] = s.start_ms;
  j["duration_ms"] = s.duration_ms;
  if (s.size >= 0)
    j["size"] = s.size;
  else
    j["size"] = nullptr;
  j["failed"] = s.failed;
  if (s.error.empty())
    j["error"] = nullptr;
  else
    j["error"] = s.error;
  j["labels"] = s.labels;
  return j;
}

MetricSpan span_from_json(const nlohmann::json& j) {
  MetricSpan s;
  s.kind = span_kind_from(j.at("kind").get<std::string>());
  s.workflow = j.at("workflow").get<std::string>();
  s.function = j.at("function").get<std::string>();
  s.tier = j.at("tier").get<std::string>();
  s.request_id = j.at("request_id").get<std::string>();
  s.invocation_id = j.at("invocation_id").get<std::string>();
  s.start_ms = j.at("start_ms").get<double>();
  s.duration_ms = j.at("duration_ms").get<double>();
  if (s.duration_ms < 0)
    throw Error(Err::InvalidEnvelope, "negative span duration");
  if (j.contains("size") && !j.at("size").is_null())
    s.size = j.at("size").get<int64_t>();
  s.failed = j.at("failed").get<bool>();
  if (j.contains("error") && !j.at("error").is_null())
    s.error = j.at("error").get<std::string>();
  if (j.contains("labels"))
    s.labels = j.at("labels").get<std::map<std::string, std::string>>();
  return s;
}

void Collector::set_spill_path(const std::string& path) {
  std::lock_guard lk(mu_);
  spill_path_ = path;
}

void Collector::record(MetricSpan span) {
  std::lock_guard lk(mu_);
  spans_.push_back(std::move(span));
  if (!spill_path_.empty() && spans_.size() >= limit_) flush_locked();
}

void Collector::flush_locked() {
  std::ofstream out(spill_path_, std::ios::app | std::ios::binary);
  for (const auto& s : spans_) out << span_to_json(s).dump() << "\n";
  spilled_ += spans_.size();
  spans_.clear();
}

size_t Collector::count() const {
  std::lock_guard lk(mu_);
  return spilled_ + spans_.size();
}

std::vector<MetricSpan> Collector::snapshot() const {
  std::lock_guard lk(mu_);
  return spans_;
}

std::vector<MetricSpan> Collector::all_spans() const {
  std::string path;
  std::vector<MetricSpan> tail;
  {
    std::lock_guard lk(mu_);
    path = spill_path_;
    tail = spans_;
  }
  std::vector<MetricSpan> out;
  if (!path.empty()) {
    std::ifstream in(path, std::ios::binary);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      out.push_back(span_from_json(nlohmann::json::parse(line)));
    }
  }
  out.insert(out.end(), tail.begin(), tail.end());
  return out;
}

double percentile(std::vector<double> samples, double q) {
  if (samples.empty()) throw Error(Err::EmptySamples, "no samples");
  size_t n = samples.size();
  auto rank = static_cast<size_t>(std::ceil(q * static_cast<double>(n)));
  if (rank < 1) rank = 1;
  if (rank > n) rank = n;
  std::nth_element(samples.begin(), samples.begin() + (rank - 1),
                   samples.end());
  return samples[rank - 1];
}

double mean_of(const std::vector<double>& samples) {
  if (samples.empty()) throw Error(Err::EmptySamples, "no samples");
  double sum = 0;
  for (double v : samples) sum += v;
  return sum / static_cast<double>(samples.size());
}

std::vector<RequestOutcome> end_to_end(const std::vector<MetricSpan>& spans) {
  struct Acc {
    double first_start = 0;
    double last_finish = 0;
    bool any = false;
    bool failed = false;
    bool entry_seen = false;
    std::set<std::string> handler_ids;
    std::vector<std::string> comm_children;
  };
  std::map<std::string, Acc> by_request;
  for (const auto& s : spans) {
    Acc& a = by_request[s.request_id];
    double finish = s.start_ms + s.duration_ms;
    if (!a.any || s.start_ms < a.first_start) a.first_start = s.start_ms;
    if (!a.any || finish > a.last_finish) a.last_finish = finish;
    a.any = true;
    if (s.failed) a.failed = true;
    if (s.kind == SpanKind::Handler) {
      a.handler_ids.insert(s.invocation_id);
      auto it = s.labels.find("entry");
      if (it != s.labels.end() && it->second == "1") a.entry_seen = true;
    } else if (s.kind == SpanKind::Comm) {
      auto it = s.labels.find("child_invocation");
      if (it != s.labels.end()) a.comm_children.push_back(it->second);
    }
  }
  std::vector<RequestOutcome> out;
  out.reserve(by_request.size());
  for (auto& [id, a] : by_request) {
    RequestOutcome o;
    o.request_id = id;
    o.failed = a.failed;
    o.complete = a.entry_seen;
    for (const auto& child : a.comm_children) {
      if (!a.handler_ids.count(child)) {
        o.complete = false;
        break;
      }
    }
    o.end_to_end_ms = a.last_finish - a.first_start;
    out.push_back(std::move(o));
  }
  return out;
}

RunReport build_report(const std::vector<MetricSpan>& spans,
                       const std::string& scenario, double time_scale,
                       std::vector<AutoscaleEvent> autoscale) {
  RunReport r;
  r.scenario = scenario;
  r.time_scale = time_scale;
  r.autoscale = std::move(autoscale);

  struct Acc {
    std::string tier;
    int64_t count = 0;
    int64_t failures = 0;
    std::vector<double> samples;
  };
  std::map<std::pair<std::string, int>, Acc> rows;
  for (const auto& s : spans) {
    Acc& a = rows[{s.function, static_cast<int>(s.kind)}];
    if (a.count == 0) a.tier = s.tier;
    ++a.count;
    if (s.failed)
      ++a.failures;
    else
      a.samples.push_back(s.duration_ms);
  }
  for (auto& [key, a] : rows) {
    FunctionRow row;
    row.name = key.first;
    row.kind = static_cast<SpanKind>(key.second);
    row.tier = a.tier;
    row.count = a.count;
    row.failures = a.failures;
    if (!a.samples.empty()) {
      row.mean_ms = mean_of(a.samples);
      row.p95_ms = p95(a.samples);
    }
    r.functions.push_back(std::move(row));
  }

  r.outcomes = end_to_end(spans);
  r.requests = static_cast<int64_t>(r.outcomes.size());
  std::vector<double> e2e;
  for (const auto& o : r.outcomes) {
    if (o.complete) ++r.complete;
    if (o.complete && !o.failed) e2e.push_back(o.end_to_end_ms);
  }
  r.incomplete = r.requests - r.complete;
  if (!e2e.empty()) {
    r.mean_end_to_end_ms = mean_of(e2e);
    r.p95_end_to_end_ms = p95(e2e);
  }
  return r;
}

std::string report_json(const RunReport& r) {
  nlohmann::ordered_json j;
  j["scenario"] = r.scenario;
  j["time_scale"] = r.time_scale;
  j["functions"] = nlohmann::ordered_json::array();
  for (const auto& f : r.functions) {
    nlohmann::ordered_json row;
    row["name"] = f.name;
    row["tier"] = f.tier;
    row["kind"] = span_kind_name(f.kind);
    row["count"] = f.count;
    row["failures"] = f.failures;
    if (f.mean_ms)
      row["mean_ms"] = *f.mean_ms;
    else
      row["mean_ms"] = nullptr;
    if (f.p95_ms)
      row["p95_ms"] = *f.p95_ms;
    else
      row["p95_ms"] = nullptr;
    j["functions"].push_back(std::move(row));
  }
  j["workflow"]["requests"] = r.requests;
  j["workflow"]["complete"] = r.complete;
  j["workflow"]["incomplete"] = r.incomplete;
  if (r.p95_end_to_end_ms)
    j["workflow"]["p95_end_to_end_ms"] = *r.p95_end_to_end_ms;
  else
    j["workflow"]["p95_end_to_end_ms"] = nullptr;
  j["autoscale"] = nlohmann::ordered_json::array();
  for (const auto& a : r.autoscale) {
    nlohmann::ordered_json row;
    row["t_ms"] = a.t_ms;
    row["function"] = a.function;
    row["replicas"] = a.replicas;
    j["autoscale"].push_back(std::move(row));
  }
  return j.dump(2) + "\n";
}

namespace {
std::string fmt_ms(const std::optional<double>& v) {
  if (!v) return "";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3f", *v);
  return buf;
}
}  // namespace

std::string report_csv(const RunReport& r) {
  std::string out = "function,tier,kind,count,failures,mean_ms,p95_ms\n";
  for (const auto& f : r.functions) {
    out += f.name + "," + f.tier + "," + span_kind_name(f.kind) + "," +
           std::to_string(f.count) + "," + std::to_string(f.failures) + "," +
           fmt_ms(f.mean_ms) + "," + fmt_ms(f.p95_ms) + "\n";
  }
  // Summary: count = requests, failures = incomplete trees.
  out += "workflow,,end_to_end," + std::to_string(r.requests) + "," +
         std::to_string(r.incomplete) + "," + fmt_ms(r.mean_end_to_end_ms) +
         "," + fmt_ms(r.p95_end_to_end_ms) + "\n";
  return out;
}

}  // namespace edgeflow
