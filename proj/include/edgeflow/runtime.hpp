#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "edgeflow/exec.hpp"
#include "edgeflow/graph.hpp"
#include "edgeflow/metrics.hpp"
#include "edgeflow/rng.hpp"
#include "edgeflow/storage.hpp"
#include "json.hpp"

namespace edgeflow {

// Wire form of one function invocation. request_id is constant along a
// chain; invocation ids and parent links form a tree rooted at the entry.
struct InvocationEnvelope {
  int version = 1;
  std::string workflow;
  std::string request_id;
  std::string invocation_id;
  std::optional<std::string> parent_id;
  std::string function;
  int hop = 0;
  std::vector<std::string> data_keys;  // serialized refs handed to children
  int64_t issued_at = 0;               // ms
  SyncMode sync = SyncMode::Sync;
};

nlohmann::ordered_json envelope_to_json(const InvocationEnvelope& env);
InvocationEnvelope envelope_from_json(const nlohmann::json& j);

InvocationEnvelope make_entry_envelope(const std::string& workflow,
                                       const std::string& function,
                                       const std::string& request_id,
                                       SyncMode sync, int64_t issued_at_ms);

// Deterministic child id: a function of the parent invocation id, the child
// index, and the child function, so reruns and both execution modes agree.
std::string child_invocation_id(const std::string& parent_invocation_id,
                                int child_index,
                                const std::string& child_function);

struct NamedObject {
  std::string data_name;
  std::string bytes;
};

class HandlerCtx;
using HandlerFn = std::function<std::vector<NamedObject>(
    HandlerCtx&, const std::vector<DataObject>&)>;

class HandlerRegistry {
 public:
  void add(const std::string& id, HandlerFn fn);
  bool has(const std::string& id) const;
  const HandlerFn& get(const std::string& id) const;
  std::vector<std::string> names() const;

 private:
  std::map<std::string, HandlerFn> entries_;
};

// Run-wide named counters for workload accounting (frame counts, branch
// takes, query coverage); concurrent-safe.
class Counters {
 public:
  void inc(const std::string& name, int64_t by = 1);
  int64_t get(const std::string& name) const;
  std::map<std::string, int64_t> snapshot() const;

 private:
  mutable std::mutex mu_;
  std::map<std::string, int64_t> values_;
};

struct AutoscalePolicy {
  int min_replicas = 25;
  int max_replicas = 100;
  double factor = 0.25;
  double high_watermark = 1.0;  // inflight per replica that triggers growth
  double low_watermark = 0.25;
  double cooldown_ms = 2000;
  double tick_ms = 500;
};

// One watermark decision, no cooldown: grow to ceil(r*(1+factor)) above the
// high watermark, shrink to floor(r*(1-factor)) below the low one, clamped
// to [min, max].
int autoscale_tick(int replicas, double inflight, const AutoscalePolicy& p);

// Per-function admission pools. A replica is a slot bounding concurrent
// handler executions, scaled by the watermark rule above.
class PoolSet {
 public:
  PoolSet(Exec& exec, AutoscalePolicy policy);

  void ensure(const std::string& function);
  Slots& slots(const std::string& function);
  void on_enter(const std::string& function);  // inflight gauge ++
  void on_exit(const std::string& function);
  int inflight(const std::string& function) const;
  int inflight_peak(const std::string& function) const;
  int replicas(const std::string& function) const;
  const AutoscalePolicy& policy() const { return policy_; }

  // Applies the watermark rule to one pool under the cooldown, recording a
  // trace event on change. `inflight` lets tests drive synthetic load.
  int tick_one(const std::string& function, double inflight, double now_ms);
  void tick_all(double now_ms);  // uses live gauges

  std::vector<AutoscaleEvent> trace() const;

 private:
  struct Pool {
    std::shared_ptr<Slots> slots;
    std::atomic<int> inflight{0};
    std::atomic<int> peak{0};
    int replicas = 0;
    double last_scale_ms = -1e18;
  };
  Pool& pool(const std::string& function);
  const Pool& pool(const std::string& function) const;

  Exec& exec_;
  AutoscalePolicy policy_;
  mutable std::mutex mu_;
  std::map<std::string, std::unique_ptr<Pool>> pools_;
  std::vector<AutoscaleEvent> trace_;
};

struct InvokeOutcome {
  bool ok = true;
  std::string error;
};

// Transport seam: carries an envelope to a (function, tier) target and emits
// the Comm span. Sync invocations return after the downstream chain
// finishes; async ones after the handoff is acknowledged.
class Invoker {
 public:
  virtual ~Invoker() = default;
  virtual InvokeOutcome invoke(const NextSpec& target,
                               const InvocationEnvelope& env,
                               const SpanCtx& parent) = 0;
};

// Everything one invocation needs; one instance per serving tier (real
// mode) or per run (sim mode, where it spans all tiers).
struct RuntimeEnv {
  Exec* exec = nullptr;
  const WorkflowGraph* graph = nullptr;
  BackendRegistry* backends = nullptr;
  HandlerRegistry* handlers = nullptr;
  Collector* collector = nullptr;
  Invoker* invoker = nullptr;
  Counters* counters = nullptr;  // optional
  PoolSet* pools = nullptr;      // optional admission control
  std::map<std::string, double> tier_speeds;
  uint64_t run_seed = 0;

  double speed_of(const std::string& tier) const;
};

// What a handler sees: its envelope, a deterministic seed, the virtual (or
// wall) clock, and cost realization scaled by the tier's speed factor.
class HandlerCtx {
 public:
  HandlerCtx(RuntimeEnv& env, const InvocationEnvelope& envelope,
             std::string tier, double speed);

  Exec& exec();
  const InvocationEnvelope& envelope() const { return env_; }
  const std::string& tier() const { return tier_; }
  double speed() const { return speed_; }
  uint64_t seed() const { return seed_; }
  Rng rng() const { return Rng(seed_); }
  Counters& counters();

  // Occupies this invocation's replica slot for cost_ms / speed.
  void compute(double cost_ms);

  // Read that tolerates absence (cold caches): emits a non-failed Load span
  // labeled state=cold instead of an error when the key is missing.
  std::optional<DataObject> load_optional(const StorageRef& ref);

 private:
  friend struct ExecuteScope;
  RuntimeEnv& renv_;
  const InvocationEnvelope& env_;
  std::string tier_;
  double speed_;
  uint64_t seed_;
  SpanCtx span_ctx_;
};

struct ExecutionResult {
  std::vector<std::string> output_refs;  // serialized concrete refs
};

// Runs one invocation end to end: load declared inputs (substituting the
// concrete per-request keys the parent handed over), run the handler, store
// outputs, resolve successors from the produced data names, and invoke them.
// Every invocation emits exactly one Handler span; failures before the
// handler emit it failed with zero duration. Throws on failure after
// recording the failed span.
ExecutionResult execute(RuntimeEnv& env, const InvocationEnvelope& envelope);

// Serving-time sweep: every handler referenced by the graph resolves and
// every backend named by any ref is registered. Throws StartupValidation
// naming all misses.
void validate_startup(const WorkflowGraph& g, const HandlerRegistry& handlers,
                      const BackendRegistry& backends);

}  // namespace edgeflow
