#pragma once

#include <map>
#include <memory>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "edgeflow/runtime.hpp"

namespace httplib {
class Server;
}

namespace edgeflow {

struct TierDescriptor {
  std::string name;
  std::string base_url;  // empty in pure-simulation runs
  double speed = 1.0;    // handler cost divisor; 1.0 = reference hardware
  std::set<std::string> served_functions;  // empty = serve everything
};

// Validated, order-preserving tier collection.
class TierSet {
 public:
  TierSet() = default;
  explicit TierSet(std::vector<TierDescriptor> tiers);

  bool has(const std::string& name) const;
  const TierDescriptor& at(const std::string& name) const;
  const std::vector<TierDescriptor>& all() const { return tiers_; }
  std::map<std::string, double> speeds() const;

 private:
  std::vector<TierDescriptor> tiers_;
};

// Symmetric one-way link latencies between tiers; a tier reaches itself at
// zero cost, always.
class DelayMatrix {
 public:
  void set(const std::string& a, const std::string& b, double one_way_ms);
  double one_way(const std::string& src, const std::string& dst) const;
  bool empty() const { return one_way_ms_.empty(); }
  // Every distinct pair over the given tiers must have an entry.
  void validate(const TierSet& tiers) const;

 private:
  std::map<std::pair<std::string, std::string>, double> one_way_ms_;
};

// Where a backend's data physically lives.
struct BackendHome {
  std::string name;
  BackendKind kind = BackendKind::Object;
  std::string tier;
};

// Wraps a backend so every operation first pays a fixed round trip on the
// run's clock. Models cross-tier data access in simulation.
std::shared_ptr<Backend> make_delayed_backend(std::shared_ptr<Backend> inner,
                                              Exec& exec,
                                              double round_trip_ms);

struct ClusterConfig {
  TierSet tiers;
  DelayMatrix delays;
  std::vector<BackendHome> backends;
  AutoscalePolicy autoscale;
  double sync_timeout_ms = 30000;
};

// One-process simulation of a multi-tier deployment. Every tier gets its own
// storage view over shared state (non-local backends pay the link round trip
// per operation) and invocations hop tiers through the simulated network:
// one way there, and for sync calls one way back after the downstream chain.
class SimCluster {
 public:
  SimCluster(Exec& exec, const WorkflowGraph& graph, HandlerRegistry& handlers,
             Collector& collector, ClusterConfig cfg, uint64_t run_seed);
  ~SimCluster();

  RuntimeEnv& env_for(const std::string& tier);
  RuntimeEnv& entry_env();  // the entry function's tier
  Counters& counters() { return counters_; }
  PoolSet& pools() { return *pools_; }
  const ClusterConfig& config() const { return cfg_; }

 private:
  struct TierRuntime;
  class NetInvoker;

  Exec& exec_;
  const WorkflowGraph& graph_;
  ClusterConfig cfg_;
  Counters counters_;
  std::unique_ptr<PoolSet> pools_;
  std::unique_ptr<NetInvoker> invoker_;
  std::map<std::string, std::unique_ptr<TierRuntime>> tiers_;
};

// HTTP transport between tier processes: POST /function/{name} on the target
// tier, sync calls waiting for the chain, async ones for the ack.
class RealInvoker : public Invoker {
 public:
  RealInvoker(TierSet tiers, Exec& exec, Collector& collector,
              double sync_timeout_ms = 30000);
  InvokeOutcome invoke(const NextSpec& target, const InvocationEnvelope& env,
                       const SpanCtx& parent) override;

 private:
  TierSet tiers_;
  Exec& exec_;
  Collector& collector_;
  double sync_timeout_ms_;
};

// Storage views for one tier process: backends homed here become live local
// instances (exposed through the tier's data endpoints via `local`); the
// rest become HTTP clients against their home tier's data plane.
void build_tier_backends(const std::string& self_tier,
                         const std::vector<BackendHome>& homes,
                         const TierSet& tiers, BackendRegistry& view,
                         BackendRegistry& local);

// Per-tier HTTP service: function invocation plus this tier's data plane.
// `env` and `local` must outlive the server.
class GatewayServer {
 public:
  GatewayServer(RuntimeEnv& env, TierDescriptor self, BackendRegistry& local);
  ~GatewayServer();

  // Binds and serves on the calling thread until stop().
  void listen(const std::string& host, int port);
  // Binds (an ephemeral port when port = 0) and serves on a background
  // thread; returns the bound port once the socket accepts connections.
  int start_background(const std::string& host, int port = 0);
  // Stops accepting, then drains inflight work.
  void stop();

 private:
  void routes();

  RuntimeEnv& env_;
  TierDescriptor self_;
  BackendRegistry& local_;
  std::unique_ptr<httplib::Server> svr_;
  std::thread thread_;
};

}  // namespace edgeflow
