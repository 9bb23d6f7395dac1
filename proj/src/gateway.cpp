#include "edgeflow/gateway.hpp"

#include <algorithm>
#include <chrono>

#include "edgeflow/errors.hpp"
#include "httplib.h"
#include "json.hpp"

namespace edgeflow {

namespace {
using nlohmann::json;
}

TierSet::TierSet(std::vector<TierDescriptor> tiers) : tiers_(std::move(tiers)) {
  std::set<std::string> seen;
  for (const auto& t : tiers_) {
    if (t.name.empty())
      throw Error(Err::InvalidScenario, "tier with empty name");
    if (!seen.insert(t.name).second)
      throw Error(Err::DuplicateKey, "duplicate tier '" + t.name + "'");
    if (!(t.speed > 0))
      throw Error(Err::InvalidScenario,
                  "tier '" + t.name + "' speed must be positive");
  }
}

bool TierSet::has(const std::string& name) const {
  for (const auto& t : tiers_)
    if (t.name == name) return true;
  return false;
}

const TierDescriptor& TierSet::at(const std::string& name) const {
  for (const auto& t : tiers_)
    if (t.name == name) return t;
  throw Error(Err::TierUnreachable, "unknown tier '" + name + "'");
}

std::map<std::string, double> TierSet::speeds() const {
  std::map<std::string, double> out;
  for (const auto& t : tiers_) out[t.name] = t.speed;
  return out;
}

void DelayMatrix::set(const std::string& a, const std::string& b,
                      double one_way_ms) {
  if (one_way_ms < 0)
    throw Error(Err::InvalidScenario, "negative delay " + a + "<->" + b);
  if (a == b && one_way_ms != 0)
    throw Error(Err::InvalidScenario,
                "a tier reaches itself at zero cost: " + a);
  one_way_ms_[{a, b}] = one_way_ms;
  one_way_ms_[{b, a}] = one_way_ms;
}

double DelayMatrix::one_way(const std::string& src,
                            const std::string& dst) const {
  if (src == dst) return 0;
  auto it = one_way_ms_.find({src, dst});
  if (it == one_way_ms_.end())
    throw Error(Err::InvalidScenario,
                "no delay entry for " + src + "<->" + dst);
  return it->second;
}

void DelayMatrix::validate(const TierSet& tiers) const {
  const auto& all = tiers.all();
  for (size_t i = 0; i < all.size(); ++i)
    for (size_t j = i + 1; j < all.size(); ++j)
      one_way(all[i].name, all[j].name);  // throws on a missing pair
}

namespace {

class DelayedBackend final : public Backend {
 public:
  DelayedBackend(std::shared_ptr<Backend> inner, Exec& exec, double rt_ms)
      : inner_(std::move(inner)), exec_(exec), rt_ms_(rt_ms) {}

  int64_t store(const std::string& key, const DataObject& obj) override {
    exec_.sleep_ms(rt_ms_);
    return inner_->store(key, obj);
  }
  DataObject load(const std::string& key) override {
    exec_.sleep_ms(rt_ms_);
    return inner_->load(key);
  }

 private:
  std::shared_ptr<Backend> inner_;
  Exec& exec_;
  double rt_ms_;
};

}  // namespace

std::shared_ptr<Backend> make_delayed_backend(std::shared_ptr<Backend> inner,
                                              Exec& exec,
                                              double round_trip_ms) {
  if (round_trip_ms <= 0) return inner;
  return std::make_shared<DelayedBackend>(std::move(inner), exec,
                                          round_trip_ms);
}

struct SimCluster::TierRuntime {
  BackendRegistry registry;
  RuntimeEnv env;
};

// In-process transport over the delay matrix: sleeps stand in for the wire,
// so on the simulated clock a sync hop costs exactly the round trip plus the
// downstream chain, and an async hop acknowledges after the round trip with
// the child starting one leg later.
class SimCluster::NetInvoker final : public Invoker {
 public:
  explicit NetInvoker(SimCluster& c) : c_(c) {}

  InvokeOutcome invoke(const NextSpec& target, const InvocationEnvelope& env,
                       const SpanCtx& parent) override {
    MetricSpan comm;
    comm.kind = SpanKind::Comm;
    comm.workflow = parent.workflow;
    comm.function = parent.function;
    comm.tier = parent.tier;
    comm.request_id = parent.request_id;
    comm.invocation_id = parent.invocation_id;
    comm.start_ms = c_.exec_.now_ms();
    comm.labels["src_tier"] = parent.tier;
    comm.labels["dst_tier"] = target.tier;
    comm.labels["child_invocation"] = env.invocation_id;

    InvokeOutcome out;
    auto it = c_.tiers_.find(target.tier);
    if (it == c_.tiers_.end()) {
      out.ok = false;
      out.error = "TierUnreachable: unknown tier '" + target.tier + "'";
    } else {
      double ow = c_.cfg_.delays.one_way(parent.tier, target.tier);
      RuntimeEnv& dst = it->second->env;
      if (env.sync == SyncMode::Sync) {
        c_.exec_.sleep_ms(ow);
        double t0 = c_.exec_.now_ms();
        try {
          execute(dst, env);
        } catch (const Error& e) {
          out.ok = false;
          out.error = e.what();
        }
        double downstream = c_.exec_.now_ms() - t0;
        c_.exec_.sleep_ms(ow);
        if (out.ok && downstream > c_.cfg_.sync_timeout_ms) {
          out.ok = false;
          out.error = "Timeout: '" + target.tier + "' exceeded " +
                      std::to_string(c_.cfg_.sync_timeout_ms) + " ms";
        }
      } else {
        InvocationEnvelope child = env;
        c_.exec_.spawn([this, child, &dst, ow] {
          c_.exec_.sleep_ms(ow);
          try {
            execute(dst, child);
          } catch (const std::exception&) {
            // Async failures stay on their own failed spans.
          }
        });
        c_.exec_.sleep_ms(2 * ow);
      }
    }
    comm.duration_ms = c_.exec_.now_ms() - comm.start_ms;
    comm.failed = !out.ok;
    if (!out.ok) comm.error = out.error;
    c_.env_for(parent.tier).collector->record(std::move(comm));
    return out;
  }

 private:
  SimCluster& c_;
};

SimCluster::SimCluster(Exec& exec, const WorkflowGraph& graph,
                       HandlerRegistry& handlers, Collector& collector,
                       ClusterConfig cfg, uint64_t run_seed)
    : exec_(exec), graph_(graph), cfg_(std::move(cfg)) {
  if (cfg_.tiers.all().empty())
    throw Error(Err::InvalidScenario, "no tiers configured");
  cfg_.delays.validate(cfg_.tiers);

  std::set<std::string> backend_names;
  for (const auto& h : cfg_.backends) {
    if (!backend_names.insert(h.name).second)
      throw Error(Err::DuplicateKey, "duplicate backend '" + h.name + "'");
    if (!cfg_.tiers.has(h.tier))
      throw Error(Err::InvalidScenario, "backend '" + h.name +
                                            "' homed on unknown tier '" +
                                            h.tier + "'");
  }
  for (const auto& [name, node] : graph_.nodes) {
    if (!cfg_.tiers.has(node.tier))
      throw Error(Err::InvalidScenario, "function '" + name +
                                            "' placed on unknown tier '" +
                                            node.tier + "'");
    for (const auto& [branch, nx] : node.nexts) {
      (void)branch;
      const auto& child = graph_.nodes.at(nx.function);
      if (nx.tier != child.tier)
        throw Error(Err::InvalidScenario,
                    "'" + name + "' targets '" + nx.function + "' on '" +
                        nx.tier + "' but it runs on '" + child.tier + "'");
    }
  }

  pools_ = std::make_unique<PoolSet>(exec_, cfg_.autoscale);
  invoker_ = std::make_unique<NetInvoker>(*this);

  std::map<std::string, std::shared_ptr<Backend>> shared;
  for (const auto& h : cfg_.backends)
    shared[h.name] = h.kind == BackendKind::Queue ? make_queue_backend()
                                                  : make_memory_backend();

  auto speeds = cfg_.tiers.speeds();
  for (const auto& t : cfg_.tiers.all()) {
    auto rt = std::make_unique<TierRuntime>();
    rt->registry.set_clock(
        [this] { return static_cast<int64_t>(exec_.now_ms()); });
    for (const auto& h : cfg_.backends) {
      double round_trip = 2 * cfg_.delays.one_way(t.name, h.tier);
      rt->registry.add(h.name, h.kind,
                       make_delayed_backend(shared[h.name], exec_, round_trip));
    }
    rt->env.exec = &exec_;
    rt->env.graph = &graph_;
    rt->env.backends = &rt->registry;
    rt->env.handlers = &handlers;
    rt->env.collector = &collector;
    rt->env.invoker = invoker_.get();
    rt->env.counters = &counters_;
    rt->env.pools = pools_.get();
    rt->env.tier_speeds = speeds;
    rt->env.run_seed = run_seed;
    tiers_[t.name] = std::move(rt);
  }
}

SimCluster::~SimCluster() = default;

RuntimeEnv& SimCluster::env_for(const std::string& tier) {
  auto it = tiers_.find(tier);
  if (it == tiers_.end())
    throw Error(Err::TierUnreachable, "unknown tier '" + tier + "'");
  return it->second->env;
}

RuntimeEnv& SimCluster::entry_env() {
  return env_for(graph_.nodes.at(graph_.entry).tier);
}

RealInvoker::RealInvoker(TierSet tiers, Exec& exec, Collector& collector,
                         double sync_timeout_ms)
    : tiers_(std::move(tiers)),
      exec_(exec),
      collector_(collector),
      sync_timeout_ms_(sync_timeout_ms) {}

InvokeOutcome RealInvoker::invoke(const NextSpec& target,
                                  const InvocationEnvelope& env,
                                  const SpanCtx& parent) {
  MetricSpan comm;
  comm.kind = SpanKind::Comm;
  comm.workflow = parent.workflow;
  comm.function = parent.function;
  comm.tier = parent.tier;
  comm.request_id = parent.request_id;
  comm.invocation_id = parent.invocation_id;
  comm.start_ms = exec_.now_ms();
  comm.labels["src_tier"] = parent.tier;
  comm.labels["dst_tier"] = target.tier;
  comm.labels["child_invocation"] = env.invocation_id;

  InvokeOutcome out;
  if (!tiers_.has(target.tier) || tiers_.at(target.tier).base_url.empty()) {
    out.ok = false;
    out.error = "TierUnreachable: no address for tier '" + target.tier + "'";
  } else {
    httplib::Client cli(tiers_.at(target.tier).base_url);
    cli.set_connection_timeout(std::chrono::seconds(5));
    auto budget =
        std::chrono::milliseconds(static_cast<int64_t>(sync_timeout_ms_));
    cli.set_read_timeout(budget);
    cli.set_write_timeout(budget);
    auto res = cli.Post("/function/" + env.function,
                        envelope_to_json(env).dump(), "application/json");
    if (!res) {
      auto err = res.error();
      bool timed_out = err == httplib::Error::ConnectionTimeout ||
                       err == httplib::Error::Read;
      out.ok = false;
      out.error = timed_out
                      ? "Timeout: tier '" + target.tier + "' did not answer"
                      : "TierUnreachable: '" + target.tier + "' (" +
                            httplib::to_string(err) + ")";
    } else if (res->status == 200 || res->status == 202) {
      out.ok = true;
    } else {
      out.ok = false;
      std::string detail = res->body;
      try {
        auto j = json::parse(res->body);
        if (j.contains("error")) detail = j["error"].get<std::string>();
      } catch (const json::exception&) {
      }
      out.error = (res->status == 504 ? "Timeout: " : "") + detail +
                  " (status " + std::to_string(res->status) + ")";
    }
  }
  comm.duration_ms = exec_.now_ms() - comm.start_ms;
  comm.failed = !out.ok;
  if (!out.ok) comm.error = out.error;
  collector_.record(std::move(comm));
  return out;
}

void build_tier_backends(const std::string& self_tier,
                         const std::vector<BackendHome>& homes,
                         const TierSet& tiers, BackendRegistry& view,
                         BackendRegistry& local) {
  for (const auto& h : homes) {
    if (h.tier == self_tier) {
      auto impl = h.kind == BackendKind::Queue ? make_queue_backend()
                                               : make_memory_backend();
      view.add(h.name, h.kind, impl);
      local.add(h.name, h.kind, impl);
    } else {
      const auto& home = tiers.at(h.tier);
      if (home.base_url.empty())
        throw Error(Err::InvalidScenario,
                    "backend '" + h.name + "' homed on addressless tier '" +
                        h.tier + "'");
      view.add(h.name, h.kind,
               make_remote_backend(home.base_url, h.kind, h.name + "/"));
    }
  }
}

GatewayServer::GatewayServer(RuntimeEnv& env, TierDescriptor self,
                             BackendRegistry& local)
    : env_(env),
      self_(std::move(self)),
      local_(local),
      svr_(std::make_unique<httplib::Server>()) {
  validate_startup(*env_.graph, *env_.handlers, *env_.backends);
  svr_->new_task_queue = [] { return new httplib::ThreadPool(32); };
  routes();
}

GatewayServer::~GatewayServer() { stop(); }

namespace {

void json_error(httplib::Response& res, int status, const std::string& msg) {
  json j;
  j["error"] = msg;
  res.status = status;
  res.set_content(j.dump(), "application/json");
}

// The data plane shares one key namespace per tier: the first path segment
// names the backend, the rest is the key within it.
bool split_backend_key(const std::string& path, std::string& backend,
                       std::string& key) {
  auto slash = path.find('/');
  if (slash == std::string::npos || slash == 0 || slash + 1 >= path.size())
    return false;
  backend = path.substr(0, slash);
  key = path.substr(slash + 1);
  return true;
}

}  // namespace

void GatewayServer::routes() {
  svr_->Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
    res.set_content("ok", "text/plain");
  });

  svr_->Get("/metrics", [this](const httplib::Request&,
                               httplib::Response& res) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& s : env_.collector->snapshot())
      arr.push_back(span_to_json(s));
    res.set_content(arr.dump(), "application/json");
  });

  svr_->Post(R"(/function/([^/]+))", [this](const httplib::Request& req,
                                            httplib::Response& res) {
    std::string name = req.matches[1];
    if (!env_.graph->nodes.count(name) ||
        (!self_.served_functions.empty() &&
         !self_.served_functions.count(name))) {
      json_error(res, 404, "unknown function '" + name + "'");
      return;
    }
    InvocationEnvelope env;
    try {
      env = envelope_from_json(json::parse(req.body, nullptr, true));
    } catch (const Error& e) {
      json_error(res, 422, e.what());
      return;
    } catch (const json::exception& e) {
      json_error(res, 422, std::string("invalid envelope: ") + e.what());
      return;
    }
    if (env.function != name) {
      json_error(res, 422, "envelope function '" + env.function +
                               "' does not match path '" + name + "'");
      return;
    }
    if (env.sync == SyncMode::Async) {
      InvocationEnvelope copy = env;
      RuntimeEnv* renv = &env_;
      env_.exec->spawn([renv, copy] {
        try {
          execute(*renv, copy);
        } catch (const std::exception&) {
          // Surfaced via the failed spans this invocation recorded.
        }
      });
      json j;
      j["request_id"] = env.request_id;
      res.status = 202;
      res.set_content(j.dump(), "application/json");
      return;
    }
    double t0 = env_.exec->now_ms();
    try {
      ExecutionResult result = execute(env_, env);
      json j;
      j["request_id"] = env.request_id;
      j["end_to_end_ms"] = env_.exec->now_ms() - t0;
      j["outputs"] = result.output_refs;
      res.set_content(j.dump(), "application/json");
    } catch (const Error& e) {
      bool timeout = e.code() == Err::Timeout ||
                     std::string(e.what()).find("Timeout") !=
                         std::string::npos;
      json_error(res, timeout ? 504 : 500, e.what());
    } catch (const std::exception& e) {
      json_error(res, 500, e.what());
    }
  });

  svr_->Put(R"(/data/(.+))", [this](const httplib::Request& req,
                                    httplib::Response& res) {
    std::string backend, key;
    if (!split_backend_key(req.matches[1], backend, key) ||
        !local_.has(backend) || local_.kind(backend) != BackendKind::Object) {
      json_error(res, 404, "no such data backend");
      return;
    }
    try {
      int64_t size = local_.store(StorageRef{backend, key}, req.body);
      json j;
      j["size"] = size;
      res.set_content(j.dump(), "application/json");
    } catch (const Error& e) {
      json_error(res, 500, e.what());
    }
  });

  svr_->Get(R"(/data/(.+))", [this](const httplib::Request& req,
                                    httplib::Response& res) {
    std::string backend, key;
    if (!split_backend_key(req.matches[1], backend, key) ||
        !local_.has(backend) || local_.kind(backend) != BackendKind::Object) {
      json_error(res, 404, "no such data backend");
      return;
    }
    try {
      DataObject obj = local_.load(StorageRef{backend, key});
      res.set_content(obj.bytes, "application/octet-stream");
    } catch (const Error& e) {
      json_error(res, e.code() == Err::NotFound ? 404 : 500, e.what());
    }
  });

  svr_->Post(R"(/queue/(.+))", [this](const httplib::Request& req,
                                      httplib::Response& res) {
    std::string backend, key;
    if (!split_backend_key(req.matches[1], backend, key) ||
        !local_.has(backend) || local_.kind(backend) != BackendKind::Queue) {
      json_error(res, 404, "no such queue backend");
      return;
    }
    try {
      int64_t size = local_.store(StorageRef{backend, key}, req.body);
      json j;
      j["size"] = size;
      res.set_content(j.dump(), "application/json");
    } catch (const Error& e) {
      json_error(res, 500, e.what());
    }
  });

  svr_->Delete(R"(/queue/(.+))", [this](const httplib::Request& req,
                                        httplib::Response& res) {
    std::string backend, key;
    if (!split_backend_key(req.matches[1], backend, key) ||
        !local_.has(backend) || local_.kind(backend) != BackendKind::Queue) {
      json_error(res, 404, "no such queue backend");
      return;
    }
    try {
      DataObject obj = local_.load(StorageRef{backend, key});
      res.set_content(obj.bytes, "application/octet-stream");
    } catch (const Error& e) {
      json_error(res, e.code() == Err::NotFound ? 404 : 500, e.what());
    }
  });
}

void GatewayServer::listen(const std::string& host, int port) {
  if (!svr_->bind_to_port(host, port))
    throw Error(Err::BindError,
                host + ":" + std::to_string(port) + " is not bindable");
  svr_->listen_after_bind();
}

int GatewayServer::start_background(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = svr_->bind_to_any_port(host);
    if (bound < 0)
      throw Error(Err::BindError, host + ": no ephemeral port available");
  } else if (!svr_->bind_to_port(host, port)) {
    throw Error(Err::BindError,
                host + ":" + std::to_string(port) + " is not bindable");
  }
  thread_ = std::thread([this] { svr_->listen_after_bind(); });
  svr_->wait_until_ready();
  return bound;
}

void GatewayServer::stop() {
  if (svr_ && svr_->is_running()) svr_->stop();
  if (thread_.joinable()) thread_.join();
  // Drain: async invocations spawned by request handlers are tracked by the
  // executor; wait for them so /metrics and shutdown see complete traces.
  if (env_.exec && !env_.exec->simulated()) env_.exec->run_until_idle();
}

}  // namespace edgeflow
