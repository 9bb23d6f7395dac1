#include "edgeflow/runtime.hpp"

#include <algorithm>
#include <cmath>

#include "edgeflow/errors.hpp"

namespace edgeflow {

nlohmann::ordered_json envelope_to_json(const InvocationEnvelope& env) {
  nlohmann::ordered_json j;
  j["version"] = env.version;
  j["workflow"] = env.workflow;
  j["request_id"] = env.request_id;
  j["invocation_id"] = env.invocation_id;
  if (env.parent_id)
    j["parent_id"] = *env.parent_id;
  else
    j["parent_id"] = nullptr;
  j["function"] = env.function;
  j["hop"] = env.hop;
  j["data_keys"] = env.data_keys;
  j["issued_at"] = env.issued_at;
  j["sync"] = env.sync == SyncMode::Sync ? "sync" : "async";
  return j;
}

InvocationEnvelope envelope_from_json(const nlohmann::json& j) {
  try {
    InvocationEnvelope env;
    env.version = j.at("version").get<int>();
    if (env.version != 1)
      throw Error(Err::InvalidEnvelope,
                  "unsupported envelope version " +
                      std::to_string(env.version));
    env.workflow = j.at("workflow").get<std::string>();
    env.request_id = j.at("request_id").get<std::string>();
    env.invocation_id = j.at("invocation_id").get<std::string>();
    if (!j.at("parent_id").is_null())
      env.parent_id = j.at("parent_id").get<std::string>();
    env.function = j.at("function").get<std::string>();
    env.hop = j.at("hop").get<int>();
    if (env.hop < 0) throw Error(Err::InvalidEnvelope, "negative hop");
    env.data_keys = j.at("data_keys").get<std::vector<std::string>>();
    env.issued_at = j.at("issued_at").get<int64_t>();
    std::string sync = j.at("sync").get<std::string>();
    if (sync == "sync")
      env.sync = SyncMode::Sync;
    else if (sync == "async")
      env.sync = SyncMode::Async;
    else
      throw Error(Err::InvalidEnvelope, "sync must be 'sync' or 'async'");
    if (env.workflow.empty() || env.request_id.empty() ||
        env.invocation_id.empty() || env.function.empty())
      throw Error(Err::InvalidEnvelope, "empty identity field");
    return env;
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(Err::InvalidEnvelope, e.what());
  }
}

InvocationEnvelope make_entry_envelope(const std::string& workflow,
                                       const std::string& function,
                                       const std::string& request_id,
                                       SyncMode sync, int64_t issued_at_ms) {
  InvocationEnvelope env;
  env.workflow = workflow;
  env.function = function;
  env.request_id = request_id;
  env.invocation_id =
      uuid_from(mix64(hash_str(request_id), 0xe4712f00dULL),
                hash_str(function));
  env.hop = 0;
  env.issued_at = issued_at_ms;
  env.sync = sync;
  return env;
}

std::string child_invocation_id(const std::string& parent_invocation_id,
                                int child_index,
                                const std::string& child_function) {
  uint64_t a = mix64(hash_str(parent_invocation_id),
                     static_cast<uint64_t>(child_index) *
                             0x9E3779B97F4A7C15ULL +
                         1);
  return uuid_from(a, hash_str(child_function));
}

void HandlerRegistry::add(const std::string& id, HandlerFn fn) {
  if (entries_.count(id))
    throw Error(Err::DuplicateHandler, "handler '" + id + "' already exists");
  entries_[id] = std::move(fn);
}

bool HandlerRegistry::has(const std::string& id) const {
  return entries_.count(id) > 0;
}

const HandlerFn& HandlerRegistry::get(const std::string& id) const {
  auto it = entries_.find(id);
  if (it == entries_.end())
    throw Error(Err::StartupValidation, "handler '" + id + "' not registered");
  return it->second;
}

std::vector<std::string> HandlerRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : entries_) out.push_back(k);
  return out;
}

void Counters::inc(const std::string& name, int64_t by) {
  std::lock_guard lk(mu_);
  values_[name] += by;
}

int64_t Counters::get(const std::string& name) const {
  std::lock_guard lk(mu_);
  auto it = values_.find(name);
  return it == values_.end() ? 0 : it->second;
}

std::map<std::string, int64_t> Counters::snapshot() const {
  std::lock_guard lk(mu_);
  return values_;
}

int autoscale_tick(int replicas, double inflight, const AutoscalePolicy& p) {
  double ratio = inflight / static_cast<double>(replicas);
  if (ratio > p.high_watermark) {
    int grown = static_cast<int>(
        std::ceil(static_cast<double>(replicas) * (1.0 + p.factor)));
    return std::min(p.max_replicas, grown);
  }
  if (ratio < p.low_watermark) {
    int shrunk = static_cast<int>(
        std::floor(static_cast<double>(replicas) * (1.0 - p.factor)));
    return std::max(p.min_replicas, shrunk);
  }
  return replicas;
}

PoolSet::PoolSet(Exec& exec, AutoscalePolicy policy)
    : exec_(exec), policy_(policy) {}

void PoolSet::ensure(const std::string& function) {
  std::lock_guard lk(mu_);
  auto& slot = pools_[function];
  if (!slot) {
    slot = std::make_unique<Pool>();
    slot->replicas = policy_.min_replicas;
    slot->slots = exec_.make_slots(policy_.min_replicas);
  }
}

PoolSet::Pool& PoolSet::pool(const std::string& function) {
  std::lock_guard lk(mu_);
  auto it = pools_.find(function);
  if (it == pools_.end())
    throw Error(Err::StartupValidation, "no pool for '" + function + "'");
  return *it->second;
}

const PoolSet::Pool& PoolSet::pool(const std::string& function) const {
  return const_cast<PoolSet*>(this)->pool(function);
}

Slots& PoolSet::slots(const std::string& function) {
  return *pool(function).slots;
}

void PoolSet::on_enter(const std::string& function) {
  Pool& p = pool(function);
  int cur = ++p.inflight;
  int prev = p.peak.load();
  while (cur > prev && !p.peak.compare_exchange_weak(prev, cur)) {
  }
}

void PoolSet::on_exit(const std::string& function) { --pool(function).inflight; }

int PoolSet::inflight(const std::string& function) const {
  return pool(function).inflight.load();
}

int PoolSet::inflight_peak(const std::string& function) const {
  return pool(function).peak.load();
}

int PoolSet::replicas(const std::string& function) const {
  std::lock_guard lk(mu_);
  auto it = pools_.find(function);
  if (it == pools_.end())
    throw Error(Err::StartupValidation, "no pool for '" + function + "'");
  return it->second->replicas;
}

int PoolSet::tick_one(const std::string& function, double inflight,
                      double now_ms) {
  Pool& p = pool(function);
  std::lock_guard lk(mu_);
  if (now_ms - p.last_scale_ms < policy_.cooldown_ms) return p.replicas;
  int next = autoscale_tick(p.replicas, inflight, policy_);
  if (next != p.replicas) {
    p.replicas = next;
    p.last_scale_ms = now_ms;
    p.slots->set_capacity(next);
    trace_.push_back(AutoscaleEvent{now_ms, function, next});
  }
  return p.replicas;
}

void PoolSet::tick_all(double now_ms) {
  std::vector<std::string> names;
  {
    std::lock_guard lk(mu_);
    for (const auto& [name, p] : pools_) names.push_back(name);
  }
  for (const auto& name : names)
    tick_one(name, pool(name).inflight.load(), now_ms);
}

std::vector<AutoscaleEvent> PoolSet::trace() const {
  std::lock_guard lk(mu_);
  return trace_;
}

double RuntimeEnv::speed_of(const std::string& tier) const {
  auto it = tier_speeds.find(tier);
  return it == tier_speeds.end() ? 1.0 : it->second;
}

HandlerCtx::HandlerCtx(RuntimeEnv& env, const InvocationEnvelope& envelope,
                       std::string tier, double speed)
    : renv_(env),
      env_(envelope),
      tier_(std::move(tier)),
      speed_(speed),
      seed_(mix64(env.run_seed, mix64(hash_str(envelope.request_id),
                                      hash_str(envelope.function)))) {
  span_ctx_ = SpanCtx{env.graph ? env.graph->workflow_name : envelope.workflow,
                      envelope.function, tier_, envelope.request_id,
                      envelope.invocation_id};
}

Exec& HandlerCtx::exec() { return *renv_.exec; }

Counters& HandlerCtx::counters() {
  static Counters fallback;
  return renv_.counters ? *renv_.counters : fallback;
}

void HandlerCtx::compute(double cost_ms) {
  if (cost_ms <= 0) return;
  renv_.exec->sleep_ms(cost_ms / speed_);
}

std::optional<DataObject> HandlerCtx::load_optional(const StorageRef& ref) {
  MetricSpan s;
  s.kind = SpanKind::Load;
  s.workflow = span_ctx_.workflow;
  s.function = span_ctx_.function;
  s.tier = span_ctx_.tier;
  s.request_id = span_ctx_.request_id;
  s.invocation_id = span_ctx_.invocation_id;
  s.start_ms = renv_.exec->now_ms();
  s.labels["backend"] = ref.backend;
  s.labels["key"] = ref.key;
  try {
    DataObject obj = renv_.backends->load(ref);
    s.duration_ms = renv_.exec->now_ms() - s.start_ms;
    s.size = obj.size;
    renv_.collector->record(std::move(s));
    return obj;
  } catch (const Error& e) {
    s.duration_ms = renv_.exec->now_ms() - s.start_ms;
    if (e.code() == Err::NotFound) {
      s.labels["state"] = "cold";
      renv_.collector->record(std::move(s));
      return std::nullopt;
    }
    s.failed = true;
    s.error = std::string(err_name(e.code())) + ": " + e.what();
    renv_.collector->record(std::move(s));
    throw;
  }
}

namespace {

// Parent-produced concrete keys override matching declared refs: a handed
// key matches when it is the declared key or sits under "<declared-key>/".
StorageRef substitute(const StorageRef& declared,
                      const std::vector<std::string>& data_keys) {
  for (const std::string& serialized : data_keys) {
    StorageRef r;
    try {
      r = parse_storage_ref(serialized);
    } catch (const Error&) {
      continue;
    }
    if (r.backend == declared.backend &&
        (r.key == declared.key ||
         r.key.rfind(declared.key + "/", 0) == 0))
      return r;
  }
  return declared;
}

struct PoolGuard {
  PoolSet* pools;
  const std::string& function;
  bool held = false;

  PoolGuard(PoolSet* p, const std::string& fn) : pools(p), function(fn) {
    if (pools) {
      pools->ensure(function);
      pools->on_enter(function);
      pools->slots(function).acquire();
      held = true;
    }
  }
  ~PoolGuard() {
    if (held) {
      pools->slots(function).release();
      pools->on_exit(function);
    }
  }
};

}  // namespace

ExecutionResult execute(RuntimeEnv& renv, const InvocationEnvelope& env) {
  Exec& ex = *renv.exec;
  const WorkflowGraph& g = *renv.graph;
  auto node_it = g.nodes.find(env.function);
  if (node_it == g.nodes.end())
    throw Error(Err::NotFound, "unknown function '" + env.function + "'");
  const FunctionTemplate& node = node_it->second;
  double speed = renv.speed_of(node.tier);
  if (renv.counters) renv.counters->inc("invoked." + env.function);

  SpanCtx sctx{g.workflow_name, env.function, node.tier, env.request_id,
               env.invocation_id};

  MetricSpan hspan;
  hspan.kind = SpanKind::Handler;
  hspan.workflow = sctx.workflow;
  hspan.function = sctx.function;
  hspan.tier = sctx.tier;
  hspan.request_id = sctx.request_id;
  hspan.invocation_id = sctx.invocation_id;
  if (!env.parent_id) hspan.labels["entry"] = "1";

  auto fail_with = [&](Err code, const std::string& msg,
                       double start, double dur) -> Error {
    hspan.start_ms = start;
    hspan.duration_ms = dur;
    hspan.failed = true;
    hspan.error = std::string(err_name(code)) + ": " + msg;
    renv.collector->record(hspan);
    return Error(code, msg);
  };

  PoolGuard guard(renv.pools, env.function);

  // 1. Inputs, with the parent's concrete keys substituted in.
  std::vector<DataObject> inputs;
  for (const StorageRef& declared : node.inputs) {
    StorageRef ref = substitute(declared, env.data_keys);
    try {
      inputs.push_back(
          timed_load(*renv.backends, ref, ex, *renv.collector, sctx));
    } catch (const Error& e) {
      Err code = e.code() == Err::NotFound ? Err::InputMissing : e.code();
      throw fail_with(code,
                      "input '" + ref.str() + "' for '" + env.function +
                          "': " + e.what(),
                      ex.now_ms(), 0);
    }
  }

  // 2. Handler, timed; its failure or an undeclared output name fails the
  // handler span.
  if (!renv.handlers->has(node.handler)) {
    throw fail_with(Err::HandlerPanic,
                    "handler '" + node.handler + "' not registered",
                    ex.now_ms(), 0);
  }
  const HandlerFn& handler = renv.handlers->get(node.handler);
  HandlerCtx ctx(renv, env, node.tier, speed);
  hspan.start_ms = ex.now_ms();
  std::vector<NamedObject> produced;
  try {
    produced = handler(ctx, inputs);
  } catch (const Error& e) {
    throw fail_with(e.code(), std::string("handler: ") + e.what(),
                    hspan.start_ms, ex.now_ms() - hspan.start_ms);
  } catch (const std::exception& e) {
    throw fail_with(Err::HandlerPanic,
                    "'" + env.function + "': " + e.what(), hspan.start_ms,
                    ex.now_ms() - hspan.start_ms);
  }
  double handler_dur = ex.now_ms() - hspan.start_ms;

  struct Stored {
    const OutputSpec* spec;
    const NamedObject* obj;
    std::vector<NextSpec> nexts;
  };
  std::vector<Stored> plan;
  for (const NamedObject& out : produced) {
    const OutputSpec* spec = nullptr;
    for (const OutputSpec& o : node.outputs) {
      if (o.data_name == out.data_name) {
        spec = &o;
        break;
      }
    }
    if (!spec) {
      throw fail_with(Err::NoBranchMatch,
                      "'" + env.function + "' produced '" + out.data_name +
                          "', which matches no declared output",
                      hspan.start_ms, handler_dur);
    }
    plan.push_back(Stored{spec, &out, successors(g, env.function,
                                                 out.data_name)});
  }
  hspan.duration_ms = handler_dur;
  renv.collector->record(hspan);

  // 3. Store outputs. Ones that feed successors get a per-request key (on
  // object backends; queue keys stay stable so consumers can pop them).
  ExecutionResult result;
  std::vector<std::string> handoff;
  for (const Stored& st : plan) {
    StorageRef concrete = st.spec->ref;
    bool object_kind = true;
    try {
      object_kind =
          renv.backends->kind(concrete.backend) == BackendKind::Object;
    } catch (const Error&) {
      // Unknown backend: let timed_store record the failure.
    }
    if (!st.nexts.empty() && object_kind)
      concrete.key += "/" + env.request_id;
    timed_store(*renv.backends, concrete, st.obj->bytes, ex,
                *renv.collector, sctx);
    result.output_refs.push_back(concrete.str());
    if (!st.nexts.empty()) handoff.push_back(concrete.str());
  }

  // 4. Successor set: branching nodes follow each produced name's branch;
  // other nodes fire their declared nexts once as control flow.
  std::vector<NextSpec> targets;
  if (node.indexed_outputs) {
    for (const Stored& st : plan)
      targets.insert(targets.end(), st.nexts.begin(), st.nexts.end());
  } else {
    for (const auto& [branch, next] : node.nexts) targets.push_back(next);
  }

  if (targets.empty()) return result;

  // 5. Invoke children; each child's template declares its own mode.
  struct Child {
    NextSpec target;
    InvocationEnvelope env;
    SyncMode mode;
    std::shared_ptr<Event> done;
    InvokeOutcome outcome;
  };
  std::vector<Child> children(targets.size());
  for (size_t i = 0; i < targets.size(); ++i) {
    Child& c = children[i];
    c.target = targets[i];
    c.mode = g.nodes.at(c.target.function).sync;
    c.env.workflow = env.workflow;
    c.env.request_id = env.request_id;
    c.env.invocation_id = child_invocation_id(
        env.invocation_id, static_cast<int>(i), c.target.function);
    c.env.parent_id = env.invocation_id;
    c.env.function = c.target.function;
    c.env.hop = env.hop + 1;
    c.env.data_keys = handoff;
    c.env.issued_at = static_cast<int64_t>(ex.now_ms());
    c.env.sync = c.mode;
  }
  if (children.size() == 1) {
    children[0].outcome =
        renv.invoker->invoke(children[0].target, children[0].env, sctx);
  } else {
    for (Child& c : children) {
      c.done = ex.make_event();
      Child* cp = &c;
      Invoker* invoker = renv.invoker;
      ex.spawn([cp, invoker, sctx] {
        cp->outcome = invoker->invoke(cp->target, cp->env, sctx);
        cp->done->fire();
      });
    }
    for (Child& c : children) c.done->wait();
  }
  for (const Child& c : children) {
    if (!c.outcome.ok && c.mode == SyncMode::Sync) {
      throw Error(Err::DownstreamFailure,
                  "sync successor '" + c.target.function + "' on tier '" +
                      c.target.tier + "' failed: " + c.outcome.error);
    }
    // Async failures are recorded on their Comm span, not propagated.
  }
  return result;
}

void validate_startup(const WorkflowGraph& g, const HandlerRegistry& handlers,
                      const BackendRegistry& backends) {
  std::vector<std::string> missing;
  for (const auto& [name, node] : g.nodes) {
    if (!handlers.has(node.handler))
      missing.push_back("handler '" + node.handler + "' (function '" + name +
                        "')");
    auto check_ref = [&](const StorageRef& ref) {
      if (!backends.has(ref.backend))
        missing.push_back("backend '" + ref.backend + "' (function '" + name +
                          "')");
    };
    for (const StorageRef& ref : node.inputs) check_ref(ref);
    for (const OutputSpec& out : node.outputs) check_ref(out.ref);
  }
  if (!missing.empty()) {
    std::string msg = "unresolved at startup: ";
    for (size_t i = 0; i < missing.size(); ++i) {
      if (i) msg += "; ";
      msg += missing[i];
    }
    throw Error(Err::StartupValidation, msg);
  }
}

}  // namespace edgeflow
