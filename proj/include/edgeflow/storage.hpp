#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>

#include "edgeflow/exec.hpp"
#include "edgeflow/metrics.hpp"
#include "edgeflow/template.hpp"

namespace edgeflow {

struct DataObject {
  std::string key;
  std::string bytes;
  int64_t size = 0;  // always length(bytes)
  int64_t created_at = 0;  // ms since epoch at store time; 0 when unknown
};

DataObject make_object(std::string key, std::string bytes, int64_t now_ms);

// Object backends overwrite by key; queue backends append on store and pop
// the oldest entry on load.
enum class BackendKind { Object, Queue };
const char* backend_kind_name(BackendKind k);

class Backend {
 public:
  virtual ~Backend() = default;
  virtual int64_t store(const std::string& key, const DataObject& obj) = 0;
  virtual DataObject load(const std::string& key) = 0;
};

std::shared_ptr<Backend> make_memory_backend(
    int64_t byte_budget = int64_t{256} * 1024 * 1024);
std::shared_ptr<Backend> make_file_backend(const std::string& root_dir);
std::shared_ptr<Backend> make_queue_backend();

// Client for the data/queue endpoints another tier's gateway serves. All
// backends of one remote tier share a single key namespace, so each client
// prepends "<backend-name>/" to its keys.
std::shared_ptr<Backend> make_remote_backend(const std::string& base_url,
                                             BackendKind kind,
                                             const std::string& key_prefix);

class BackendRegistry {
 public:
  BackendRegistry();

  void set_clock(std::function<int64_t()> now_ms);
  void add(const std::string& name, BackendKind kind,
           std::shared_ptr<Backend> impl);
  bool has(const std::string& name) const;
  BackendKind kind(const std::string& name) const;
  Backend& resolve(const std::string& name) const;

  int64_t store(const StorageRef& ref, std::string bytes) const;
  DataObject load(const StorageRef& ref) const;

 private:
  struct Entry {
    std::shared_ptr<Backend> impl;
    BackendKind kind;
  };
  const Entry& entry(const std::string& name) const;

  mutable std::mutex mu_;
  std::map<std::string, Entry> entries_;
  std::function<int64_t()> now_ms_;
};

// Identity fields stamped onto the spans a storage operation emits.
struct SpanCtx {
  std::string workflow;
  std::string function;
  std::string tier;
  std::string request_id;
  std::string invocation_id;
};

// Same effect as the raw operations, plus one Load/Store span each; failures
// still emit a span (failed, zero size) before rethrowing.
DataObject timed_load(const BackendRegistry& reg, const StorageRef& ref,
                      Exec& exec, Collector& collector, const SpanCtx& ctx);
int64_t timed_store(const BackendRegistry& reg, const StorageRef& ref,
                    std::string bytes, Exec& exec, Collector& collector,
                    const SpanCtx& ctx);

}  // namespace edgeflow
