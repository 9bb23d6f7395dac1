#include "edgeflow/storage.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "edgeflow/errors.hpp"
#include "httplib.h"

namespace edgeflow {

const char* backend_kind_name(BackendKind k) {
  return k == BackendKind::Object ? "object" : "queue";
}

DataObject make_object(std::string key, std::string bytes, int64_t now_ms) {
  if (key.empty()) throw Error(Err::InvalidRef, "empty storage key");
  DataObject obj;
  obj.key = std::move(key);
  obj.size = static_cast<int64_t>(bytes.size());
  obj.bytes = std::move(bytes);
  obj.created_at = now_ms;
  return obj;
}

namespace {

class MemoryBackend final : public Backend {
 public:
  explicit MemoryBackend(int64_t budget) : budget_(budget) {}

  int64_t store(const std::string& key, const DataObject& obj) override {
    std::lock_guard lk(mu_);
    int64_t old_size = 0;
    auto it = objects_.find(key);
    if (it != objects_.end()) old_size = it->second.size;
    if (used_ - old_size + obj.size > budget_) {
      throw Error(Err::CapacityExceeded,
                  "memory backend over budget storing '" + key + "' (" +
                      std::to_string(used_ - old_size + obj.size) + " > " +
                      std::to_string(budget_) + " bytes)");
    }
    used_ = used_ - old_size + obj.size;
    objects_[key] = obj;
    return obj.size;
  }

  DataObject load(const std::string& key) override {
    std::lock_guard lk(mu_);
    auto it = objects_.find(key);
    if (it == objects_.end())
      throw Error(Err::NotFound, "no object for key '" + key + "'");
    return it->second;
  }

 private:
  std::mutex mu_;
  int64_t budget_;
  int64_t used_ = 0;
  std::map<std::string, DataObject> objects_;
};

// Keys may contain any characters (slashes included); encode everything
// outside a safe set so one key maps to one flat file name.
std::string encode_component(const std::string& key) {
  std::string out;
  for (unsigned char c : key) {
    if (std::isalnum(c) || c == '.' || c == '_' || c == '-') {
      out += static_cast<char>(c);
    } else {
      char buf[4];
      std::snprintf(buf, sizeof(buf), "%%%02X", c);
      out += buf;
    }
  }
  return out;
}

class FileBackend final : public Backend {
 public:
  explicit FileBackend(std::string root) : root_(std::move(root)) {
    std::filesystem::create_directories(root_);
  }

  int64_t store(const std::string& key, const DataObject& obj) override {
    std::lock_guard lk(mu_);
    auto path = file_for(key);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
      throw Error(Err::BackendUnavailable, "cannot write " + path.string());
    out.write(obj.bytes.data(),
              static_cast<std::streamsize>(obj.bytes.size()));
    out.close();
    if (!out)
      throw Error(Err::BackendUnavailable, "short write to " + path.string());
    return obj.size;
  }

  DataObject load(const std::string& key) override {
    std::lock_guard lk(mu_);
    auto path = file_for(key);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Err::NotFound, "no object for key '" + key + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    DataObject obj;
    obj.key = key;
    obj.size = static_cast<int64_t>(bytes.size());
    obj.bytes = std::move(bytes);
    return obj;
  }

 private:
  std::filesystem::path file_for(const std::string& key) const {
    return std::filesystem::path(root_) / encode_component(key);
  }

  std::mutex mu_;
  std::string root_;
};

class QueueBackend final : public Backend {
 public:
  int64_t store(const std::string& key, const DataObject& obj) override {
    std::lock_guard lk(mu_);
    queues_[key].push_back(obj);
    return obj.size;
  }

  DataObject load(const std::string& key) override {
    std::lock_guard lk(mu_);
    auto it = queues_.find(key);
    if (it == queues_.end() || it->second.empty())
      throw Error(Err::NotFound, "queue '" + key + "' is empty");
    DataObject obj = std::move(it->second.front());
    it->second.pop_front();
    return obj;
  }

 private:
  std::mutex mu_;
  std::map<std::string, std::deque<DataObject>> queues_;
};

class RemoteBackend final : public Backend {
 public:
  RemoteBackend(std::string base_url, BackendKind kind, std::string prefix)
      : base_url_(std::move(base_url)),
        kind_(kind),
        prefix_(std::move(prefix)) {}

  int64_t store(const std::string& key, const DataObject& obj) override {
    httplib::Client cli(base_url_);
    tune(cli);
    std::string path = route() + encode_component(prefix_ + key);
    httplib::Result res =
        kind_ == BackendKind::Object
            ? cli.Put(path, obj.bytes, "application/octet-stream")
            : cli.Post(path, obj.bytes, "application/octet-stream");
    if (!res)
      throw Error(Err::BackendUnavailable,
                  "remote store to " + base_url_ + " failed: " +
                      httplib::to_string(res.error()));
    if (res->status != 200)
      throw Error(Err::BackendUnavailable,
                  "remote store to " + base_url_ + " returned " +
                      std::to_string(res->status));
    return obj.size;
  }

  DataObject load(const std::string& key) override {
    httplib::Client cli(base_url_);
    tune(cli);
    std::string path = route() + encode_component(prefix_ + key);
    httplib::Result res = kind_ == BackendKind::Object ? cli.Get(path)
                                                       : cli.Delete(path);
    if (!res)
      throw Error(Err::BackendUnavailable,
                  "remote load from " + base_url_ + " failed: " +
                      httplib::to_string(res.error()));
    if (res->status == 404)
      throw Error(Err::NotFound, "no remote object for key '" + key + "'");
    if (res->status != 200)
      throw Error(Err::BackendUnavailable,
                  "remote load from " + base_url_ + " returned " +
                      std::to_string(res->status));
    DataObject obj;
    obj.key = key;
    obj.size = static_cast<int64_t>(res->body.size());
    obj.bytes = res->body;
    return obj;
  }

 private:
  std::string route() const {
    return kind_ == BackendKind::Object ? "/data/" : "/queue/";
  }

  static void tune(httplib::Client& cli) {
    cli.set_connection_timeout(5, 0);
    cli.set_read_timeout(30, 0);
    cli.set_write_timeout(30, 0);
  }

  std::string base_url_;
  BackendKind kind_;
  std::string prefix_;
};

}  // namespace

std::shared_ptr<Backend> make_memory_backend(int64_t byte_budget) {
  return std::make_shared<MemoryBackend>(byte_budget);
}
std::shared_ptr<Backend> make_file_backend(const std::string& root_dir) {
  return std::make_shared<FileBackend>(root_dir);
}
std::shared_ptr<Backend> make_queue_backend() {
  return std::make_shared<QueueBackend>();
}
std::shared_ptr<Backend> make_remote_backend(const std::string& base_url,
                                             BackendKind kind,
                                             const std::string& key_prefix) {
  return std::make_shared<RemoteBackend>(base_url, kind, key_prefix);
}

BackendRegistry::BackendRegistry() {
  now_ms_ = [] {
    using namespace std::chrono;
    return duration_cast<milliseconds>(system_clock::now().time_since_epoch())
        .count();
  };
}

void BackendRegistry::set_clock(std::function<int64_t()> now_ms) {
  std::lock_guard lk(mu_);
  now_ms_ = std::move(now_ms);
}

void BackendRegistry::add(const std::string& name, BackendKind kind,
                          std::shared_ptr<Backend> impl) {
  std::lock_guard lk(mu_);
  if (entries_.count(name))
    throw Error(Err::DuplicateKey, "backend '" + name + "' already registered");
  entries_[name] = Entry{std::move(impl), kind};
}

bool BackendRegistry::has(const std::string& name) const {
  std::lock_guard lk(mu_);
  return entries_.count(name) > 0;
}

const BackendRegistry::Entry& BackendRegistry::entry(
    const std::string& name) const {
  std::lock_guard lk(mu_);
  auto it = entries_.find(name);
  if (it == entries_.end())
    throw Error(Err::UnknownBackend, "no backend named '" + name + "'");
  return it->second;
}

BackendKind BackendRegistry::kind(const std::string& name) const {
  return entry(name).kind;
}

Backend& BackendRegistry::resolve(const std::string& name) const {
  return *entry(name).impl;
}

int64_t BackendRegistry::store(const StorageRef& ref,
                               std::string bytes) const {
  const Entry& e = entry(ref.backend);
  int64_t now;
  {
    std::lock_guard lk(mu_);
    now = now_ms_();
  }
  return e.impl->store(ref.key, make_object(ref.key, std::move(bytes), now));
}

DataObject BackendRegistry::load(const StorageRef& ref) const {
  return entry(ref.backend).impl->load(ref.key);
}

namespace {

MetricSpan base_span(SpanKind kind, const StorageRef& ref, const SpanCtx& ctx,
                     double start_ms) {
  MetricSpan s;
  s.kind = kind;
  s.workflow = ctx.workflow;
  s.function = ctx.function;
  s.tier = ctx.tier;
  s.request_id = ctx.request_id;
  s.invocation_id = ctx.invocation_id;
  s.start_ms = start_ms;
  s.labels["backend"] = ref.backend;
  s.labels["key"] = ref.key;
  return s;
}

}  // namespace

DataObject timed_load(const BackendRegistry& reg, const StorageRef& ref,
                      Exec& exec, Collector& collector, const SpanCtx& ctx) {
  MetricSpan s = base_span(SpanKind::Load, ref, ctx, exec.now_ms());
  try {
    DataObject obj = reg.load(ref);
    s.duration_ms = exec.now_ms() - s.start_ms;
    s.size = obj.size;
    collector.record(std::move(s));
    return obj;
  } catch (const Error& e) {
    s.duration_ms = exec.now_ms() - s.start_ms;
    s.failed = true;
    s.error = std::string(err_name(e.code())) + ": " + e.what();
    collector.record(std::move(s));
    throw;
  }
}

int64_t timed_store(const BackendRegistry& reg, const StorageRef& ref,
                    std::string bytes, Exec& exec, Collector& collector,
                    const SpanCtx& ctx) {
  MetricSpan s = base_span(SpanKind::Store, ref, ctx, exec.now_ms());
  s.size = static_cast<int64_t>(bytes.size());
  try {
    int64_t stored = reg.store(ref, std::move(bytes));
    s.duration_ms = exec.now_ms() - s.start_ms;
    collector.record(std::move(s));
    return stored;
  } catch (const Error& e) {
    s.duration_ms = exec.now_ms() - s.start_ms;
    s.failed = true;
    s.error = std::string(err_name(e.code())) + ": " + e.what();
    collector.record(std::move(s));
    throw;
  }
}

}  // namespace edgeflow
