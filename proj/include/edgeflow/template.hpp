#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "edgeflow/errors.hpp"

namespace edgeflow {

enum class SyncMode { Sync, Async };

// Reference to one named object in one backend, written "backend://key".
struct StorageRef {
  std::string backend;
  std::string key;

  std::string str() const { return backend + "://" + key; }
  bool operator==(const StorageRef&) const = default;
};

// backend must match [a-z][a-z0-9_-]*, key must be non-empty with no
// whitespace. Throws Err::InvalidRef.
StorageRef parse_storage_ref(const std::string& text);

struct CronSpec {
  int64_t period_ms = 0;
  int burst = 1;

  bool operator==(const CronSpec&) const = default;
};

// "<int><unit>" with unit in {s,m,h}; period must land in [1000 ms, 24 h].
int64_t parse_cron_period(const std::string& text);
std::string render_cron_period(int64_t period_ms);

struct NextSpec {
  std::string function;
  std::string tier;

  bool operator==(const NextSpec&) const = default;
};

struct OutputSpec {
  std::string data_name;  // the produced object's name; the ref key for
                          // file-parsed templates
  StorageRef ref;

  bool operator==(const OutputSpec&) const = default;
};

struct FunctionTemplate {
  std::string name;
  std::string tier;
  std::string handler;
  SyncMode sync = SyncMode::Sync;
  std::optional<CronSpec> cron;
  std::vector<StorageRef> inputs;

  // indexed_outputs distinguishes "output1: ..." (branch-addressable) from a
  // plain "output: ...". Branch matching only applies to indexed outputs.
  std::vector<OutputSpec> outputs;
  bool indexed_outputs = false;

  // branch index 0 = unindexed (plain pipeline successor, or the shared
  // index of a one-to-many fan-out). Indexed nexts are contiguous 1..N and
  // every index has the matching OutputSpec.
  std::vector<std::pair<int, NextSpec>> nexts;

  bool is_terminal() const { return nexts.empty(); }
  bool operator==(const FunctionTemplate&) const = default;
};

// Parses one template file. Total: every input either yields a valid
// template or throws an Error with one of the template error codes.
FunctionTemplate parse_template(const std::string& content);

// Canonical form: fixed key order, one space after the colon, no comments.
// parse_template(render_template(t)) == t for every valid t.
std::string render_template(const FunctionTemplate& t);

FunctionTemplate load_template_file(const std::string& path);

// Lowercase token as used for function/tier/backend names.
bool valid_name_token(const std::string& s);

}  // namespace edgeflow
