#pragma once

#include <map>
#include <string>
#include <vector>

#include "edgeflow/template.hpp"

namespace edgeflow {

enum class WorkflowKind { Pipeline, OneToMany, Branching, Mixed };

const char* workflow_kind_name(WorkflowKind k);

struct WorkflowGraph {
  std::string workflow_name;
  std::map<std::string, FunctionTemplate> nodes;
  std::string entry;
  WorkflowKind kind = WorkflowKind::Pipeline;
  bool cron_wrapped = false;
  std::vector<std::pair<std::string, std::string>> edges;  // (from, to)
};

// Validates shape: unique names, known successors, acyclic, exactly one
// entry, everything reachable from it.
WorkflowGraph build_graph(const std::string& workflow_name,
                          const std::vector<FunctionTemplate>& templates);

// Successor resolution for one produced object. Branch-indexed nodes match
// the produced data name against their declared outputs (no match at all is
// Err::NoBranchMatch; a matching output without a successor ends the chain).
// One-to-many nodes return every successor; plain nodes their single one.
std::vector<NextSpec> successors(const WorkflowGraph& g, const std::string& from,
                                 const std::string& produced_data_name);

struct ChainWarning {
  std::string from;
  std::string to;
  std::string message;
};

// Data-flow lint: a successor should read what its predecessor wrote.
// Mismatches are warnings, never errors; users may rewire intentionally.
std::vector<ChainWarning> validate_storage_chain(const WorkflowGraph& g);

// A bundle directory holds one .fn file per function plus a manifest file
// ("workflow.conf") with the single line "workflow: <name>".
WorkflowGraph load_bundle(const std::string& dir);

}  // namespace edgeflow
