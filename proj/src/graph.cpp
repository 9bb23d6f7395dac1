#include "edgeflow/graph.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "edgeflow/kvfile.hpp"

namespace fs = std::filesystem;

namespace edgeflow {

const char* workflow_kind_name(WorkflowKind k) {
  switch (k) {
    case WorkflowKind::Pipeline: return "pipeline";
    case WorkflowKind::OneToMany: return "one-to-many";
    case WorkflowKind::Branching: return "branching";
    case WorkflowKind::Mixed: return "mixed";
  }
  return "?";
}

namespace {

// DFS cycle check; on a back edge the current stack is the cycle witness.
void check_acyclic(const std::map<std::string, FunctionTemplate>& nodes) {
  std::map<std::string, int> color;  // 0 white, 1 on stack, 2 done
  std::vector<std::string> stack;

  struct Frame {
    std::string name;
    size_t next_edge = 0;
  };

  for (const auto& [root, _] : nodes) {
    if (color[root] != 0) continue;
    std::vector<Frame> frames{{root}};
    color[root] = 1;
    stack.push_back(root);
    while (!frames.empty()) {
      Frame& f = frames.back();
      const auto& nexts = nodes.at(f.name).nexts;
      if (f.next_edge >= nexts.size()) {
        color[f.name] = 2;
        stack.pop_back();
        frames.pop_back();
        continue;
      }
      const std::string& to = nexts[f.next_edge++].second.function;
      if (!nodes.count(to)) continue;  // reported separately
      if (color[to] == 1) {
        auto at = std::find(stack.begin(), stack.end(), to);
        std::string path;
        for (auto it = at; it != stack.end(); ++it) path += *it + " -> ";
        path += to;
        throw Error(Err::CycleDetected, "cycle: " + path);
      }
      if (color[to] == 0) {
        color[to] = 1;
        stack.push_back(to);
        frames.push_back({to});
      }
    }
  }
}

}  // namespace

WorkflowGraph build_graph(const std::string& workflow_name,
                          const std::vector<FunctionTemplate>& templates) {
  WorkflowGraph g;
  g.workflow_name = workflow_name;

  for (const auto& t : templates) {
    if (!g.nodes.emplace(t.name, t).second)
      throw Error(Err::DuplicateFunction, "function '" + t.name + "' defined twice");
  }

  std::map<std::string, int> indegree;
  for (const auto& [name, t] : g.nodes) {
    indegree.emplace(name, 0);
  }
  for (const auto& [name, t] : g.nodes) {
    for (const auto& [branch, next] : t.nexts) {
      if (!g.nodes.count(next.function))
        throw Error(Err::UnknownSuccessor,
                    "'" + name + "' points to unknown function '" +
                        next.function + "'");
      indegree[next.function]++;
      g.edges.emplace_back(name, next.function);
    }
  }

  check_acyclic(g.nodes);

  std::vector<std::string> entries;
  for (const auto& [name, deg] : indegree)
    if (deg == 0) entries.push_back(name);
  if (entries.size() > 1) {
    std::string list;
    for (const auto& e : entries) list += (list.empty() ? "" : ", ") + e;
    throw Error(Err::MultipleEntries, "multiple entry functions: " + list);
  }
  if (entries.empty())
    throw Error(Err::CycleDetected, "no entry function (graph is cyclic)");
  g.entry = entries[0];

  std::set<std::string> reached;
  std::vector<std::string> todo{g.entry};
  while (!todo.empty()) {
    std::string cur = todo.back();
    todo.pop_back();
    if (!reached.insert(cur).second) continue;
    for (const auto& [branch, next] : g.nodes.at(cur).nexts)
      todo.push_back(next.function);
  }
  if (reached.size() != g.nodes.size()) {
    std::string list;
    for (const auto& [name, t] : g.nodes)
      if (!reached.count(name)) list += (list.empty() ? "" : ", ") + name;
    throw Error(Err::Unreachable, "unreachable from entry: " + list);
  }

  bool one_to_many = false, branching = false;
  for (const auto& [name, t] : g.nodes) {
    if (t.nexts.size() <= 1) continue;
    bool indexed = t.nexts[0].first != 0;
    (indexed ? branching : one_to_many) = true;
  }
  if (branching && one_to_many) g.kind = WorkflowKind::Mixed;
  else if (branching) g.kind = WorkflowKind::Branching;
  else if (one_to_many) g.kind = WorkflowKind::OneToMany;
  else g.kind = WorkflowKind::Pipeline;
  g.cron_wrapped = g.nodes.at(g.entry).cron.has_value();

  return g;
}

std::vector<NextSpec> successors(const WorkflowGraph& g, const std::string& from,
                                 const std::string& produced_data_name) {
  auto it = g.nodes.find(from);
  if (it == g.nodes.end())
    throw Error(Err::UnknownSuccessor, "unknown function '" + from + "'");
  const FunctionTemplate& t = it->second;

  if (t.indexed_outputs) {
    int index = 0;
    for (size_t i = 0; i < t.outputs.size(); i++) {
      if (t.outputs[i].data_name == produced_data_name) {
        index = static_cast<int>(i) + 1;
        break;
      }
    }
    if (index == 0)
      throw Error(Err::NoBranchMatch, "'" + from + "' produced '" +
                                          produced_data_name +
                                          "' which matches no declared branch");
    std::vector<NextSpec> out;
    for (const auto& [branch, next] : t.nexts)
      if (branch == index) out.push_back(next);
    return out;  // may be empty: declared dead-end branch
  }

  std::vector<NextSpec> out;
  for (const auto& [branch, next] : t.nexts) out.push_back(next);
  return out;
}

std::vector<ChainWarning> validate_storage_chain(const WorkflowGraph& g) {
  std::vector<ChainWarning> warnings;
  for (const auto& [name, t] : g.nodes) {
    for (const auto& [branch, next] : t.nexts) {
      const OutputSpec* source = nullptr;
      if (t.indexed_outputs) {
        if (branch >= 1 && branch <= static_cast<int>(t.outputs.size()))
          source = &t.outputs[branch - 1];
      } else if (!t.outputs.empty()) {
        source = &t.outputs[0];
      }
      const FunctionTemplate& succ = g.nodes.at(next.function);
      if (!source) {
        warnings.push_back({name, next.function,
                            "'" + name + "' invokes '" + next.function +
                                "' but declares no output for the edge"});
        continue;
      }
      if (succ.inputs.empty()) {
        warnings.push_back({name, next.function,
                            "'" + next.function + "' declares no input for '" +
                                source->ref.str() + "' written by '" + name + "'"});
        continue;
      }
      if (!(succ.inputs[0] == source->ref)) {
        warnings.push_back(
            {name, next.function,
             "'" + name + "' writes " + source->ref.str() + " but '" +
                 next.function + "' reads " + succ.inputs[0].str()});
      }
    }
  }
  return warnings;
}

WorkflowGraph load_bundle(const std::string& dir) {
  fs::path root(dir);
  if (!fs::is_directory(root))
    throw Error(Err::Syntax, "'" + dir + "' is not a bundle directory");

  fs::path manifest = root / "workflow.conf";
  if (!fs::exists(manifest))
    throw Error(Err::Syntax, "missing manifest " + manifest.string());
  std::ifstream in(manifest, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  std::string workflow_name;
  for (const auto& line : kv::parse_lines(buf.str())) {
    if (line.key == "workflow") {
      workflow_name = line.value;
    } else {
      throw Error(Err::UnknownKey, line.number,
                  manifest.string() + ": unknown key '" + line.key + "'");
    }
  }
  if (!valid_name_token(workflow_name))
    throw Error(Err::Syntax, manifest.string() + ": bad or missing workflow name");

  std::vector<fs::path> files;
  for (const auto& ent : fs::directory_iterator(root))
    if (ent.is_regular_file() && ent.path().extension() == ".fn")
      files.push_back(ent.path());
  std::sort(files.begin(), files.end());
  if (files.empty())
    throw Error(Err::Syntax, "no .fn templates in '" + dir + "'");

  std::vector<FunctionTemplate> templates;
  templates.reserve(files.size());
  for (const auto& f : files) templates.push_back(load_template_file(f.string()));
  return build_graph(workflow_name, templates);
}

}  // namespace edgeflow
