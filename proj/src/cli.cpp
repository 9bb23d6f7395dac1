#include "edgeflow/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "edgeflow/gateway.hpp"
#include "edgeflow/graph.hpp"
#include "edgeflow/kvfile.hpp"
#include "edgeflow/scheduler.hpp"
#include "edgeflow/workloads.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace edgeflow {
namespace {

std::optional<std::string> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return std::nullopt;
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

bool write_file(const fs::path& p, const std::string& content) {
  std::ofstream outf(p, std::ios::binary | std::ios::trunc);
  if (!outf) return false;
  outf << content;
  return bool(outf);
}

// Error::what() already bakes in the code name and line; diagnostics print
// those themselves, so peel the prefix back off.
std::string error_text(const Error& e) {
  std::string what = e.what();
  std::string prefix(err_name(e.code()));
  if (e.line() > 0) prefix += " (line " + std::to_string(e.line()) + ")";
  prefix += ": ";
  if (what.rfind(prefix, 0) == 0) return what.substr(prefix.size());
  return what;
}

std::string locus(const std::string& file, int line) {
  return line > 0 ? file + ":" + std::to_string(line) : file;
}

// --- validate ---

struct Diagnostics {
  std::ostream& out;
  int errors = 0;
  int warnings = 0;

  void error(const std::string& file, int line, const std::string& msg) {
    out << locus(file, line) << ": error: " << msg << "\n";
    ++errors;
  }
  void error(const std::string& file, const Error& e) {
    out << locus(file, e.line()) << ": error: " << err_name(e.code()) << ": "
        << error_text(e) << "\n";
    ++errors;
  }
  void warn(const std::string& file, const std::string& msg) {
    out << file << ": warning: " << msg << "\n";
    ++warnings;
  }
};

int cmd_validate(const std::string& dir, std::ostream& out) {
  if (!fs::is_directory(dir)) {
    out << "error: '" << dir << "' is not a bundle directory\n";
    return kExitUsage;
  }
  Diagnostics diag{out};

  fs::path manifest = fs::path(dir) / "workflow.conf";
  std::string workflow_name;
  auto manifest_text = read_file(manifest);
  if (!manifest_text) {
    diag.error(manifest.string(), 0, "missing manifest");
  } else {
    try {
      for (const auto& line : kv::parse_lines(*manifest_text)) {
        if (line.key == "workflow")
          workflow_name = line.value;
        else
          diag.error(manifest.string(), line.number,
                     "unknown key '" + line.key + "'");
      }
      if (!valid_name_token(workflow_name))
        diag.error(manifest.string(), 0, "bad or missing workflow name");
    } catch (const Error& e) {
      diag.error(manifest.string(), e);
    }
  }

  std::vector<fs::path> files;
  for (const auto& ent : fs::directory_iterator(dir))
    if (ent.is_regular_file() && ent.path().extension() == ".fn")
      files.push_back(ent.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) diag.error(dir, 0, "no .fn templates");

  std::vector<FunctionTemplate> templates;
  std::map<std::string, std::string> file_of;  // function -> declaring file
  for (const auto& f : files) {
    auto text = read_file(f);
    if (!text) {
      diag.error(f.string(), 0, "unreadable file");
      continue;
    }
    try {
      FunctionTemplate t = parse_template(*text);
      file_of[t.name] = f.string();
      templates.push_back(std::move(t));
    } catch (const Error& e) {
      diag.error(f.string(), e);
    }
  }

  // Whole-bundle checks only make sense once every file stands on its own.
  if (diag.errors == 0) {
    try {
      WorkflowGraph g = build_graph(workflow_name, templates);
      for (const auto& w : validate_storage_chain(g))
        diag.warn(file_of.count(w.from) ? file_of[w.from] : dir,
                  w.from + " -> " + w.to + ": " + w.message);
      HandlerRegistry reg;
      register_workloads(reg, {});
      for (const auto& [name, node] : g.nodes)
        if (!reg.has(node.handler))
          diag.error(file_of.count(name) ? file_of[name] : dir, 0,
                     "unknown handler '" + node.handler + "'");
    } catch (const Error& e) {
      diag.error(dir, e);
    }
  }

  out << dir << ": " << templates.size() << " function(s), " << diag.errors
      << " error(s), " << diag.warnings << " warning(s)\n";
  return diag.errors == 0 ? kExitOk : kExitValidation;
}

// --- run ---

struct RunArgs {
  std::string scenario_path;
  std::string out_dir;
  std::optional<uint64_t> seed;
  int repeats = 1;
  bool real = false;
  std::optional<double> failure_budget;
};

// A scenario names its bundle relative to itself (so `.` means "the
// directory this file sits in"), falling back to the invoking directory.
std::string resolve_bundle_dir(const std::string& declared,
                               const std::string& scenario_path) {
  fs::path p(declared);
  if (p.is_absolute()) return p.string();
  fs::path beside = fs::path(scenario_path).parent_path() / p;
  if (fs::is_directory(beside)) return beside.string();
  if (fs::is_directory(p)) return p.string();
  return beside.string();  // let the loader report the miss
}

int apply_env_time_scale(ScenarioConfig& cfg, std::ostream& err) {
  const char* ts = std::getenv("EDGEFLOW_TIME_SCALE");
  if (!ts || !*ts) return kExitOk;
  try {
    cfg.time_scale = parse_time_scale(ts);
  } catch (const Error& e) {
    err << "EDGEFLOW_TIME_SCALE: error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitOk;
}

int cmd_run(const RunArgs& a, std::ostream& out, std::ostream& err) {
  ScenarioConfig cfg;
  try {
    cfg = load_scenario_file(a.scenario_path);
  } catch (const Error& e) {
    err << locus(a.scenario_path, e.line()) << ": error: "
        << err_name(e.code()) << ": " << error_text(e) << "\n";
    return kExitUsage;
  }
  if (int rc = apply_env_time_scale(cfg, err)) return rc;
  if (a.seed) cfg.seed = *a.seed;
  if (a.failure_budget) cfg.failure_budget = *a.failure_budget;
  if (cfg.workflow_dir.empty()) {
    err << a.scenario_path << ": error: scenario declares no workflow_dir\n";
    return kExitUsage;
  }

  WorkflowGraph g;
  try {
    g = load_bundle(resolve_bundle_dir(cfg.workflow_dir, a.scenario_path));
    apply_placement(g, cfg.placement);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  std::error_code ec;
  fs::create_directories(a.out_dir, ec);
  if (ec) {
    err << "error: cannot create '" << a.out_dir << "': " << ec.message()
        << "\n";
    return kExitUsage;
  }

  uint64_t base_seed = cfg.seed;
  bool over_budget = false;
  for (int i = 0; i < a.repeats; ++i) {
    cfg.seed = base_seed + static_cast<uint64_t>(i);
    RunOutcome run;
    try {
      if (a.real) {
        run = run_real(cfg, g);
      } else {
        // Fresh handler state per repeat keeps the runs independent.
        HandlerRegistry reg;
        register_workloads(reg, cfg.params);
        run = run_sim(cfg, g, reg);
      }
    } catch (const Error& e) {
      err << "error: " << e.what() << "\n";
      return kExitUsage;
    }
    std::string stem =
        a.repeats == 1 ? "report" : "report_" + std::to_string(i + 1);
    fs::path json_path = fs::path(a.out_dir) / (stem + ".json");
    fs::path csv_path = fs::path(a.out_dir) / (stem + ".csv");
    if (!write_file(json_path, report_json(run.report)) ||
        !write_file(csv_path, report_csv(run.report))) {
      err << "error: cannot write into '" << a.out_dir << "'\n";
      return kExitUsage;
    }
    char line[512];
    std::snprintf(line, sizeof(line),
                  "run %d/%d: seed %llu, issued %d, ok %d, failed %d -> %s",
                  i + 1, a.repeats, static_cast<unsigned long long>(cfg.seed),
                  run.stats.issued, run.stats.ok, run.stats.failed,
                  json_path.string().c_str());
    out << line << "\n";
    double fraction =
        run.stats.issued > 0
            ? static_cast<double>(run.stats.failed) / run.stats.issued
            : 0.0;
    if (fraction > cfg.failure_budget) over_budget = true;
  }
  if (over_budget) {
    err << "error: failed fraction exceeded the failure budget ("
        << cfg.failure_budget << ")\n";
    return kExitFailureBudget;
  }
  return kExitOk;
}

// --- report ---

struct ReportArgs {
  std::string dir;
  std::string format = "table";
  std::string compare_dir;  // empty = plain rendering
};

// Single runs write report.*; repeated runs are indexed from 1.
std::optional<fs::path> find_report(const std::string& dir, const char* ext) {
  for (const char* stem : {"report", "report_1"}) {
    fs::path p = fs::path(dir) / (std::string(stem) + "." + ext);
    if (fs::exists(p)) return p;
  }
  return std::nullopt;
}

struct StageRow {
  std::string name;
  std::string tier;
  std::string kind;
  int64_t count = 0;
  int64_t failures = 0;
  std::optional<double> mean_ms;
  std::optional<double> p95_ms;
};

struct ReportView {
  std::string scenario;
  std::vector<StageRow> stages;
  int64_t requests = 0;
  int64_t complete = 0;
  int64_t incomplete = 0;
  std::optional<double> p95_e2e;
};

std::optional<double> num_or_null(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

ReportView parse_report_view(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  ReportView v;
  v.scenario = j.at("scenario").get<std::string>();
  for (const auto& row : j.at("functions")) {
    StageRow s;
    s.name = row.at("name").get<std::string>();
    s.tier = row.at("tier").get<std::string>();
    s.kind = row.at("kind").get<std::string>();
    s.count = row.at("count").get<int64_t>();
    s.failures = row.at("failures").get<int64_t>();
    s.mean_ms = num_or_null(row, "mean_ms");
    s.p95_ms = num_or_null(row, "p95_ms");
    v.stages.push_back(std::move(s));
  }
  const auto& wf = j.at("workflow");
  v.requests = wf.at("requests").get<int64_t>();
  v.complete = wf.at("complete").get<int64_t>();
  v.incomplete = wf.at("incomplete").get<int64_t>();
  v.p95_e2e = num_or_null(wf, "p95_end_to_end_ms");
  return v;
}

std::string fmt_opt(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3f", *v);
  return buf;
}

void render_table(const ReportView& v, std::ostream& out) {
  size_t name_w = std::strlen("function");
  size_t tier_w = std::strlen("tier");
  for (const auto& s : v.stages) {
    name_w = std::max(name_w, s.name.size());
    tier_w = std::max(tier_w, s.tier.size());
  }
  out << "scenario: " << v.scenario << "\n";
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%-*s  %-*s  %-7s  %8s  %8s  %12s  %12s",
                static_cast<int>(name_w), "function", static_cast<int>(tier_w),
                "tier", "kind", "count", "failures", "mean_ms", "p95_ms");
  out << buf << "\n";
  for (const auto& s : v.stages) {
    std::snprintf(buf, sizeof(buf),
                  "%-*s  %-*s  %-7s  %8lld  %8lld  %12s  %12s",
                  static_cast<int>(name_w), s.name.c_str(),
                  static_cast<int>(tier_w), s.tier.c_str(), s.kind.c_str(),
                  static_cast<long long>(s.count),
                  static_cast<long long>(s.failures), fmt_opt(s.mean_ms).c_str(),
                  fmt_opt(s.p95_ms).c_str());
    out << buf << "\n";
  }
  out << "requests: " << v.requests << " (" << v.complete << " complete, "
      << v.incomplete << " incomplete)\n";
  out << "end-to-end p95: " << fmt_opt(v.p95_e2e) << (v.p95_e2e ? " ms" : "")
      << "\n";
}

std::string delta_pct(const std::optional<double>& base,
                      const std::optional<double>& other) {
  if (!base || !other || *base == 0.0) return "-";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%+.1f%%", (*other - *base) / *base * 100.0);
  return buf;
}

// Per-stage handler latencies side by side; a moved stage shows its tiers
// as from->to.
void render_compare(const ReportView& base, const ReportView& other,
                    std::ostream& out) {
  std::map<std::string, StageRow> b, o;
  std::vector<std::string> order;
  for (const auto& s : base.stages)
    if (s.kind == "handler") {
      b[s.name] = s;
      order.push_back(s.name);
    }
  for (const auto& s : other.stages)
    if (s.kind == "handler") {
      if (!b.count(s.name)) order.push_back(s.name);
      o[s.name] = s;
    }

  out << "comparing " << base.scenario << " (base) vs " << other.scenario
      << "\n";
  size_t name_w = std::strlen("end-to-end");
  size_t tier_w = std::strlen("tier");
  std::map<std::string, std::string> tier_of;
  for (const auto& n : order) {
    name_w = std::max(name_w, n.size());
    std::string t;
    if (b.count(n) && o.count(n))
      t = b[n].tier == o[n].tier ? b[n].tier : b[n].tier + "->" + o[n].tier;
    else
      t = b.count(n) ? b[n].tier : o[n].tier;
    tier_of[n] = t;
    tier_w = std::max(tier_w, t.size());
  }
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%-*s  %-*s  %12s  %12s  %8s",
                static_cast<int>(name_w), "stage", static_cast<int>(tier_w),
                "tier", "base_p95", "other_p95", "delta");
  out << buf << "\n";
  for (const auto& n : order) {
    std::optional<double> bp = b.count(n) ? b[n].p95_ms : std::nullopt;
    std::optional<double> op = o.count(n) ? o[n].p95_ms : std::nullopt;
    std::snprintf(buf, sizeof(buf), "%-*s  %-*s  %12s  %12s  %8s",
                  static_cast<int>(name_w), n.c_str(),
                  static_cast<int>(tier_w), tier_of[n].c_str(),
                  fmt_opt(bp).c_str(), fmt_opt(op).c_str(),
                  delta_pct(bp, op).c_str());
    out << buf << "\n";
  }
  std::snprintf(buf, sizeof(buf), "%-*s  %-*s  %12s  %12s  %8s",
                static_cast<int>(name_w), "end-to-end",
                static_cast<int>(tier_w), "", fmt_opt(base.p95_e2e).c_str(),
                fmt_opt(other.p95_e2e).c_str(),
                delta_pct(base.p95_e2e, other.p95_e2e).c_str());
  out << buf << "\n";
}

int cmd_report(const ReportArgs& a, std::ostream& out, std::ostream& err) {
  const char* ext = a.format == "csv" ? "csv" : "json";
  auto path = find_report(a.dir, ext);
  if (!path) {
    err << "error: no report." << ext << " under '" << a.dir << "'\n";
    return kExitUsage;
  }
  auto text = read_file(*path);
  if (!text) {
    err << "error: cannot read '" << path->string() << "'\n";
    return kExitUsage;
  }
  if (a.format != "table") {
    if (!a.compare_dir.empty()) {
      err << "error: --compare only renders as a table\n";
      return kExitUsage;
    }
    out << *text;  // stored bytes, untouched
    return kExitOk;
  }

  ReportView base;
  try {
    base = parse_report_view(*text);
  } catch (const std::exception& e) {
    err << "error: '" << path->string() << "' is not a run report: "
        << e.what() << "\n";
    return kExitUsage;
  }
  if (a.compare_dir.empty()) {
    render_table(base, out);
    return kExitOk;
  }

  auto other_path = find_report(a.compare_dir, "json");
  if (!other_path) {
    err << "error: no report.json under '" << a.compare_dir << "'\n";
    return kExitUsage;
  }
  auto other_text = read_file(*other_path);
  if (!other_text) {
    err << "error: cannot read '" << other_path->string() << "'\n";
    return kExitUsage;
  }
  ReportView other;
  try {
    other = parse_report_view(*other_text);
  } catch (const std::exception& e) {
    err << "error: '" << other_path->string() << "' is not a run report: "
        << e.what() << "\n";
    return kExitUsage;
  }
  render_compare(base, other, out);
  return kExitOk;
}

// --- serve ---

struct ServeArgs {
  std::string tier;
  std::string listen;
  std::string workflow_dir;
  std::string config_path;
};

bool split_listen(const std::string& listen, std::string& host, int& port) {
  auto colon = listen.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 >= listen.size())
    return false;
  host = listen.substr(0, colon);
  try {
    size_t used = 0;
    int p = std::stoi(listen.substr(colon + 1), &used);
    if (used != listen.size() - colon - 1 || p < 1 || p > 65535) return false;
    port = p;
  } catch (const std::exception&) {
    return false;
  }
  return true;
}

int cmd_serve(const ServeArgs& a, std::ostream& out, std::ostream& err) {
  std::string host;
  int port = 0;
  if (!split_listen(a.listen, host, port)) {
    err << "error: --listen wants host:port, got '" << a.listen << "'\n";
    return kExitUsage;
  }
  ScenarioConfig cfg;
  try {
    cfg = load_scenario_file(a.config_path);
  } catch (const Error& e) {
    err << locus(a.config_path, e.line()) << ": error: "
        << err_name(e.code()) << ": " << error_text(e) << "\n";
    return kExitUsage;
  }
  if (int rc = apply_env_time_scale(cfg, err)) return rc;

  WorkflowGraph g;
  ClusterConfig cluster;
  try {
    g = load_bundle(a.workflow_dir);
    apply_placement(g, cfg.placement);
    cluster = cluster_config_from(cfg);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  if (!cluster.tiers.has(a.tier)) {
    err << "error: tier '" << a.tier << "' is not declared by the config\n";
    return kExitUsage;
  }

  HandlerRegistry handlers;
  register_workloads(handlers, cfg.params);
  auto exec = make_real_exec();
  Collector collector;
  Counters counters;
  BackendRegistry view;
  BackendRegistry local;
  std::unique_ptr<RealInvoker> invoker;
  RuntimeEnv env;
  try {
    build_tier_backends(a.tier, cluster.backends, cluster.tiers, view, local);
    invoker = std::make_unique<RealInvoker>(cluster.tiers, *exec, collector,
                                            cluster.sync_timeout_ms);
    env.exec = exec.get();
    env.graph = &g;
    env.backends = &view;
    env.handlers = &handlers;
    env.collector = &collector;
    env.invoker = invoker.get();
    env.counters = &counters;
    env.pools = nullptr;
    env.tier_speeds = cluster.tiers.speeds();
    env.run_seed = cfg.seed;
    validate_startup(g, handlers, view);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  GatewayServer server(env, cluster.tiers.at(a.tier), local);
  out << "tier '" << a.tier << "' serving workflow '" << g.workflow_name
      << "' on " << host << ":" << port << "\n";
  out.flush();
  try {
    server.listen(host, port);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitOk;
}

}  // namespace

int cli_main(std::vector<std::string> args, std::ostream& out,
             std::ostream& err) {
  CLI::App app{"workflow benchmark harness for tiered deployments"};
  app.name("edgeflow");
  app.require_subcommand(1);

  std::string validate_dir;
  CLI::App* validate =
      app.add_subcommand("validate", "Check a workflow bundle directory");
  validate->add_option("dir", validate_dir, "bundle directory")->required();

  ServeArgs serve_args;
  CLI::App* serve =
      app.add_subcommand("serve", "Serve one tier of a deployment over HTTP");
  serve->add_option("--tier", serve_args.tier, "tier name from the config")
      ->required();
  serve->add_option("--listen", serve_args.listen, "host:port to bind")
      ->required();
  serve->add_option("--workflow", serve_args.workflow_dir, "bundle directory")
      ->required();
  serve
      ->add_option("--config", serve_args.config_path,
                   "scenario file declaring tiers, delays, and backends")
      ->required();

  RunArgs run_args;
  CLI::App* run =
      app.add_subcommand("run", "Execute a scenario and write its reports");
  run->add_option("scenario", run_args.scenario_path, "scenario file")
      ->required();
  run->add_option("--out", run_args.out_dir, "directory for report files")
      ->required();
  run->add_option("--seed", run_args.seed, "override the scenario seed");
  run->add_option("--repeats", run_args.repeats,
                  "independent runs; repeat i uses seed + i")
      ->check(CLI::PositiveNumber);
  run->add_flag("--real", run_args.real,
                "drive live tier processes instead of the simulator");
  run->add_option("--failure-budget", run_args.failure_budget,
                  "tolerated failed fraction before exit 3")
      ->check(CLI::Range(0.0, 1.0));

  ReportArgs report_args;
  CLI::App* report = app.add_subcommand("report", "Render a run's report");
  report->add_option("dir", report_args.dir, "run directory")->required();
  report->add_option("--format", report_args.format, "table, json, or csv")
      ->check(CLI::IsMember({"table", "json", "csv"}));
  report->add_option("--compare", report_args.compare_dir,
                     "second run directory; adds per-stage deltas");

  try {
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp&) {
    const CLI::App* target = &app;
    while (!target->get_subcommands().empty())
      target = target->get_subcommands().front();
    out << target->help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    err << "see 'edgeflow --help'\n";
    return kExitUsage;
  }

  try {
    if (validate->parsed()) return cmd_validate(validate_dir, out);
    if (serve->parsed()) return cmd_serve(serve_args, out, err);
    if (run->parsed()) return cmd_run(run_args, out, err);
    if (report->parsed()) return cmd_report(report_args, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  err << "error: no subcommand given\n";
  return kExitUsage;
}

}  // namespace edgeflow
