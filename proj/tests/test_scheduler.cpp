#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "edgeflow/errors.hpp"
#include "edgeflow/gateway.hpp"
#include "edgeflow/scheduler.hpp"
#include "httplib.h"

using namespace edgeflow;

namespace {

void expect_err(Err want, const std::function<void()>& f, int line = -1) {
  try {
    f();
    FAIL_CHECK("expected error " << err_name(want));
  } catch (const Error& e) {
    CHECK(e.code() == want);
    if (line >= 0) CHECK(e.line() == line);
  }
}

// Single bare function: no storage, all latency comes from the handler.
std::string solo_doc(const std::string& extra = "") {
  return "name: s0\ntier: edge\nhandler: h0\nsync: sync\n" + extra;
}

WorkflowGraph solo_graph(const std::string& extra = "") {
  return build_graph("wf", {parse_template(solo_doc(extra))});
}

ScenarioConfig closed_cfg(double duration_ms, int concurrency = 1,
                          uint64_t seed = 9) {
  ScenarioConfig cfg = parse_scenario("duration: 1\n", "t");
  cfg.duration_ms = duration_ms;
  cfg.time_scale = 1.0;
  cfg.concurrency = concurrency;
  cfg.seed = seed;
  return cfg;
}

void add_cost_handler(HandlerRegistry& hr, double cost_ms) {
  hr.add("h0", [cost_ms](HandlerCtx& ctx, const std::vector<DataObject>&)
                   -> std::vector<NamedObject> {
    if (cost_ms > 0) ctx.compute(cost_ms);
    return {};
  });
}

// Handler span start times; for a solo graph these are the entry starts.
std::multiset<double> entry_starts(const RunOutcome& out) {
  std::multiset<double> starts;
  for (const auto& s : out.spans)
    if (s.kind == SpanKind::Handler) starts.insert(s.start_ms);
  return starts;
}

bool uuid_shaped(const std::string& id) {
  if (id.size() != 36) return false;
  for (size_t i : {8u, 13u, 18u, 23u})
    if (id[i] != '-') return false;
  if (id[14] != '4') return false;
  return std::string("89ab").find(id[19]) != std::string::npos;
}

}  // namespace

TEST_CASE("time scale accepts decimals and fractions") {
  CHECK(parse_time_scale("0.5") == 0.5);
  CHECK(parse_time_scale("1") == 1.0);
  CHECK(parse_time_scale("1/60") == doctest::Approx(1.0 / 60));
  CHECK(parse_time_scale("3/4") == 0.75);
  for (const char* bad : {"0", "-1", "abc", "1/0", "1/", "/2", "", "2x"})
    expect_err(Err::InvalidScenario, [bad] { parse_time_scale(bad); });
}

TEST_CASE("scenario parse covers every key family") {
  std::string text =
      "# three-tier video run\n"
      "scenario: demo\n"
      "workflow_dir: workloads/video\n"
      "mode: cron\n"
      "concurrency: 4\n"
      "duration: 30000\n"
      "seed: 42\n"
      "time_scale: 1/60\n"
      "tier.iot.speed: 0.25\n"
      "tier.edge.speed: 1.0\n"
      "tier.cloud.speed: 2.0\n"
      "tier.edge.url: http://127.0.0.1:8001\n"
      "tier.edge.serves: detect, recognize\n"
      "delay.iot.edge: 2\n"
      "delay.iot.cloud: 40\n"
      "delay.edge.cloud: 38\n"
      "backend.minio.kind: object\n"
      "backend.minio.home: edge\n"
      "backend.s3.kind: object\n"
      "backend.s3.home: cloud\n"
      "place.recognize: cloud\n"
      "autoscale.min: 10\n"
      "autoscale.max: 50\n"
      "autoscale.factor: 0.5\n"
      "autoscale.high: 0.9\n"
      "autoscale.low: 0.2\n"
      "autoscale.cooldown: 1000\n"
      "autoscale.tick: 250\n"
      "sync_timeout: 5000\n"
      "failure_budget: 0.05\n"
      "param.fps: 10\n"
      "param.chunk.frames: 7\n";
  auto cfg = parse_scenario(text, "fallback");
  CHECK(cfg.name == "demo");
  CHECK(cfg.workflow_dir == "workloads/video");
  CHECK(cfg.mode == ScenarioConfig::Mode::Cron);
  CHECK(cfg.concurrency == 4);
  CHECK(cfg.duration_ms == 30000);
  CHECK(cfg.seed == 42);
  CHECK(cfg.time_scale == doctest::Approx(1.0 / 60));
  CHECK(cfg.effective_duration_ms() == doctest::Approx(500.0));
  CHECK(cfg.scale(3000) == doctest::Approx(50.0));
  CHECK(cfg.tier_speeds ==
        std::map<std::string, double>{
            {"iot", 0.25}, {"edge", 1.0}, {"cloud", 2.0}});
  CHECK(cfg.tier_urls.at("edge") == "http://127.0.0.1:8001");
  CHECK(cfg.tier_serves.at("edge") ==
        std::set<std::string>{"detect", "recognize"});
  CHECK(cfg.delays.one_way("edge", "iot") == 2);
  CHECK(cfg.delays.one_way("cloud", "iot") == 40);
  REQUIRE(cfg.backends.size() == 2);
  CHECK(cfg.backends[0].name == "minio");
  CHECK(cfg.backends[0].kind == BackendKind::Object);
  CHECK(cfg.backends[0].tier == "edge");
  CHECK(cfg.backends[1].name == "s3");
  CHECK(cfg.backends[1].tier == "cloud");
  CHECK(cfg.placement.at("recognize") == "cloud");
  CHECK(cfg.autoscale.min_replicas == 10);
  CHECK(cfg.autoscale.max_replicas == 50);
  CHECK(cfg.autoscale.factor == 0.5);
  CHECK(cfg.autoscale.high_watermark == 0.9);
  CHECK(cfg.autoscale.low_watermark == 0.2);
  CHECK(cfg.autoscale.cooldown_ms == 1000);
  CHECK(cfg.autoscale.tick_ms == 250);
  CHECK(cfg.sync_timeout_ms == 5000);
  CHECK(cfg.failure_budget == 0.05);
  CHECK(cfg.params.at("fps") == "10");
  CHECK(cfg.params.at("chunk.frames") == "7");
}

TEST_CASE("scenario parse rejects bad input with the offending line") {
  auto bad = [](Err want, const std::string& text, int line) {
    expect_err(want, [&] { parse_scenario(text); }, line);
  };
  bad(Err::InvalidScenario, "mode: open\nduration: 5\n", 1);
  bad(Err::InvalidScenario, "concurrency: 0\nduration: 5\n", 1);
  bad(Err::InvalidScenario, "concurrency: -2\nduration: 5\n", 1);
  bad(Err::InvalidScenario, "concurrency: 2.5\nduration: 5\n", 1);
  bad(Err::InvalidScenario, "duration: 0\n", 1);
  bad(Err::InvalidScenario, "duration: abc\n", 1);
  bad(Err::InvalidScenario, "", 0);
  bad(Err::InvalidScenario, "seed: 1\n", 0);
  bad(Err::UnknownKey, "duration: 5\nbogus: 1\n", 2);
  bad(Err::UnknownKey, "duration: 5\ntier.edge.flavor: x\n", 2);
  bad(Err::UnknownKey, "duration: 5\nautoscale.rate: 2\n", 2);
  bad(Err::UnknownKey, "duration: 5\nbackend.minio.port: 1\n", 2);
  bad(Err::UnknownKey, "duration: 5\ndelay.iot: 3\n", 2);
  bad(Err::DuplicateKey, "duration: 5\nduration: 6\n", 2);
  bad(Err::DuplicateKey, "seed: 1\nduration: 5\nseed: 2\n", 3);
  bad(Err::InvalidScenario, "time_scale: nope\nduration: 5\n", 1);
  bad(Err::InvalidScenario, "time_scale: 0\nduration: 5\n", 1);
  bad(Err::InvalidScenario, "duration: 5\ntier..speed: 1\n", 2);
  bad(Err::InvalidScenario, "duration: 5\ntier.edge.speed: 0\n", 2);
  bad(Err::InvalidScenario, "duration: 5\nbackend.minio.kind: blob\n", 2);
  bad(Err::InvalidScenario, "duration: 5\ndelay.iot.edge: -1\n", 2);
  bad(Err::InvalidScenario, "duration: 5\ndelay.iot.iot: 3\n", 2);
  bad(Err::InvalidScenario, "duration: 5\nsync_timeout: 0\n", 2);
  bad(Err::InvalidScenario, "duration: 5\nfailure_budget: 1.5\n", 2);
  bad(Err::InvalidScenario, "duration: 5\nfailure_budget: -0.1\n", 2);
  bad(Err::InvalidScenario, "duration: 5\nseed: abc\n", 2);
  // Consistency checks report against the whole file.
  bad(Err::InvalidScenario, "duration: 5\nbackend.minio.kind: object\n", 0);
  bad(Err::InvalidScenario, "duration: 5\nautoscale.min: 0\n", 0);
  bad(Err::InvalidScenario, "duration: 5\nautoscale.low: 2\n", 0);
  bad(Err::InvalidScenario, "duration: 5\nautoscale.max: 3\n", 0);
  expect_err(Err::Syntax, [] { parse_scenario("nocolon\n"); });
}

TEST_CASE("scenario defaults describe a stock three-tier box") {
  auto cfg = parse_scenario("duration: 1000\n", "smoke");
  CHECK(cfg.name == "smoke");
  CHECK(cfg.mode == ScenarioConfig::Mode::Closed);
  CHECK(cfg.concurrency == 1);
  CHECK(cfg.seed == 0);
  CHECK(cfg.time_scale == doctest::Approx(1.0 / 60));
  CHECK(cfg.tier_speeds ==
        std::map<std::string, double>{
            {"iot", 0.25}, {"edge", 1.0}, {"cloud", 2.0}});
  CHECK(cfg.tier_urls.empty());
  CHECK(cfg.backends.empty());
  CHECK(cfg.placement.empty());
  CHECK(cfg.params.empty());
  CHECK(cfg.autoscale.min_replicas == 25);
  CHECK(cfg.autoscale.max_replicas == 100);
  CHECK(cfg.autoscale.factor == 0.25);
  CHECK(cfg.autoscale.high_watermark == 1.0);
  CHECK(cfg.autoscale.low_watermark == 0.25);
  CHECK(cfg.autoscale.cooldown_ms == 2000);
  CHECK(cfg.autoscale.tick_ms == 500);
  CHECK(cfg.sync_timeout_ms == 30000);
  CHECK(cfg.failure_budget == 1.0);

  // Any explicit tier declaration replaces the stock topology.
  auto own = parse_scenario("duration: 5\ntier.box.speed: 2\n");
  CHECK(own.tier_speeds == std::map<std::string, double>{{"box", 2.0}});
}

TEST_CASE("scenario files take their name from the stem") {
  auto dir = std::filesystem::temp_directory_path() / "efsched";
  std::filesystem::create_directories(dir);
  auto path = dir / "three_tier.scn";
  std::ofstream(path) << "duration: 10\nseed: 5\n";
  auto cfg = load_scenario_file(path.string());
  CHECK(cfg.name == "three_tier");
  CHECK(cfg.seed == 5);

  std::ofstream(path) << "scenario: named\nduration: 10\n";
  CHECK(load_scenario_file(path.string()).name == "named");
  expect_err(Err::InvalidScenario,
             [&] { load_scenario_file((dir / "absent.scn").string()); });
}

TEST_CASE("placement rewrites nodes and the edges into them") {
  std::vector<FunctionTemplate> ts = {
      parse_template("name: s0\ntier: edge\nhandler: h0\nsync: sync\n"
                     "next_function: s1\nnext_tier: edge\n"),
      parse_template("name: s1\ntier: edge\nhandler: h1\nsync: sync\n")};
  auto g = build_graph("wf", ts);
  apply_placement(g, {{"s1", "cloud"}});
  CHECK(g.nodes.at("s1").tier == "cloud");
  REQUIRE(g.nodes.at("s0").nexts.size() == 1);
  CHECK(g.nodes.at("s0").nexts[0].second.tier == "cloud");

  expect_err(Err::InvalidScenario,
             [&] { apply_placement(g, {{"ghost", "cloud"}}); });
}

TEST_CASE("cluster config fills speeds by tier name and free links") {
  ScenarioConfig cfg = parse_scenario("duration: 5\n");
  cfg.tier_speeds.clear();
  cfg.tier_urls["iot"] = "http://a";
  cfg.tier_speeds["edge"] = 1.5;
  cfg.tier_serves["cloud"] = {"s9"};
  auto cc = cluster_config_from(cfg);
  CHECK(cc.tiers.at("iot").speed == 0.25);
  CHECK(cc.tiers.at("edge").speed == 1.5);
  CHECK(cc.tiers.at("cloud").speed == 2.0);
  CHECK(cc.tiers.at("iot").base_url == "http://a");
  CHECK(cc.tiers.at("cloud").served_functions ==
        std::set<std::string>{"s9"});
  // No declared links: every hop is free and the matrix still validates.
  CHECK(cc.delays.one_way("iot", "cloud") == 0);
  cc.delays.validate(cc.tiers);

  ScenarioConfig with = parse_scenario(
      "duration: 5\ndelay.iot.edge: 2\ndelay.iot.cloud: 40\n"
      "delay.edge.cloud: 38\n");
  auto cc2 = cluster_config_from(with);
  CHECK(cc2.tiers.at("cloud").speed == 2.0);
  CHECK(cc2.delays.one_way("edge", "cloud") == 38);
  CHECK(cc2.sync_timeout_ms == 30000);
}

TEST_CASE("request ids are deterministic, distinct, well formed") {
  CHECK(closed_loop_request_id(1, 0, 0) == closed_loop_request_id(1, 0, 0));
  CHECK(cron_request_id(1, 0, 0) == cron_request_id(1, 0, 0));
  std::set<std::string> ids;
  for (uint64_t seed : {1ull, 2ull})
    for (int a = 0; a < 10; ++a)
      for (int b = 0; b < 10; ++b) {
        auto c = closed_loop_request_id(seed, a, b);
        auto k = cron_request_id(seed, a, b);
        CHECK(uuid_shaped(c));
        CHECK(uuid_shaped(k));
        ids.insert(c);
        ids.insert(k);
      }
  CHECK(ids.size() == 400);  // no collisions across families or seeds
}

TEST_CASE("closed loop issues back to back for the whole window") {
  auto g = solo_graph();
  HandlerRegistry hr;
  add_cost_handler(hr, 10);
  auto out = run_sim(closed_cfg(1000), g, hr);
  CHECK(out.stats.issued == 100);
  CHECK(out.stats.ok == 100);
  CHECK(out.stats.failed == 0);
  CHECK(out.stats.inflight_max == 1);
  CHECK(out.report.requests == 100);
  CHECK(out.report.complete == 100);
  CHECK(out.report.incomplete == 0);
  REQUIRE(out.report.mean_end_to_end_ms.has_value());
  CHECK(*out.report.mean_end_to_end_ms == doctest::Approx(10.0));
  REQUIRE(out.report.p95_end_to_end_ms.has_value());
  CHECK(*out.report.p95_end_to_end_ms == doctest::Approx(10.0));
  CHECK(out.counters.at("invoked.s0") == 100);
  CHECK(out.report.autoscale.empty());  // 1 inflight never crosses a mark
}

TEST_CASE("closed loop runs one stream per concurrency slot") {
  auto g = solo_graph();
  HandlerRegistry hr;
  add_cost_handler(hr, 10);
  auto out = run_sim(closed_cfg(1000, 5), g, hr);
  CHECK(out.stats.issued == 500);
  CHECK(out.stats.ok == 500);
  CHECK(out.stats.inflight_max == 5);
  CHECK(out.report.requests == 500);
  CHECK(out.report.complete == 500);
}

TEST_CASE("entry failures are counted, never fatal") {
  auto g = solo_graph();
  HandlerRegistry hr;
  hr.add("h0", [](HandlerCtx&, const std::vector<DataObject>&)
                   -> std::vector<NamedObject> {
    throw std::runtime_error("wedged sensor");
  });
  // Zero-cost failures lean on the 1 ms pacing guard to make progress.
  auto out = run_sim(closed_cfg(50), g, hr);
  CHECK(out.stats.issued == 50);
  CHECK(out.stats.ok == 0);
  CHECK(out.stats.failed == 50);
  CHECK(out.report.requests == 50);
  CHECK_FALSE(out.report.p95_end_to_end_ms.has_value());
}

TEST_CASE("cron fires its full burst at every anchored period") {
  auto g = solo_graph("cron: 3s\ncron_burst: 20\n");
  HandlerRegistry hr;
  add_cost_handler(hr, 1);
  ScenarioConfig cfg = closed_cfg(30000, 1, 3);
  cfg.mode = ScenarioConfig::Mode::Cron;
  auto out = run_sim(cfg, g, hr);
  CHECK(out.stats.issued == 200);
  CHECK(out.stats.ok == 200);
  CHECK(out.report.requests == 200);
  CHECK(out.counters.at("invoked.s0") == 200);

  std::map<double, int> per_start;
  for (double t : entry_starts(out)) per_start[t]++;
  REQUIRE(per_start.size() == 10);
  double expect = 0;
  for (const auto& [t, n] : per_start) {
    CHECK(t == doctest::Approx(expect));
    CHECK(n == 20);
    expect += 3000;
  }
}

TEST_CASE("time scale compresses cron periods but not the firing count") {
  auto g = solo_graph("cron: 3s\ncron_burst: 20\n");
  HandlerRegistry hr;
  add_cost_handler(hr, 1);
  ScenarioConfig cfg = closed_cfg(30000, 1, 3);
  cfg.mode = ScenarioConfig::Mode::Cron;
  cfg.time_scale = 0.1;
  auto out = run_sim(cfg, g, hr);
  CHECK(out.stats.issued == 200);
  auto all = entry_starts(out);
  std::set<double> starts(all.begin(), all.end());
  CHECK(starts.size() == 10);
  CHECK(*starts.rbegin() == doctest::Approx(2700.0));
  CHECK(out.report.time_scale == doctest::Approx(0.1));
}

TEST_CASE("cron stays on schedule when chains outlive the period") {
  auto g = solo_graph("cron: 1s\n");
  HandlerRegistry hr;
  add_cost_handler(hr, 2000);
  ScenarioConfig cfg = closed_cfg(10000, 1, 4);
  cfg.mode = ScenarioConfig::Mode::Cron;
  auto out = run_sim(cfg, g, hr);
  CHECK(out.stats.issued == 10);
  CHECK(out.stats.inflight_max == 2);  // each firing overlaps its successor
  auto all = entry_starts(out);
  std::set<double> starts(all.begin(), all.end());
  REQUIRE(starts.size() == 10);
  double expect = 0;
  for (double t : starts) {
    CHECK(t == doctest::Approx(expect));
    expect += 1000;
  }
}

TEST_CASE("cron mode demands a cron entry") {
  auto g = solo_graph();
  HandlerRegistry hr;
  add_cost_handler(hr, 1);
  ScenarioConfig cfg = closed_cfg(1000);
  cfg.mode = ScenarioConfig::Mode::Cron;
  expect_err(Err::InvalidScenario, [&] { run_sim(cfg, g, hr); });
}

TEST_CASE("time scale shortens the closed loop window") {
  auto g = solo_graph();
  HandlerRegistry hr;
  add_cost_handler(hr, 10);
  ScenarioConfig cfg = closed_cfg(60000);
  cfg.time_scale = 1.0 / 60;
  auto out = run_sim(cfg, g, hr);
  CHECK(out.stats.issued == 100);
  CHECK(out.report.time_scale == doctest::Approx(1.0 / 60));
}

TEST_CASE("same scenario and seed reproduce the report byte for byte") {
  auto g = solo_graph();
  HandlerRegistry hr;
  hr.add("h0", [](HandlerCtx& ctx, const std::vector<DataObject>&)
                   -> std::vector<NamedObject> {
    auto rng = ctx.rng();
    ctx.compute(1.0 + static_cast<double>(rng.bounded(5)));
    return {};
  });
  ScenarioConfig cfg = closed_cfg(500, 3, 11);
  auto a = run_sim(cfg, g, hr);
  auto b = run_sim(cfg, g, hr);
  CHECK(report_json(a.report) == report_json(b.report));
  CHECK(a.counters == b.counters);
  CHECK(a.stats.issued == b.stats.issued);

  ScenarioConfig other = cfg;
  other.seed = 12;
  auto c = run_sim(other, g, hr);
  CHECK(report_json(a.report) != report_json(c.report));
}

TEST_CASE("driver load walks the autoscaler up the expected ladder") {
  auto g = solo_graph();
  HandlerRegistry hr;
  add_cost_handler(hr, 100);
  auto out = run_sim(closed_cfg(8000, 60), g, hr);
  CHECK(out.stats.inflight_max == 60);
  std::vector<std::pair<double, int>> got;
  for (const auto& e : out.report.autoscale) {
    CHECK(e.function == "s0");
    got.push_back({e.t_ms, e.replicas});
  }
  std::vector<std::pair<double, int>> want = {
      {500, 32}, {2500, 40}, {4500, 50}, {6500, 63}};
  CHECK(got == want);
}

TEST_CASE("live driver posts through a gateway and gathers its spans") {
  auto g = solo_graph();
  HandlerRegistry hr;
  add_cost_handler(hr, 5);

  auto ex = make_real_exec();
  BackendRegistry view, local;
  Collector col;
  RuntimeEnv env;
  env.exec = ex.get();
  env.graph = &g;
  env.backends = &view;
  env.handlers = &hr;
  env.collector = &col;
  env.tier_speeds = {{"edge", 1.0}};
  env.run_seed = 21;
  TierDescriptor self{"edge", "", 1.0, {}};
  GatewayServer server(env, self, local);
  int port = server.start_background("127.0.0.1");
  std::string url = "http://127.0.0.1:" + std::to_string(port);
  RealInvoker invoker(TierSet({{"edge", url, 1.0, {}}}), *ex, col);
  env.invoker = &invoker;

  ScenarioConfig cfg = closed_cfg(300, 2, 21);
  cfg.tier_urls["edge"] = url;
  auto out = run_real(cfg, g);
  server.stop();

  CHECK(out.stats.issued >= 4);
  CHECK(out.stats.ok == out.stats.issued);
  CHECK(out.stats.failed == 0);
  CHECK(out.stats.inflight_max == 2);
  CHECK(out.report.requests == out.stats.issued);
  CHECK(out.report.autoscale.empty());

  // The driver mints the same ids the simulation would.
  std::set<std::string> expected;
  for (int stream = 0; stream < 2; ++stream)
    for (int seq = 0; seq < 10000; ++seq)
      expected.insert(closed_loop_request_id(21, stream, seq));
  std::set<std::string> seen;
  for (const auto& o : out.report.outcomes) {
    CHECK(expected.count(o.request_id) == 1);
    seen.insert(o.request_id);
  }
  CHECK(seen.count(closed_loop_request_id(21, 0, 0)) == 1);
  CHECK(seen.count(closed_loop_request_id(21, 1, 0)) == 1);
}
