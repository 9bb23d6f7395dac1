#include "edgeflow/workloads.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "edgeflow/errors.hpp"
#include "edgeflow/kvfile.hpp"
#include "edgeflow/rng.hpp"
#include "json.hpp"

namespace edgeflow {

namespace {

double num_param(const std::map<std::string, std::string>& kv,
                 const std::string& key, double fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    size_t used = 0;
    double v = std::stod(it->second, &used);
    if (used != it->second.size() || !std::isfinite(v))
      throw std::invalid_argument("garbage");
    return v;
  } catch (const std::exception&) {
    throw Error(Err::InvalidScenario,
                "bad value '" + it->second + "' for param " + key);
  }
}

void check(bool ok, const std::string& what) {
  if (!ok) throw Error(Err::InvalidScenario, what);
}

int64_t frames_in(const std::vector<DataObject>& in, int64_t frame_bytes) {
  if (in.empty() || frame_bytes <= 0) return 0;
  return static_cast<int64_t>(in[0].bytes.size()) / frame_bytes;
}

}  // namespace

void VideoPipelineParams::validate() const {
  check(fps > 0, "fps must be positive");
  check(chunk_frames > 0, "chunk_frames must be positive");
  check(frame_bytes > 0, "frame_bytes must be positive");
  check(motion_pass_p >= 0 && motion_pass_p <= 1,
        "motion_pass_p must be within [0, 1]");
  check(face_pass_p >= 0 && face_pass_p <= 1,
        "face_pass_p must be within [0, 1]");
  check(cost_generator_ms >= 0 && cost_motion_ms >= 0 &&
            cost_detect_ms >= 0 && cost_recognize_ms >= 0,
        "stage costs must be >= 0");
}

VideoPipelineParams VideoPipelineParams::from_params(
    const std::map<std::string, std::string>& kv) {
  VideoPipelineParams p;
  p.fps = num_param(kv, "fps", p.fps);
  p.chunk_frames =
      static_cast<int>(num_param(kv, "chunk_frames", p.chunk_frames));
  p.frame_bytes = static_cast<int64_t>(
      num_param(kv, "frame_bytes", static_cast<double>(p.frame_bytes)));
  p.motion_pass_p = num_param(kv, "motion_pass_p", p.motion_pass_p);
  p.face_pass_p = num_param(kv, "face_pass_p", p.face_pass_p);
  p.cost_generator_ms = num_param(kv, "cost.generator", p.cost_generator_ms);
  p.cost_motion_ms = num_param(kv, "cost.motion", p.cost_motion_ms);
  p.cost_detect_ms = num_param(kv, "cost.detect", p.cost_detect_ms);
  p.cost_recognize_ms = num_param(kv, "cost.recognize", p.cost_recognize_ms);
  p.validate();
  return p;
}

void register_video_handlers(HandlerRegistry& reg,
                             const VideoPipelineParams& p) {
  p.validate();

  reg.add("video.generator",
          [p](HandlerCtx& ctx, const std::vector<DataObject>&)
              -> std::vector<NamedObject> {
    ctx.compute(p.cost_generator_ms);
    ctx.counters().inc("chunks.generated");
    ctx.counters().inc("frames.generated", p.chunk_frames);
    size_t bytes = static_cast<size_t>(p.chunk_frames) *
                   static_cast<size_t>(p.frame_bytes);
    return {{"chunk", std::string(bytes, 'v')}};
  });

  reg.add("video.motion",
          [p](HandlerCtx& ctx, const std::vector<DataObject>& in)
              -> std::vector<NamedObject> {
    ctx.compute(p.cost_motion_ms);
    int64_t frames = frames_in(in, p.frame_bytes);
    auto rng = ctx.rng();
    int64_t passed = 0;
    for (int64_t i = 0; i < frames; ++i)
      if (rng.bernoulli(p.motion_pass_p)) ++passed;
    ctx.counters().inc("chunks.motion");
    ctx.counters().inc("frames.motion", passed);
    // An empty frame set still flows on so the chain always completes.
    size_t bytes = static_cast<size_t>(passed * p.frame_bytes);
    return {{"frames", std::string(bytes, 'm')}};
  });

  reg.add("video.detect",
          [p](HandlerCtx& ctx, const std::vector<DataObject>& in)
              -> std::vector<NamedObject> {
    ctx.compute(p.cost_detect_ms);
    int64_t frames = frames_in(in, p.frame_bytes);
    auto rng = ctx.rng();
    int64_t faces = 0;
    for (int64_t i = 0; i < frames; ++i)
      if (rng.bernoulli(p.face_pass_p)) ++faces;
    ctx.counters().inc("chunks.detect");
    ctx.counters().inc("frames.face", faces);
    if (faces == 0) {
      ctx.counters().inc("chunks.no_face");
      return {{"no_face", "none"}};
    }
    ctx.counters().inc("chunks.has_face");
    size_t bytes = static_cast<size_t>(faces * p.frame_bytes);
    return {{"has_face", std::string(bytes, 'f')}};
  });

  reg.add("video.recognize",
          [p](HandlerCtx& ctx, const std::vector<DataObject>& in)
              -> std::vector<NamedObject> {
    ctx.compute(p.cost_recognize_ms);
    int64_t faces = frames_in(in, p.frame_bytes);
    ctx.counters().inc("chunks.recognized");
    ctx.counters().inc("frames.recognized", faces);
    return {{"result", "faces:" + std::to_string(faces)}};
  });
}

std::string record_to_json(const SensorRecord& r) {
  char buf[256];
  std::snprintf(
      buf, sizeof(buf),
      "{\"sensor_id\":\"%.5s\",\"latitude\":\"%11.6f\","
      "\"longitude\":\"%11.6f\",\"elevation\":\"%7.2f\","
      "\"temperature\":\"%6.2f\",\"moisture\":\"%6.4f\","
      "\"power\":\"%6.2f\",\"health\":\"%-8.8s\",\"t\":\"%015lld\"}",
      r.sensor_id.c_str(), r.latitude, r.longitude, r.elevation,
      r.temperature, r.moisture, r.power, r.health.c_str(),
      static_cast<long long>(r.t));
  return buf;
}

SensorRecord record_from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  auto field = [&](const char* name) {
    return kv::trim(j.at(name).get<std::string>());
  };
  SensorRecord r;
  r.sensor_id = field("sensor_id");
  r.latitude = std::stod(field("latitude"));
  r.longitude = std::stod(field("longitude"));
  r.elevation = std::stod(field("elevation"));
  r.temperature = std::stod(field("temperature"));
  r.moisture = std::stod(field("moisture"));
  r.power = std::stod(field("power"));
  r.health = field("health");
  r.t = std::stoll(field("t"));
  return r;
}

SensorRecord make_sensor_record(uint64_t seed, int sensor, int64_t t_ms) {
  Rng rng(mix64(seed, static_cast<uint64_t>(sensor) + 0x5e5e0001ULL));
  SensorRecord r;
  char id[8];
  std::snprintf(id, sizeof(id), "s%04d", sensor % 10000);
  r.sensor_id = id;
  r.latitude = -90.0 + rng.uniform() * 180.0;
  r.longitude = -180.0 + rng.uniform() * 360.0;
  r.elevation = rng.uniform() * 2000.0;
  r.temperature = -20.0 + rng.uniform() * 60.0;
  r.moisture = rng.uniform();
  r.power = rng.uniform() * 100.0;
  double u = rng.uniform();
  r.health = u < 0.90 ? "ok" : u < 0.97 ? "degraded" : "failed";
  r.t = t_ms;
  return r;
}

void WindowIndex::append(SensorRecord r) {
  std::lock_guard<std::mutex> lk(mu_);
  records_.push_back(std::move(r));
}

std::vector<SensorRecord> WindowIndex::since(int64_t t_ms) const {
  std::lock_guard<std::mutex> lk(mu_);
  std::vector<SensorRecord> out;
  for (const auto& r : records_)
    if (r.t >= t_ms) out.push_back(r);
  return out;
}

size_t WindowIndex::size() const {
  std::lock_guard<std::mutex> lk(mu_);
  return records_.size();
}

void IoTHubParams::validate() const {
  check(sensors > 0, "sensors must be positive");
  check(emit_period_ms > 0 && train_period_ms > 0 &&
            predict_period_ms > 0 && query_period_ms > 0,
        "periods must be positive");
  check(train_window_ms > 0 && predict_window_ms > 0,
        "windows must be positive");
  check(cost_train_ms >= 0 && cost_predict_ms >= 0 && cost_query_ms >= 0,
        "job costs must be >= 0");
  check(model_bytes > 0, "model_bytes must be positive");
  check(query_pool().size() == 12, "query pool must hold 12 entries");
  parse_storage_ref(model_ref);  // throws when malformed
}

IoTHubParams IoTHubParams::from_params(
    const std::map<std::string, std::string>& kv) {
  IoTHubParams p;
  p.sensors = static_cast<int>(num_param(kv, "sensors", p.sensors));
  p.emit_period_ms = num_param(kv, "emit_period", p.emit_period_ms);
  p.train_period_ms = num_param(kv, "train_period", p.train_period_ms);
  p.train_window_ms = num_param(kv, "train_window", p.train_window_ms);
  p.predict_period_ms = num_param(kv, "predict_period", p.predict_period_ms);
  p.predict_window_ms = num_param(kv, "predict_window", p.predict_window_ms);
  p.query_period_ms = num_param(kv, "query_period", p.query_period_ms);
  p.cost_train_ms = num_param(kv, "cost.train", p.cost_train_ms);
  p.cost_predict_ms = num_param(kv, "cost.predict", p.cost_predict_ms);
  p.cost_query_ms = num_param(kv, "cost.query", p.cost_query_ms);
  p.model_bytes = static_cast<int64_t>(
      num_param(kv, "model_bytes", static_cast<double>(p.model_bytes)));
  auto it = kv.find("model_ref");
  if (it != kv.end()) p.model_ref = it->second;
  p.validate();
  return p;
}

const std::vector<std::string>& query_pool() {
  static const std::vector<std::string> pool = {
      "temperature-avg", "temperature-min", "temperature-max",
      "moisture-avg",    "moisture-min",    "moisture-max",
      "power-avg",       "power-min",       "power-max",
      "elevation-max",   "health-failed",   "sensor-count",
  };
  return pool;
}

namespace {

// Deterministic stand-in for trained weights: a digest of the window,
// cycled out to the configured size so storage spans stay realistic.
std::string window_digest(const std::vector<SensorRecord>& window,
                          int64_t bytes) {
  uint64_t h = hash_str("model");
  for (const auto& r : window) h = mix64(h, hash_str(record_to_json(r)));
  char hex[24];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(h));
  std::string unit(hex);  // 16 hex chars
  std::string out;
  out.reserve(static_cast<size_t>(bytes));
  while (out.size() < static_cast<size_t>(bytes))
    out.append(unit, 0,
               std::min(unit.size(), static_cast<size_t>(bytes) - out.size()));
  return out;
}

}  // namespace

std::shared_ptr<WindowIndex> register_iothub_handlers(HandlerRegistry& reg,
                                                      const IoTHubParams& p) {
  p.validate();
  auto index = std::make_shared<WindowIndex>();
  StorageRef model = parse_storage_ref(p.model_ref);

  reg.add("iothub.sensor",
          [p, index](HandlerCtx& ctx, const std::vector<DataObject>&)
              -> std::vector<NamedObject> {
    int64_t now = std::llround(ctx.exec().now_ms());
    std::vector<NamedObject> out;
    out.reserve(static_cast<size_t>(p.sensors));
    for (int s = 0; s < p.sensors; ++s) {
      SensorRecord r = make_sensor_record(mix64(ctx.seed(), s), s, now);
      index->append(r);
      out.push_back({"sensor-data", record_to_json(r)});
    }
    ctx.counters().inc("sensor.records", p.sensors);
    return out;
  });

  reg.add("iothub.train",
          [p, index](HandlerCtx& ctx, const std::vector<DataObject>&)
              -> std::vector<NamedObject> {
    int64_t now = std::llround(ctx.exec().now_ms());
    auto window =
        index->since(now - static_cast<int64_t>(p.train_window_ms));
    ctx.compute(p.cost_train_ms);
    ctx.counters().inc("train.runs");
    ctx.counters().inc("train.window_records",
                       static_cast<int64_t>(window.size()));
    return {{"model", window_digest(window, p.model_bytes)}};
  });

  reg.add("iothub.predict",
          [p, index, model](HandlerCtx& ctx, const std::vector<DataObject>&)
              -> std::vector<NamedObject> {
    auto weights = ctx.load_optional(model);
    int64_t now = std::llround(ctx.exec().now_ms());
    auto window =
        index->since(now - static_cast<int64_t>(p.predict_window_ms));
    ctx.compute(p.cost_predict_ms);
    if (!weights) {
      // No training has landed yet; answer from priors instead of failing.
      ctx.counters().inc("predict.cold");
      return {{"prediction", "cold"}};
    }
    ctx.counters().inc("predict.warm");
    return {{"prediction", "pred:" + weights->bytes.substr(0, 16) + ":" +
                               std::to_string(window.size())}};
  });

  reg.add("iothub.query",
          [p, index](HandlerCtx& ctx, const std::vector<DataObject>&)
              -> std::vector<NamedObject> {
    auto rng = ctx.rng();
    const auto& pool = query_pool();
    const std::string& qid = pool[rng.bounded(pool.size())];
    int64_t now = std::llround(ctx.exec().now_ms());
    auto window =
        index->since(now - static_cast<int64_t>(p.predict_window_ms));
    ctx.compute(p.cost_query_ms);
    ctx.counters().inc("query.runs");
    ctx.counters().inc("query.pick." + qid);
    return {{"query-result", qid + "=" + std::to_string(window.size())}};
  });

  return index;
}

std::map<std::string, std::map<std::string, std::string>> placement_presets() {
  return {
      {"iot-edge",
       {{"generator", "iot"},
        {"motion", "iot"},
        {"detect", "edge"},
        {"recognize", "edge"}}},
      {"iot-cloud",
       {{"generator", "iot"},
        {"motion", "iot"},
        {"detect", "cloud"},
        {"recognize", "cloud"}}},
      {"three-tiers",
       {{"generator", "iot"},
        {"motion", "iot"},
        {"detect", "edge"},
        {"recognize", "cloud"}}},
  };
}

std::shared_ptr<WindowIndex> register_workloads(
    HandlerRegistry& reg, const std::map<std::string, std::string>& params) {
  register_video_handlers(reg, VideoPipelineParams::from_params(params));
  return register_iothub_handlers(reg, IoTHubParams::from_params(params));
}

}  // namespace edgeflow
