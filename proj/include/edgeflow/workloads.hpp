#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "edgeflow/runtime.hpp"

namespace edgeflow {

// Tuning for the four-stage video pipeline. Stage pass probabilities are
// per frame; their product is the fraction of frames that reach the
// recognition stage.
struct VideoPipelineParams {
  double fps = 10;
  int chunk_frames = 10;          // frames per generated chunk
  int64_t frame_bytes = 64 * 1024;
  double motion_pass_p = 0.45;
  double face_pass_p = 0.40;
  double cost_generator_ms = 2;
  double cost_motion_ms = 8;
  double cost_detect_ms = 10;
  double cost_recognize_ms = 25;

  double recognition_reach() const { return motion_pass_p * face_pass_p; }
  void validate() const;
  static VideoPipelineParams from_params(
      const std::map<std::string, std::string>& kv);
};

// Registers video.generator / video.motion / video.detect / video.recognize.
void register_video_handlers(HandlerRegistry& reg,
                             const VideoPipelineParams& p);

struct SensorRecord {
  std::string sensor_id;  // "s" + 4 digits
  double latitude = 0;
  double longitude = 0;
  double elevation = 0;
  double temperature = 0;  // Celsius
  double moisture = 0;     // fraction
  double power = 0;        // watts
  std::string health = "ok";  // ok | degraded | failed
  int64_t t = 0;              // ms
};

// Canonical fixed-width serialization: field order never changes and every
// record is exactly the same byte count.
std::string record_to_json(const SensorRecord& r);
SensorRecord record_from_json(const std::string& text);
SensorRecord make_sensor_record(uint64_t seed, int sensor, int64_t t_ms);

// The hub's "database" role: a time-indexed append log with snapshot reads.
class WindowIndex {
 public:
  void append(SensorRecord r);
  std::vector<SensorRecord> since(int64_t t_ms) const;
  size_t size() const;

 private:
  mutable std::mutex mu_;
  std::vector<SensorRecord> records_;
};

struct IoTHubParams {
  int sensors = 100;
  double emit_period_ms = 1000;
  double train_period_ms = 30.0 * 60 * 1000;
  double train_window_ms = 30.0 * 60 * 1000;
  double predict_period_ms = 5000;
  double predict_window_ms = 30000;
  double query_period_ms = 3000;
  double cost_train_ms = 2000;
  double cost_predict_ms = 40;
  double cost_query_ms = 15;
  int64_t model_bytes = 1 << 20;
  std::string model_ref = "minio://model";  // where training parks the model

  void validate() const;
  static IoTHubParams from_params(
      const std::map<std::string, std::string>& kv);
};

// The query job draws uniformly from these; exactly 12 entries.
const std::vector<std::string>& query_pool();

// Registers iothub.sensor / iothub.train / iothub.predict / iothub.query.
// The four jobs share the returned window index.
std::shared_ptr<WindowIndex> register_iothub_handlers(HandlerRegistry& reg,
                                                      const IoTHubParams& p);

// The three deployment shapes for the video pipeline: function -> tier.
std::map<std::string, std::map<std::string, std::string>> placement_presets();

// Registers every shipped handler family with scenario params applied.
// Returns the iot window index so drivers can inspect it.
std::shared_ptr<WindowIndex> register_workloads(
    HandlerRegistry& reg, const std::map<std::string, std::string>& params);

}  // namespace edgeflow
