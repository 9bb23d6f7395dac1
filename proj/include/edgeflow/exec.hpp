#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>

namespace edgeflow {

// One-shot completion gate.
class Event {
 public:
  virtual ~Event() = default;
  virtual void wait() = 0;
  virtual void fire() = 0;
  virtual bool fired() = 0;
};

// Adjustable counting semaphore; bounds how many invocations of a function
// run at once (a "replica" is one slot, not a container).
class Slots {
 public:
  virtual ~Slots() = default;
  virtual void acquire() = 0;
  virtual void release() = 0;
  virtual void set_capacity(int n) = 0;
  virtual int capacity() = 0;
  virtual int in_use() = 0;
};

// Execution seam. Everything above the transport layer (runtime, scheduler,
// workloads) is written against this interface; swapping the implementation
// switches between wall-clock execution and the deterministic simulation.
class Exec {
 public:
  virtual ~Exec() = default;

  virtual int64_t now_us() = 0;
  virtual void sleep_us(int64_t us) = 0;
  virtual void spawn(std::function<void()> body) = 0;
  virtual std::shared_ptr<Event> make_event() = 0;
  virtual std::shared_ptr<Slots> make_slots(int capacity) = 0;

  // Blocks until every spawned task has finished.
  virtual void run_until_idle() = 0;

  virtual bool simulated() const = 0;

  double now_ms() { return static_cast<double>(now_us()) / 1000.0; }
  void sleep_ms(double ms) {
    if (ms > 0) sleep_us(std::llround(ms * 1000.0));
  }
};

// Wall clock, OS threads, timestamps in microseconds since the Unix epoch
// (real-mode spans from different processes on one host must align).
std::unique_ptr<Exec> make_real_exec();

// Deterministic cooperative simulation. Tasks are real threads but exactly
// one is runnable at a time; the virtual clock starts at zero and only moves
// when every task is blocked. Wake order is (time, enqueue-seq), so a seeded
// program yields one possible schedule.
std::unique_ptr<Exec> make_sim_exec();

}  // namespace edgeflow
