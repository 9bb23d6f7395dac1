#include "edgeflow/exec.hpp"

#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <map>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "edgeflow/rng.hpp"

namespace edgeflow {

std::string uuid_from(uint64_t a, uint64_t b) {
  char buf[37];
  std::snprintf(buf, sizeof(buf), "%08x-%04x-%04x-%04x-%012llx",
                static_cast<uint32_t>(a >> 32),
                static_cast<uint32_t>((a >> 16) & 0xffff),
                static_cast<uint32_t>(a & 0xffff),
                static_cast<uint32_t>(b >> 48),
                static_cast<unsigned long long>(b & 0xffffffffffffULL));
  buf[14] = '4';
  static const char v[] = "89ab";
  buf[19] = v[(b >> 62) & 3];
  return std::string(buf);
}

namespace {

// ---------------------------------------------------------------- real mode

class RealEvent final : public Event {
 public:
  void wait() override {
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] { return fired_; });
  }
  void fire() override {
    {
      std::lock_guard lk(mu_);
      fired_ = true;
    }
    cv_.notify_all();
  }
  bool fired() override {
    std::lock_guard lk(mu_);
    return fired_;
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  bool fired_ = false;
};

class RealSlots final : public Slots {
 public:
  explicit RealSlots(int cap) : capacity_(cap) {}
  void acquire() override {
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] { return in_use_ < capacity_; });
    ++in_use_;
  }
  void release() override {
    {
      std::lock_guard lk(mu_);
      --in_use_;
    }
    cv_.notify_one();
  }
  void set_capacity(int n) override {
    {
      std::lock_guard lk(mu_);
      capacity_ = n;
    }
    cv_.notify_all();
  }
  int capacity() override {
    std::lock_guard lk(mu_);
    return capacity_;
  }
  int in_use() override {
    std::lock_guard lk(mu_);
    return in_use_;
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  int capacity_;
  int in_use_ = 0;
};

class RealExec final : public Exec {
 public:
  ~RealExec() override { run_until_idle(); }

  int64_t now_us() override {
    using namespace std::chrono;
    return duration_cast<microseconds>(system_clock::now().time_since_epoch())
        .count();
  }

  void sleep_us(int64_t us) override {
    if (us > 0) std::this_thread::sleep_for(std::chrono::microseconds(us));
  }

  void spawn(std::function<void()> body) override {
    std::lock_guard lk(mu_);
    threads_.emplace_back(std::move(body));
  }

  std::shared_ptr<Event> make_event() override {
    return std::make_shared<RealEvent>();
  }

  std::shared_ptr<Slots> make_slots(int capacity) override {
    return std::make_shared<RealSlots>(capacity);
  }

  void run_until_idle() override {
    // Joined threads may spawn more; loop until the list stays empty.
    for (;;) {
      std::vector<std::thread> batch;
      {
        std::lock_guard lk(mu_);
        if (threads_.empty()) return;
        batch.swap(threads_);
      }
      for (auto& t : batch) t.join();
    }
  }

  bool simulated() const override { return false; }

 private:
  std::mutex mu_;
  std::vector<std::thread> threads_;
};

// ----------------------------------------------------------------- sim mode
//
// Tasks are OS threads, but a baton protocol keeps exactly one runnable at a
// time: the driver picks the earliest (time, seq) entry from the run queue,
// hands it the baton, and waits until that task parks itself again (sleep,
// event wait, slot wait) or finishes. The virtual clock jumps to the picked
// entry's timestamp, so any amount of simulated time costs no wall time.

struct SimTask {
  std::thread thread;
  std::condition_variable cv;
  bool active = false;
  std::function<void()> body;
};

struct SimState {
  std::mutex mu;
  std::condition_variable driver_cv;
  int64_t now = 0;
  uint64_t seq = 0;
  int live = 0;
  SimTask* current = nullptr;
  std::map<std::pair<int64_t, uint64_t>, SimTask*> runq;
  std::deque<std::unique_ptr<SimTask>> tasks;
  std::vector<SimTask*> finished;
  std::string first_error;

  // Parks the calling task and blocks until the driver hands it the baton
  // again. Caller holds lk and has already queued itself somewhere.
  void yield(std::unique_lock<std::mutex>& lk, SimTask* self) {
    self->active = false;
    current = nullptr;
    driver_cv.notify_one();
    self->cv.wait(lk, [&] { return self->active; });
  }

  void schedule(SimTask* t) {  // caller holds mu
    runq.emplace(std::make_pair(now, seq++), t);
  }
};

thread_local SimTask* tls_task = nullptr;

class SimEvent final : public Event {
 public:
  explicit SimEvent(std::shared_ptr<SimState> s) : s_(std::move(s)) {}

  void wait() override {
    SimTask* self = tls_task;
    if (!self) throw std::logic_error("sim event wait outside a task");
    std::unique_lock lk(s_->mu);
    if (fired_) return;
    waiters_.push_back(self);
    s_->yield(lk, self);
  }

  void fire() override {
    std::lock_guard lk(s_->mu);
    if (fired_) return;
    fired_ = true;
    for (SimTask* t : waiters_) s_->schedule(t);
    waiters_.clear();
  }

  bool fired() override {
    std::lock_guard lk(s_->mu);
    return fired_;
  }

 private:
  std::shared_ptr<SimState> s_;
  bool fired_ = false;
  std::vector<SimTask*> waiters_;
};

class SimSlots final : public Slots {
 public:
  SimSlots(std::shared_ptr<SimState> s, int cap)
      : s_(std::move(s)), capacity_(cap) {}

  void acquire() override {
    SimTask* self = tls_task;
    if (!self) throw std::logic_error("sim slot acquire outside a task");
    std::unique_lock lk(s_->mu);
    if (in_use_ < capacity_) {
      ++in_use_;
      return;
    }
    waiters_.push_back(self);
    // Whoever wakes us has already counted us in; just resume.
    s_->yield(lk, self);
  }

  void release() override {
    std::lock_guard lk(s_->mu);
    --in_use_;
    admit();
  }

  void set_capacity(int n) override {
    std::lock_guard lk(s_->mu);
    capacity_ = n;
    admit();
  }

  int capacity() override {
    std::lock_guard lk(s_->mu);
    return capacity_;
  }

  int in_use() override {
    std::lock_guard lk(s_->mu);
    return in_use_;
  }

 private:
  void admit() {  // caller holds s_->mu; wakes waiters FIFO while room
    while (!waiters_.empty() && in_use_ < capacity_) {
      SimTask* t = waiters_.front();
      waiters_.erase(waiters_.begin());
      ++in_use_;
      s_->schedule(t);
    }
  }

  std::shared_ptr<SimState> s_;
  int capacity_;
  int in_use_ = 0;
  std::vector<SimTask*> waiters_;
};

class SimExec final : public Exec {
 public:
  SimExec() : s_(std::make_shared<SimState>()) {}

  ~SimExec() override {
    try {
      run_until_idle();
    } catch (...) {
      // Deadlocked tasks stay parked forever; detach them. They co-own the
      // state, so nothing they still reference is destroyed.
      std::lock_guard lk(s_->mu);
      for (auto& t : s_->tasks)
        if (t->thread.joinable()) t->thread.detach();
    }
  }

  int64_t now_us() override {
    std::lock_guard lk(s_->mu);
    return s_->now;
  }

  void sleep_us(int64_t us) override {
    SimTask* self = tls_task;
    if (!self) throw std::logic_error("sim sleep outside a task");
    std::unique_lock lk(s_->mu);
    if (us < 0) us = 0;
    s_->runq.emplace(std::make_pair(s_->now + us, s_->seq++), self);
    s_->yield(lk, self);
  }

  void spawn(std::function<void()> body) override {
    std::lock_guard lk(s_->mu);
    auto task = std::make_unique<SimTask>();
    task->body = std::move(body);
    SimTask* t = task.get();
    ++s_->live;
    s_->schedule(t);
    auto s = s_;
    t->thread = std::thread([s, t] { task_main(s, t); });
    s_->tasks.push_back(std::move(task));
  }

  std::shared_ptr<Event> make_event() override {
    return std::make_shared<SimEvent>(s_);
  }

  std::shared_ptr<Slots> make_slots(int capacity) override {
    return std::make_shared<SimSlots>(s_, capacity);
  }

  void run_until_idle() override {
    if (tls_task)
      throw std::logic_error("run_until_idle from inside a task");
    std::unique_lock lk(s_->mu);
    for (;;) {
      reap(lk);
      if (s_->runq.empty()) {
        if (s_->live == 0) break;
        throw std::logic_error(
            "simulation deadlock: " + std::to_string(s_->live) +
            " task(s) blocked with an empty run queue");
      }
      auto it = s_->runq.begin();
      s_->now = std::max(s_->now, it->first.first);
      SimTask* t = it->second;
      s_->runq.erase(it);
      s_->current = t;
      t->active = true;
      t->cv.notify_one();
      s_->driver_cv.wait(lk, [&] { return s_->current == nullptr; });
    }
    if (!s_->first_error.empty()) {
      std::string msg = s_->first_error;
      s_->first_error.clear();
      throw std::logic_error("task failed: " + msg);
    }
  }

  bool simulated() const override { return true; }

 private:
  static void task_main(std::shared_ptr<SimState> s, SimTask* t) {
    {
      std::unique_lock lk(s->mu);
      t->cv.wait(lk, [&] { return t->active; });
    }
    tls_task = t;
    try {
      t->body();
    } catch (const std::exception& e) {
      std::lock_guard lk(s->mu);
      if (s->first_error.empty()) s->first_error = e.what();
    } catch (...) {
      std::lock_guard lk(s->mu);
      if (s->first_error.empty()) s->first_error = "unknown exception";
    }
    tls_task = nullptr;
    std::lock_guard lk(s->mu);
    t->body = nullptr;
    --s->live;
    s->finished.push_back(t);
    s->current = nullptr;
    s->driver_cv.notify_one();
  }

  // Joins finished task threads and drops their storage. Runs on the driver
  // with every task parked, so the task list is stable across the unlock.
  void reap(std::unique_lock<std::mutex>& lk) {
    while (!s_->finished.empty()) {
      SimTask* t = s_->finished.back();
      s_->finished.pop_back();
      std::unique_ptr<SimTask> owned;
      for (auto it = s_->tasks.begin(); it != s_->tasks.end(); ++it) {
        if (it->get() == t) {
          owned = std::move(*it);
          s_->tasks.erase(it);
          break;
        }
      }
      lk.unlock();
      if (owned && owned->thread.joinable()) owned->thread.join();
      owned.reset();
      lk.lock();
    }
  }

  std::shared_ptr<SimState> s_;
};

}  // namespace

std::unique_ptr<Exec> make_real_exec() { return std::make_unique<RealExec>(); }
std::unique_ptr<Exec> make_sim_exec() { return std::make_unique<SimExec>(); }

}  // namespace edgeflow
