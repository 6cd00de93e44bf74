#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>

#include "ssmvdm/core/errors.hpp"

namespace ssmvdm {

// Counts bytes of live tensor storage while a trace scope is open.
// Peak accounting is pure allocation bookkeeping (no OS involvement), so
// two runs of the same single-threaded code report identical peaks.
class MemoryTracker {
 public:
  struct Ticket {
    std::uint64_t epoch = 0;
    bool counted = false;
  };

  static MemoryTracker& instance() {
    static MemoryTracker t;
    return t;
  }

  Ticket on_alloc(std::size_t bytes) {
    if (!active_.load(std::memory_order_relaxed)) return {};
    const std::size_t now = current_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
    if (limit_ != 0 && now > limit_) {
      current_.fetch_sub(bytes, std::memory_order_relaxed);
      throw CapacityError("allocation of " + std::to_string(bytes) +
                          " bytes exceeds trace budget of " + std::to_string(limit_) +
                          " bytes (live: " + std::to_string(now - bytes) + ")");
    }
    std::size_t peak = peak_.load(std::memory_order_relaxed);
    while (now > peak && !peak_.compare_exchange_weak(peak, now, std::memory_order_relaxed)) {
    }
    return {epoch_, true};
  }

  void on_free(std::size_t bytes, const Ticket& ticket) {
    if (!ticket.counted) return;
    if (!active_.load(std::memory_order_relaxed)) return;
    if (ticket.epoch != epoch_) return;  // allocated in a scope that already closed
    current_.fetch_sub(bytes, std::memory_order_relaxed);
  }

  bool active() const { return active_.load(std::memory_order_relaxed); }
  std::size_t peak_bytes() const { return peak_.load(std::memory_order_relaxed); }
  std::size_t live_bytes() const { return current_.load(std::memory_order_relaxed); }

 private:
  friend class ScopedMemoryTrace;

  void begin(std::size_t limit) {
    if (active_.load(std::memory_order_relaxed))
      throw Error("nested memory trace scopes are not supported");
    ++epoch_;
    current_.store(0, std::memory_order_relaxed);
    peak_.store(0, std::memory_order_relaxed);
    limit_ = limit;
    active_.store(true, std::memory_order_relaxed);
  }

  void end() { active_.store(false, std::memory_order_relaxed); }

  std::atomic<bool> active_{false};
  std::atomic<std::size_t> current_{0};
  std::atomic<std::size_t> peak_{0};
  std::size_t limit_ = 0;
  std::uint64_t epoch_ = 0;
};

// RAII trace scope. `limit_bytes == 0` means unlimited.
class ScopedMemoryTrace {
 public:
  explicit ScopedMemoryTrace(std::size_t limit_bytes = 0) {
    MemoryTracker::instance().begin(limit_bytes);
  }
  ~ScopedMemoryTrace() { MemoryTracker::instance().end(); }
  ScopedMemoryTrace(const ScopedMemoryTrace&) = delete;
  ScopedMemoryTrace& operator=(const ScopedMemoryTrace&) = delete;

  std::size_t peak_bytes() const { return MemoryTracker::instance().peak_bytes(); }
};

}  // namespace ssmvdm
