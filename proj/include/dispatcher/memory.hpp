#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <new>
#include <vector>

namespace dispatcher {

// Process-wide accounting of bytes held by tensor storage. Every buffer the
// engine allocates (values, gradients, scratch space inside kernels) goes
// through TrackingAllocator, so live() is the exact number of tensor bytes in
// use and peak() its high-water mark since the last reset_peak().
class MemoryTracker {
 public:
  static void on_allocate(std::size_t bytes) {
    const std::size_t limit = budget_.load(std::memory_order_relaxed);
    std::size_t now = live_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
    if (now > limit) {
      live_.fetch_sub(bytes, std::memory_order_relaxed);
      throw std::bad_alloc();
    }
    std::size_t seen = peak_.load(std::memory_order_relaxed);
    while (now > seen && !peak_.compare_exchange_weak(seen, now, std::memory_order_relaxed)) {
    }
  }

  static void on_release(std::size_t bytes) noexcept {
    live_.fetch_sub(bytes, std::memory_order_relaxed);
  }

  static std::size_t live() noexcept { return live_.load(std::memory_order_relaxed); }
  static std::size_t peak() noexcept { return peak_.load(std::memory_order_relaxed); }
  static void reset_peak() noexcept { peak_.store(live(), std::memory_order_relaxed); }

  // Allocations that would push live() above the budget fail with
  // std::bad_alloc instead of reaching the system allocator.
  static void set_budget(std::size_t bytes) noexcept {
    budget_.store(bytes, std::memory_order_relaxed);
  }
  static std::size_t budget() noexcept { return budget_.load(std::memory_order_relaxed); }

 private:
  static inline std::atomic<std::size_t> live_{0};
  static inline std::atomic<std::size_t> peak_{0};
  static inline std::atomic<std::size_t> budget_{std::numeric_limits<std::size_t>::max()};
};

// Restores the previous budget on scope exit.
class ScopedMemoryBudget {
 public:
  explicit ScopedMemoryBudget(std::size_t bytes) : previous_(MemoryTracker::budget()) {
    MemoryTracker::set_budget(bytes);
  }
  ~ScopedMemoryBudget() { MemoryTracker::set_budget(previous_); }
  ScopedMemoryBudget(const ScopedMemoryBudget&) = delete;
  ScopedMemoryBudget& operator=(const ScopedMemoryBudget&) = delete;

 private:
  std::size_t previous_;
};

template <typename T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <typename U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    const std::size_t bytes = n * sizeof(T);
    MemoryTracker::on_allocate(bytes);
    try {
      return static_cast<T*>(::operator new(bytes, std::align_val_t{64}));
    } catch (...) {
      MemoryTracker::on_release(bytes);
      throw;
    }
  }

  void deallocate(T* p, std::size_t n) noexcept {
    ::operator delete(p, std::align_val_t{64});
    MemoryTracker::on_release(n * sizeof(T));
  }

  template <typename U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, TrackingAllocator<double>>;

// Per-thread multiply-accumulate counters, incremented by the instrumented
// kernels. `mixing` only counts the sequence-mixing work (dispatcher
// shift-and-sum, attention score and context products) in the forward pass;
// `total` counts every MAC performed by matmul-like kernels, forward and
// backward.
struct OpCounters {
  std::uint64_t total_macs = 0;
  std::uint64_t mixing_macs = 0;
};

inline OpCounters& op_counters() {
  thread_local OpCounters counters;
  return counters;
}

inline void reset_op_counters() { op_counters() = OpCounters{}; }

}  // namespace dispatcher
