#pragma once

#include <atomic>
#include <cstddef>
#include <memory>
#include <new>

namespace msy {

// Process-wide accounting of tensor storage. Every Tensor allocates through
// TrackingAllocator, so the counters see all activations, gradients and
// optimizer state but nothing else.
class TensorMemory {
 public:
  static void on_alloc(std::size_t bytes) noexcept {
    const auto now = live_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
    auto peak = peak_.load(std::memory_order_relaxed);
    while (now > peak && !peak_.compare_exchange_weak(peak, now, std::memory_order_relaxed)) {
    }
  }
  static void on_free(std::size_t bytes) noexcept { live_.fetch_sub(bytes, std::memory_order_relaxed); }

  static std::size_t live_bytes() noexcept { return live_.load(std::memory_order_relaxed); }
  static std::size_t peak_bytes() noexcept { return peak_.load(std::memory_order_relaxed); }
  static void reset_peak() noexcept { peak_.store(live_.load(std::memory_order_relaxed), std::memory_order_relaxed); }

 private:
  static inline std::atomic<std::size_t> live_{0};
  static inline std::atomic<std::size_t> peak_{0};
};

template <typename T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <typename U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    const auto bytes = n * sizeof(T);
    auto* p = static_cast<T*>(::operator new(bytes, std::align_val_t{64}));
    TensorMemory::on_alloc(bytes);
    return p;
  }
  void deallocate(T* p, std::size_t n) noexcept {
    ::operator delete(p, std::align_val_t{64});
    TensorMemory::on_free(n * sizeof(T));
  }

  template <typename U>
  bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};

// Pluggable peak-memory probe used by the memory-footprint regression.
class MemoryMeter {
 public:
  virtual ~MemoryMeter() = default;
  virtual void reset() = 0;
  // Peak bytes observed since the last reset().
  virtual double peak_bytes() const = 0;
};

class TensorMemoryMeter final : public MemoryMeter {
 public:
  void reset() override { TensorMemory::reset_peak(); }
  double peak_bytes() const override { return static_cast<double>(TensorMemory::peak_bytes()); }
};

}  // namespace msy
