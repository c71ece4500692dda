#ifndef CMDQ_SPANS_HPP
#define CMDQ_SPANS_HPP

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cmdq/error.hpp"

namespace cmdq {

/// Monotonic nanosecond clock. Injectable so timing-dependent logic can be tested.
using Clock = std::function<std::int64_t()>;

inline std::int64_t steady_now_ns() {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

using SpanId = std::uint64_t;

struct TimingSpan {
  SpanId id = 0;
  std::string label;
  std::int64_t start_ns = 0;
  std::int64_t end_ns = 0;
  std::optional<SpanId> parent;
};

/// Collects spans from up to `workers` threads. Each worker appends to its own
/// buffer; spans() merges them ordered by id.
class SpanRecorder {
 public:
  explicit SpanRecorder(std::size_t workers = 1, Clock clock = steady_now_ns)
      : clock_(std::move(clock)), buffers_(std::max<std::size_t>(workers, 1)) {}

  SpanRecorder(const SpanRecorder&) = delete;
  SpanRecorder& operator=(const SpanRecorder&) = delete;

  std::size_t workers() const noexcept { return buffers_.size(); }

  /// Grows the buffer set. Not safe while workers are recording.
  void reserve_workers(std::size_t n) {
    if (n > buffers_.size()) buffers_.resize(n);
  }

  SpanId next_id() noexcept { return next_.fetch_add(1, std::memory_order_relaxed); }
  std::int64_t now() const { return clock_(); }

  void record(std::size_t worker, TimingSpan span) { buffers_.at(worker).push_back(std::move(span)); }

  std::vector<TimingSpan> spans() const {
    std::vector<TimingSpan> out;
    for (const auto& b : buffers_) out.insert(out.end(), b.begin(), b.end());
    std::sort(out.begin(), out.end(), [](const TimingSpan& a, const TimingSpan& b) { return a.id < b.id; });
    return out;
  }

  void clear() {
    for (auto& b : buffers_) b.clear();
  }

 private:
  Clock clock_;
  std::atomic<SpanId> next_{0};
  std::vector<std::vector<TimingSpan>> buffers_;
};

template <typename R>
struct SpanResult {
  R value;
  TimingSpan span;
};

/// Runs `thunk` inside a span. The thunk may take the new span's id so it can open
/// children under it.
template <typename F>
auto with_span(SpanRecorder& rec, std::string_view label, std::optional<SpanId> parent, F&& thunk,
               std::size_t worker = 0) {
  if (label.empty()) throw InvariantError("span label must be non-empty");
  TimingSpan span{rec.next_id(), std::string(label), 0, 0, parent};
  span.start_ns = rec.now();
  const auto call = [&]() -> decltype(auto) {
    if constexpr (std::is_invocable_v<F, SpanId>)
      return std::forward<F>(thunk)(span.id);
    else
      return std::forward<F>(thunk)();
  };
  using R = decltype(call());
  if constexpr (std::is_void_v<R>) {
    call();
    span.end_ns = rec.now();
    rec.record(worker, span);
    return span;
  } else {
    R value = call();
    span.end_ns = rec.now();
    rec.record(worker, span);
    return SpanResult<R>{std::move(value), std::move(span)};
  }
}

inline nlohmann::json spans_to_json(const std::vector<TimingSpan>& spans) {
  auto arr = nlohmann::json::array();
  for (const auto& s : spans) {
    arr.push_back({{"id", s.id},
                   {"label", s.label},
                   {"start_ns", s.start_ns},
                   {"end_ns", s.end_ns},
                   {"parent", s.parent ? nlohmann::json(*s.parent) : nlohmann::json(nullptr)}});
  }
  return arr;
}

}  // namespace cmdq

#endif  // CMDQ_SPANS_HPP
