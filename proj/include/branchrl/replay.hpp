#pragma once

#include <stdexcept>
#include <vector>

#include "branchrl/nn.hpp"
#include "branchrl/rng.hpp"

namespace branchrl {

struct Transition {
  Vector s;
  Vector a;
  double r = 0.0;
  Vector s_next;
  bool done = false;
  int branch_depth = 0;  // 0 for real transitions, 1..k inside model branches
};

/// Capacity-bounded ring of transitions; eviction is strictly oldest-first.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("ReplayBuffer: zero capacity");
    storage_.reserve(capacity);
  }

  void push(Transition t) {
    if (storage_.size() < capacity_) {
      storage_.push_back(std::move(t));
    } else {
      storage_[next_] = std::move(t);
      next_ = (next_ + 1) % capacity_;
    }
  }

  std::size_t size() const { return storage_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return storage_.empty(); }

  /// Access by raw slot; iteration order is not insertion order once the
  /// ring has wrapped.
  const Transition& operator[](std::size_t i) const { return storage_[i]; }

  const std::vector<Transition>& raw() const { return storage_; }

  /// n transitions drawn uniformly with replacement.
  std::vector<Transition> sample(std::size_t n, Rng& rng) const {
    if (storage_.empty()) throw std::runtime_error("ReplayBuffer: sampling from empty buffer");
    std::vector<Transition> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
      out.push_back(storage_[static_cast<std::size_t>(
          rng.uniform_int(static_cast<int>(storage_.size())))]);
    return out;
  }

  void clear() {
    storage_.clear();
    next_ = 0;
  }

 private:
  std::size_t capacity_;
  std::vector<Transition> storage_;
  std::size_t next_ = 0;
};

/// Uniform with-replacement batch; convenience alias matching the buffer op.
inline std::vector<Transition> buffer_sample(const ReplayBuffer& buffer, std::size_t n, Rng& rng) {
  return buffer.sample(n, rng);
}

}  // namespace branchrl
