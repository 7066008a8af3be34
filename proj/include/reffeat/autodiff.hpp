#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "reffeat/ops.hpp"
#include "reffeat/tensor.hpp"

namespace reffeat {

class Tape;

// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  const Tensor& value() const;
  // Accumulated gradient; empty tensor when nothing flowed into this value.
  const Tensor& grad() const;
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Reverse-mode tape. Values are immutable once recorded; backward walks the
// records from newest to oldest so every consumer runs before its producer.
// One tape belongs to one thread.
class Tape {
 public:
  // Receives the gradient of the recorded output and accumulates into the
  // inputs through Tape::accumulate.
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Records an op output. The backward rule is dropped when no input needs a
  // gradient or when recording is disabled.
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward);

  const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  const Tensor& grad(int id) const { return nodes_[static_cast<size_t>(id)].grad; }
  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

  // grad[id] += g (no-op for values that do not require a gradient).
  void accumulate(int id, const Tensor& g);
  void accumulate(int id, Tensor&& g);

  // Seeds d(loss)/d(loss) = 1 and runs every backward rule. loss must hold a
  // single element.
  void backward(const Var& loss);
  void zero_grad();

  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;  // stable references across growth
  bool recording_ = true;
};

// Differentiable ops. Each mirrors a forward kernel in ops.hpp.
namespace ad {

Var conv2d(const Var& input, const Var& weight, const std::optional<Var>& bias, int stride, int padding);

// Batch normalisation whose statistics and affine parameters are shared by
// groups of `group` consecutive channels (group = 1 is ordinary per-channel
// batch norm; group = n ties the n orientations of a regular field).
struct BatchNormState {
  std::vector<float> running_mean;  // one per statistic group
  std::vector<float> running_var;
};
Var batchnorm(const Var& input, const Var& gamma, const Var& beta, int group, BatchNormState& state, bool training,
              float momentum, float eps);

Var relu(const Var& x);
Var softplus(const Var& x);
Var softmax_channel(const Var& x);
Var l2_normalize_channel(const Var& x);
// x / (1 + x), elementwise.
Var squash(const Var& x);

// Max over each block of n channels; gradient flows to the first maximum.
Var group_pool(const Var& x, int n);
Var shift_channel_blocks(const Var& x, int n, int p);

Var resample(const Var& x, std::shared_ptr<const ops::BilinearPlan> plan);
Var rotate_bilinear(const Var& x, double angle_deg);

// Repeats every element n times: (v0, v1) -> (v0 x n, v1 x n).
Var repeat_interleave(const Var& v, int n);
Var select_channel(const Var& x, int64_t channel);
Var select_batch(const Var& x, int64_t index);
Var concat_batch(const std::vector<Var>& parts);

Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var sum(const Var& x);
Var mean(const Var& x);
// Weighted sum of scalar Vars.
Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights);

}  // namespace ad
}  // namespace reffeat
