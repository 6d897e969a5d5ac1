#pragma once

#include <array>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mixsearch/tensor.hpp"

namespace mixsearch {

/// Which optimizer owns a parameter: network weights w, cell logits alpha,
/// or branch logits beta.
enum class ParamGroup { Weight, Alpha, Beta };

/// An optimizable leaf. `name` is the stable identifier; it is hierarchical
/// and unique within a network.
class Parameter {
 public:
  Parameter(std::string name, Tensor value, ParamGroup group = ParamGroup::Weight);

  const std::string& name() const { return name_; }
  ParamGroup group() const { return group_; }

  Tensor value;
  Tensor grad;

  void zero_grad() { grad.fill(0.0); }
  std::size_t numel() const { return value.size(); }

 private:
  std::string name_;
  ParamGroup group_;
};

using ParamPtr = std::shared_ptr<Parameter>;

ParamPtr make_param(std::string name, Tensor value, ParamGroup group = ParamGroup::Weight);

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, which is a
/// topological order by construction; backward walks it in reverse.
/// Single-threaded: one tape belongs to one thread.
class Tape {
 public:
  /// Receives the node's own output value and its accumulated gradient.
  using BackwardFn = std::function<void(Tape&, const Tensor& out, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf bound to a parameter. Repeated calls for one parameter return the
  /// same node so shared parameters accumulate into a single gradient.
  Var leaf(const ParamPtr& param);
  /// Appends a node. `backward` is dropped when no input requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

  const Tensor& value(int id) const { return nodes_[id].val(); }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  /// Gradient buffer of a node, zero-initialized on first access.
  Tensor& grad(int id);
  bool has_grad(int id) const { return !nodes_[id].grad.empty(); }

  /// Seeds d(out)/d(out) = 1 and accumulates into every reachable
  /// Parameter's `grad`. Throws NonScalarOutput unless out is (1,1,1,1).
  void backward(Var out);

  std::size_t size() const { return nodes_.size(); }

  /// With gradients disabled, parameter leaves are recorded as constants and
  /// no backward closures are kept (evaluation mode).
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }
  /// Leaves of a frozen group are recorded as constants, which skips their
  /// gradient work. Affects leaves created afterwards.
  void set_trainable(ParamGroup group, bool trainable) {
    trainable_[static_cast<int>(group)] = trainable;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
    const Tensor* alias = nullptr;  // parameter value read in place
    const Tensor& val() const { return alias ? *alias : value; }
  };
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> leaves_;
  bool grad_enabled_ = true;
  std::array<bool, 3> trainable_{true, true, true};
};

namespace ad {

struct ConvOptions {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;
};

struct ConvTransposeOptions {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int output_padding = 0;
  int groups = 1;
};

// Elementwise with size-1 broadcasting on any axis.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);

Var relu(Var x);
Var sigmoid(Var x);

/// Softmax over the channel axis restricted to `mask` (empty = all channels);
/// masked-out channels are exactly 0 and receive no gradient.
Var softmax_channels(Var x, const std::vector<bool>& mask = {});
Var log_softmax_channels(Var x);

Var sum(Var x);
Var mean(Var x);
/// Sums each (n, c) plane to shape (n, c, 1, 1).
Var sum_spatial(Var x);
Var global_avg_pool(Var x);

/// x: (n, c_in, h, w); weight: (c_out, c_in / groups, k, k); bias: (1, c_out, 1, 1) or null.
Var conv2d(Var x, Var weight, const Var* bias, const ConvOptions& opt);
/// x: (n, c_in, h, w); weight: (c_in, c_out / groups, k, k).
Var conv_transpose2d(Var x, Var weight, const Var* bias, const ConvTransposeOptions& opt);

/// 2x2 window, stride 2. Max-pool ties go to the first position in
/// row-major scan order.
Var avg_pool2(Var x);
Var max_pool2(Var x);

/// Bilinear x2, align_corners = false.
Var upsample_bilinear2x(Var x);
Var concat_channels(std::span<const Var> xs);
Var channel_shuffle(Var x, int groups);

/// gamma, beta: (1, c, 1, 1).
Var group_norm(Var x, Var gamma, Var beta, int groups, double eps = 1e-5);

/// sum_k weights[k] * xs[k]; weights has shape (1, K, 1, 1), all xs one shape.
Var weighted_sum(std::span<const Var> xs, Var weights);

/// Fault injection for the gradient-check harness: negates the weight
/// gradient of every conv2d while on. Process-wide; off by default.
namespace fault {
void flip_conv_weight_grad_sign(bool on);
bool conv_weight_grad_flipped();
}  // namespace fault

}  // namespace ad

/// Max over entries of |analytic - central difference| / max(1, |analytic|)
/// for the gradient of `fn` with respect to `input`. Throws NonFinite when
/// `fn` produces NaN/Inf.
double finite_diff_check(const std::function<Var(Tape&, Var)>& fn, const Tensor& input,
                         double step = 1e-5);

/// Same check with respect to a parameter's value (restored afterwards).
/// `fn` must read the parameter through Tape::leaf.
double finite_diff_check_param(const std::function<Var(Tape&)>& fn, Parameter& param,
                               double step = 1e-5);

}  // namespace mixsearch
