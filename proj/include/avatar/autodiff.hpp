#pragma once

// Dense tensors with a recorded computation tape for reverse-mode
// differentiation. Tensors are immutable values; a Tape owns the op records.
// Second-order gradients (backward with build_graph) are supported for the
// linear / piecewise-linear op subset used by the discriminator.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace av::ad {

enum class DType : std::uint8_t { F32, F64 };

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& s);
std::string_view dtype_name(DType d);
std::size_t numel_of(const Shape& s);

class ShapeError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
class NonFiniteError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class UnsupportedOpError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

class Tape;

struct Storage {
  std::variant<std::vector<float>, std::vector<double>> data;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> values);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape, DType dtype = DType::F32);
  static Tensor full(Shape shape, double value, DType dtype = DType::F32);
  static Tensor scalar(double value, DType dtype = DType::F32);
  static Tensor from(Shape shape, std::span<const double> values, DType dtype = DType::F32);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const { return numel_of(shape_); }
  DType dtype() const { return dtype_; }

  template <class T>
  std::span<const T> data() const {
    const auto& v = std::get<std::vector<T>>(storage_->data);
    return {v.data(), v.size()};
  }

  double item() const;
  double at(std::size_t flat) const;
  std::vector<double> values() const;

  bool attached() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }
  Tensor detach() const;
  Tensor to(DType dtype) const;

  // Aliasing view with a new shape (same element count). Used by reshape.
  Tensor with_shape(Shape shape) const;

 private:
  friend class Tape;
  Shape shape_;
  DType dtype_ = DType::F32;
  std::shared_ptr<const Storage> storage_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Builds a tensor from a typed buffer, checking every value is finite.
template <class T>
Tensor make_tensor(Shape shape, std::vector<T> values, std::string_view op);

// A backward rule receives the upstream gradient, a mask of which inputs need a
// gradient, and whether to build a differentiable graph of the gradient. It
// returns one tensor per input (undefined where not needed).
using BackwardFn =
    std::function<std::vector<Tensor>(const Tensor& grad, const std::vector<bool>& needs, bool build_graph)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Attaches a detached tensor as a leaf.
  Tensor watch(const Tensor& t);

  // Records `output` as produced by `op` from `inputs`.
  Tensor record(std::string_view op, std::vector<Tensor> inputs, Tensor output, BackwardFn fn);

  // Gradients of scalar `loss` with respect to each of `wrt` (attached leaves
  // or intermediates). Missing paths give zeros.
  std::vector<Tensor> gradients(const Tensor& loss, const std::vector<Tensor>& wrt, bool build_graph = false);

  std::size_t size() const { return nodes_.size(); }
  const std::string& op_name(int node) const { return nodes_.at(static_cast<std::size_t>(node)).op; }

 private:
  struct Node {
    std::string op;
    std::vector<int> inputs;  // -1 for detached inputs
    BackwardFn backward;      // empty for leaves
    Shape shape;
    DType dtype;
  };
  std::vector<Node> nodes_;
};

// Finds the common tape of any attached inputs (nullptr if none). Throws if
// inputs are attached to different tapes.
Tape* common_tape(std::span<const Tensor> inputs);

// ---------------------------------------------------------------------------
// Operations. Every op records on the tape when any input is attached.
// Broadcasting rule for binary elementwise ops: shapes are equal, or one
// operand's shape is a trailing suffix of the other's (a scalar is the empty
// suffix). The smaller operand is repeated over the leading dimensions.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);

// (M,K) x (K,N) -> (M,N) with optional transposition of either operand.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
// x (N,K), weight (M,K), bias (M) or undefined -> x * weight^T + bias, (N,M).
Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};
// x (B,C,H,W), weight (O,C,k,k), bias (O) or undefined -> (B,O,Ho,Wo).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias = {}, Conv2dGeometry g = {});
// Adjoint of conv2d with respect to its input; out_hw gives (H,W) of the input.
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& weight, std::size_t in_h, std::size_t in_w,
                         Conv2dGeometry g);
// Adjoint of conv2d with respect to its weight; k is the kernel size.
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, std::size_t k, Conv2dGeometry g);
// Adds a per-channel bias b (C) to x (B,C,...) and its adjoint.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
Tensor channel_sum(const Tensor& x);

Tensor leaky_relu(const Tensor& x, double slope = 0.2);
Tensor softplus(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);

Tensor sum(const Tensor& x);                    // -> scalar (shape {})
Tensor sum(const Tensor& x, std::size_t axis);  // removes `axis`
Tensor mean(const Tensor& x);
Tensor expand_axis(const Tensor& x, std::size_t axis, std::size_t n);  // inverse of sum(x, axis)

Tensor concat(const std::vector<Tensor>& xs, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t stop);
Tensor embed(const Tensor& x, std::size_t axis, std::size_t start, std::size_t full);  // adjoint of slice
Tensor reshape(const Tensor& x, Shape shape);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
Tensor reduce_to(const Tensor& x, const Shape& suffix);  // adjoint of broadcast_to

// Bilinear lookup with border clamping and corner-aligned texels: coordinate
// -1 is the centre of the first texel, +1 the centre of the last.
// plane (C,H,W) with coords (N,2) -> (N,C), or batched plane (B,C,H,W) with
// coords (B,N,2) -> (B,N,C). coords[...,0] indexes width, [...,1] height.
Tensor grid_sample_bilinear(const Tensor& plane, const Tensor& coords);

enum class OpKind {
  Add, Sub, Mul, Matmul, Affine, Conv2d, LeakyRelu, Softplus, Sigmoid, Tanh, Exp, Log, Sum, Mean, Square,
  Concat, Reshape, Broadcast, Slice
};
OpKind op_kind_from_name(std::string_view name);  // throws on unknown names
// Generic dispatcher for the elementary op set. Ops needing extra arguments
// use their defaults (sum over all elements, concat/slice along axis 0,
// reshape/broadcast to the shape of the second input).
Tensor apply(OpKind kind, const std::vector<Tensor>& inputs);

// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

AdamState make_adam(const std::vector<Tensor>& params, AdamConfig config);
// Bias-corrected Adam; replaces each params[i] with its updated value.
void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state);

// ---------------------------------------------------------------------------

// Max over coordinates of |analytic - central difference| /
// (|central difference| + 1e-12). f maps the (attached) point to a scalar.
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f, const std::vector<Tensor>& point,
                  double h = 1e-5);

}  // namespace av::ad
