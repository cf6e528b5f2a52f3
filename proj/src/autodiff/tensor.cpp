#include "avatar/autodiff.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "dispatch.hpp"

namespace av::ad {

std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

std::string_view dtype_name(DType d) { return d == DType::F32 ? "f32" : "f64"; }

std::size_t numel_of(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

namespace {
void check_extents(const Shape& s) {
  for (auto e : s)
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(s));
}
}  // namespace

template <class T>
Tensor make_tensor(Shape shape, std::vector<T> values, std::string_view op) {
  check_extents(shape);
  if (values.size() != numel_of(shape))
    throw ShapeError(std::string(op) + ": buffer size " + std::to_string(values.size()) + " does not match shape " +
                     to_string(shape));
  // The constructor does the finite check; only the message is ours.
  try {
    return Tensor(std::move(shape), std::move(values));
  } catch (const NonFiniteError& e) {
    throw NonFiniteError(std::string(op) + ": " + e.what());
  }
}
template Tensor make_tensor<float>(Shape, std::vector<float>, std::string_view);
template Tensor make_tensor<double>(Shape, std::vector<double>, std::string_view);

namespace {

// Branch-free scan first so the common all-finite case vectorises.
template <class T>
void check_finite(const std::vector<T>& v) {
  bool bad = false;
  for (T x : v) bad |= !(std::abs(x) <= std::numeric_limits<T>::max());
  if (!bad) return;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!std::isfinite(v[i])) throw NonFiniteError("non-finite value at flat index " + std::to_string(i));
}

}  // namespace

Tensor::Tensor(Shape shape, std::vector<float> values)
    : shape_(std::move(shape)), dtype_(DType::F32), storage_(std::make_shared<Storage>(Storage{std::move(values)})) {
  const auto& v = std::get<std::vector<float>>(storage_->data);
  if (v.size() != numel_of(shape_)) throw ShapeError("buffer size does not match shape " + to_string(shape_));
  check_finite(v);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), dtype_(DType::F64), storage_(std::make_shared<Storage>(Storage{std::move(values)})) {
  const auto& v = std::get<std::vector<double>>(storage_->data);
  if (v.size() != numel_of(shape_)) throw ShapeError("buffer size does not match shape " + to_string(shape_));
  check_finite(v);
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return full(std::move(shape), 0.0, dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  check_extents(shape);
  const auto n = numel_of(shape);
  return dispatch(dtype, [&]<class T>() {
    return make_tensor<T>(std::move(shape), std::vector<T>(n, static_cast<T>(value)), "full");
  });
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

Tensor Tensor::from(Shape shape, std::span<const double> values, DType dtype) {
  return dispatch(dtype, [&]<class T>() {
    return make_tensor<T>(std::move(shape), std::vector<T>(values.begin(), values.end()), "from");
  });
}

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= shape_.size()) throw ShapeError("dim index out of range for shape " + to_string(shape_));
  return shape_[i];
}

double Tensor::at(std::size_t flat) const {
  if (flat >= numel()) throw ShapeError("flat index out of range");
  return dispatch(dtype_, [&]<class T>() { return static_cast<double>(data<T>()[flat]); });
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() requires a single-element tensor, got " + to_string(shape_));
  return at(0);
}

std::vector<double> Tensor::values() const {
  return dispatch(dtype_, [&]<class T>() {
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

Tensor Tensor::detach() const {
  Tensor t = *this;
  t.tape_ = nullptr;
  t.node_ = -1;
  return t;
}

Tensor Tensor::to(DType dtype) const {
  if (dtype == dtype_) return detach();
  auto v = values();
  return from(shape_, v, dtype);
}

Tensor Tensor::with_shape(Shape shape) const {
  if (numel_of(shape) != numel()) throw ShapeError("cannot view " + to_string(shape_) + " as " + to_string(shape));
  check_extents(shape);
  Tensor t = detach();
  t.shape_ = std::move(shape);
  return t;
}

// ---------------------------------------------------------------------------

Tape* common_tape(std::span<const Tensor> inputs) {
  Tape* tape = nullptr;
  for (const auto& t : inputs) {
    if (!t.defined() || !t.attached()) continue;
    if (tape && t.tape() != tape) throw std::invalid_argument("op inputs are attached to different tapes");
    tape = t.tape();
  }
  return tape;
}

Tensor Tape::watch(const Tensor& t) {
  if (!t.defined()) throw std::invalid_argument("cannot watch an undefined tensor");
  Tensor out = t.detach();
  nodes_.push_back(Node{"leaf", {}, {}, out.shape(), out.dtype()});
  out.tape_ = this;
  out.node_ = static_cast<int>(nodes_.size() - 1);
  return out;
}

Tensor Tape::record(std::string_view op, std::vector<Tensor> inputs, Tensor output, BackwardFn fn) {
  std::vector<int> ids;
  ids.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.defined() && in.attached()) {
      if (in.tape() != this) throw std::invalid_argument("input recorded on a different tape");
      ids.push_back(in.node());
    } else {
      ids.push_back(-1);
    }
  }
  Tensor out = output.detach();
  nodes_.push_back(Node{std::string(op), std::move(ids), std::move(fn), out.shape(), out.dtype()});
  out.tape_ = this;
  out.node_ = static_cast<int>(nodes_.size() - 1);
  return out;
}

std::vector<Tensor> Tape::gradients(const Tensor& loss, const std::vector<Tensor>& wrt, bool build_graph) {
  if (loss.tape() != this) throw std::invalid_argument("loss is not recorded on this tape");
  if (loss.numel() != 1) throw ShapeError("backward requires a scalar loss, got " + to_string(loss.shape()));
  const int top = loss.node();
  std::vector<char> requires_grad(static_cast<std::size_t>(top) + 1, 0);
  std::vector<char> is_target(static_cast<std::size_t>(top) + 1, 0);
  for (const auto& w : wrt) {
    if (w.tape() != this) throw std::invalid_argument("gradient target is not recorded on this tape");
    if (w.node() <= top) {
      requires_grad[static_cast<std::size_t>(w.node())] = 1;
      is_target[static_cast<std::size_t>(w.node())] = 1;
    }
  }
  for (int n = 0; n <= top; ++n) {
    auto& r = requires_grad[static_cast<std::size_t>(n)];
    if (r) continue;
    for (int i : nodes_[static_cast<std::size_t>(n)].inputs)
      if (i >= 0 && requires_grad[static_cast<std::size_t>(i)]) {
        r = 1;
        break;
      }
  }

  std::vector<Tensor> grads(static_cast<std::size_t>(top) + 1);
  grads[static_cast<std::size_t>(top)] = Tensor::full(loss.shape(), 1.0, loss.dtype());
  for (int n = top; n >= 0; --n) {
    const auto un = static_cast<std::size_t>(n);
    if (!requires_grad[un] || !grads[un].defined()) continue;
    if (!nodes_[un].backward) continue;
    const std::vector<int> inputs = nodes_[un].inputs;
    std::vector<bool> needs(inputs.size());
    bool any = false;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      needs[i] = inputs[i] >= 0 && requires_grad[static_cast<std::size_t>(inputs[i])];
      any = any || needs[i];
    }
    if (!any) continue;
    // Copy: in graph mode the rule appends nodes, which may reallocate nodes_.
    const BackwardFn fn = nodes_[un].backward;
    Tensor g = grads[un];
    if (!is_target[un]) grads[un] = Tensor{};
    auto in_grads = fn(g, needs, build_graph);
    if (in_grads.size() != inputs.size())
      throw std::logic_error("backward rule of '" + nodes_[un].op + "' returned wrong arity");
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (!needs[i]) continue;
      auto& gi = in_grads[i];
      if (!gi.defined()) continue;
      const auto k = static_cast<std::size_t>(inputs[i]);
      if (gi.shape() != nodes_[k].shape)
        throw std::logic_error("backward rule of '" + nodes_[un].op + "' produced gradient of shape " +
                               to_string(gi.shape()) + " for input of shape " + to_string(nodes_[k].shape));
      if (!build_graph) gi = gi.detach();
      grads[k] = grads[k].defined() ? add(grads[k], gi) : gi;
    }
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    const auto k = static_cast<std::size_t>(w.node());
    if (w.node() <= top && grads[k].defined())
      out.push_back(grads[k]);
    else
      out.push_back(Tensor::zeros(w.shape(), w.dtype()));
  }
  return out;
}

}  // namespace av::ad
