#include <algorithm>
#include <cmath>
#include <unordered_map>

#include <Eigen/Core>

#include "avatar/autodiff.hpp"
#include "dispatch.hpp"

namespace av::ad {

namespace {

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

// Resolves the output shape of a binary elementwise op under the suffix rule.
Shape broadcast_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() == b.shape()) return a.shape();
  if (is_suffix(b.shape(), a.shape())) return a.shape();
  if (is_suffix(a.shape(), b.shape())) return b.shape();
  throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                   " are not broadcast-compatible");
}

template <class T, class F>
Tensor binary_kernel(const Tensor& a, const Tensor& b, const Shape& out_shape, std::string_view op, F f) {
  auto da = a.data<T>();
  auto db = b.data<T>();
  const std::size_t n = numel_of(out_shape);
  const std::size_t na = da.size(), nb = db.size();
  std::vector<T> out(n);
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(da[i], db[i]);
  } else if (na == n) {
    for (std::size_t o = 0; o < n; o += nb)
      for (std::size_t i = 0; i < nb; ++i) out[o + i] = f(da[o + i], db[i]);
  } else {
    for (std::size_t o = 0; o < n; o += na)
      for (std::size_t i = 0; i < na; ++i) out[o + i] = f(da[i], db[o + i]);
  }
  return make_tensor<T>(out_shape, std::move(out), op);
}

template <class F>
Tensor map_unary(const Tensor& x, std::string_view op, F f) {
  return dispatch(x.dtype(), [&]<class T>() {
    auto d = x.data<T>();
    std::vector<T> out(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) out[i] = static_cast<T>(f(d[i]));
    return make_tensor<T>(x.shape(), std::move(out), op);
  });
}

// Elementwise g * h(x, y) where y is the forward output; used by the
// first-order-only activations.
template <class F>
Tensor unary_grad(const Tensor& g, const Tensor& x, const Tensor& y, std::string_view op, F h) {
  return dispatch(x.dtype(), [&]<class T>() {
    auto dg = g.data<T>();
    auto dx = x.data<T>();
    auto dy = y.data<T>();
    std::vector<T> out(dx.size());
    for (std::size_t i = 0; i < dx.size(); ++i)
      out[i] = static_cast<T>(dg[i] * h(dx[i], dy[i]));
    return make_tensor<T>(x.shape(), std::move(out), op);
  });
}

// Evaluated in the tensor's own precision.
template <class T>
T softplus_t(T x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
template <class T>
T sigmoid_t(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise binary ops

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "add");
  const Shape s = broadcast_shape(a, b, "add");
  Tensor out = dispatch(a.dtype(), [&]<class T>() {
    return binary_kernel<T>(a, b, s, "add", [](T x, T y) { return x + y; });
  });
  return maybe_record("add", {a, b}, out, [as = a.shape(), bs = b.shape()](const Tensor& g, const auto& needs, bool) {
    std::vector<Tensor> r(2);
    if (needs[0]) r[0] = reduce_to(g, as);
    if (needs[1]) r[1] = reduce_to(g, bs);
    return r;
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "sub");
  const Shape s = broadcast_shape(a, b, "sub");
  Tensor out = dispatch(a.dtype(), [&]<class T>() {
    return binary_kernel<T>(a, b, s, "sub", [](T x, T y) { return x - y; });
  });
  return maybe_record("sub", {a, b}, out, [as = a.shape(), bs = b.shape()](const Tensor& g, const auto& needs, bool) {
    std::vector<Tensor> r(2);
    if (needs[0]) r[0] = reduce_to(g, as);
    if (needs[1]) r[1] = reduce_to(neg(g), bs);
    return r;
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "mul");
  const Shape s = broadcast_shape(a, b, "mul");
  Tensor out = dispatch(a.dtype(), [&]<class T>() {
    return binary_kernel<T>(a, b, s, "mul", [](T x, T y) { return x * y; });
  });
  return maybe_record("mul", {a, b}, out, [a, b](const Tensor& g, const auto& needs, bool graph) {
    std::vector<Tensor> r(2);
    if (needs[0]) r[0] = reduce_to(mul(g, saved(b, graph)), a.shape());
    if (needs[1]) r[1] = reduce_to(mul(g, saved(a, graph)), b.shape());
    return r;
  });
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = map_unary(a, "scale", [c](double x) { return c * x; });
  return maybe_record("scale", {a}, out, [c](const Tensor& g, const auto&, bool) {
    return std::vector<Tensor>{scale(g, c)};
  });
}

Tensor add_scalar(const Tensor& a, double c) {
  Tensor out = map_unary(a, "add_scalar", [c](double x) { return x + c; });
  return maybe_record("add_scalar", {a}, out, [](const Tensor& g, const auto&, bool) {
    return std::vector<Tensor>{g};
  });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// Linear algebra

namespace {

template <class T>
std::vector<T> matmul_kernel(std::span<const T> A, std::span<const T> B, std::size_t M, std::size_t K, std::size_t N,
                             bool ta, bool tb) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  const auto m = static_cast<Eigen::Index>(M), k = static_cast<Eigen::Index>(K), n = static_cast<Eigen::Index>(N);
  std::vector<T> C(M * N);
  Eigen::Map<Mat> c(C.data(), m, n);
  const CMap a(A.data(), ta ? k : m, ta ? m : k);
  const CMap b(B.data(), tb ? n : k, tb ? k : n);
  if (!ta && !tb) c.noalias() = a * b;
  else if (!ta && tb) c.noalias() = a * b.transpose();
  else if (ta && !tb) c.noalias() = a.transpose() * b;
  else c.noalias() = a.transpose() * b.transpose();
  return C;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  require_same_dtype(a, b, "matmul");
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects 2-D operands");
  const std::size_t M = trans_a ? a.dim(1) : a.dim(0);
  const std::size_t K = trans_a ? a.dim(0) : a.dim(1);
  const std::size_t Kb = trans_b ? b.dim(1) : b.dim(0);
  const std::size_t N = trans_b ? b.dim(0) : b.dim(1);
  if (K != Kb)
    throw ShapeError("matmul: inner dimensions differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  Tensor out = dispatch(a.dtype(), [&]<class T>() {
    return make_tensor<T>({M, N}, matmul_kernel<T>(a.data<T>(), b.data<T>(), M, K, N, trans_a, trans_b), "matmul");
  });
  return maybe_record("matmul", {a, b}, out, [a, b, trans_a, trans_b](const Tensor& g, const auto& needs, bool graph) {
    std::vector<Tensor> r(2);
    const Tensor A = saved(a, graph), B = saved(b, graph);
    // C = op(A) op(B); dA = g op(B)^T (transposed back if A was), dB likewise.
    if (needs[0]) r[0] = trans_a ? matmul(B, g, trans_b, true) : matmul(g, B, false, !trans_b);
    if (needs[1]) r[1] = trans_b ? matmul(g, A, true, trans_a) : matmul(A, g, !trans_a, false);
    return r;
  });
}

Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1))
    throw ShapeError("affine: x " + to_string(x.shape()) + " incompatible with weight " + to_string(weight.shape()));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != weight.dim(0)))
    throw ShapeError("affine: bias shape " + to_string(bias.shape()) + " does not match weight rows");
  Tensor y = matmul(x, weight, false, true);
  if (bias.defined()) y = add(y, bias);
  return y;
}

// ---------------------------------------------------------------------------
// Activations

Tensor leaky_relu(const Tensor& x, double slope) {
  Tensor out = map_unary(x, "leaky_relu", [slope](double v) { return v > 0 ? v : slope * v; });
  return maybe_record("leaky_relu", {x}, out, [x, slope](const Tensor& g, const auto&, bool) {
    // The mask is piecewise constant in x, so it enters the graph as a constant.
    Tensor mask = map_unary(x.detach(), "leaky_relu_mask", [slope](double v) { return v > 0 ? 1.0 : slope; });
    return std::vector<Tensor>{mul(g, mask)};
  });
}

Tensor softplus(const Tensor& x) {
  Tensor out = map_unary(x, "softplus", [](auto v) { return softplus_t(v); });
  return maybe_record("softplus", {x}, out, [x, out](const Tensor& g, const auto&, bool graph) {
    no_graph(graph, "softplus");
    // sigmoid(x) = 1 - exp(-softplus(x))
    return std::vector<Tensor>{
        unary_grad(g, x.detach(), out, "softplus_grad", [](auto, auto y) { return -std::expm1(-y); })};
  });
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = map_unary(x, "sigmoid", [](auto v) { return sigmoid_t(v); });
  return maybe_record("sigmoid", {x}, out, [x, out](const Tensor& g, const auto&, bool graph) {
    no_graph(graph, "sigmoid");
    return std::vector<Tensor>{
        unary_grad(g, x.detach(), out, "sigmoid_grad", [](auto, auto y) { return y * (1 - y); })};
  });
}

Tensor tanh(const Tensor& x) {
  Tensor out = map_unary(x, "tanh", [](double v) { return std::tanh(v); });
  return maybe_record("tanh", {x}, out, [x, out](const Tensor& g, const auto&, bool graph) {
    no_graph(graph, "tanh");
    return std::vector<Tensor>{
        unary_grad(g, x.detach(), out, "tanh_grad", [](double, double y) { return 1.0 - y * y; })};
  });
}

Tensor exp(const Tensor& x) {
  Tensor out = map_unary(x, "exp", [](double v) { return std::exp(v); });
  return maybe_record("exp", {x}, out, [x, out](const Tensor& g, const auto&, bool graph) {
    no_graph(graph, "exp");
    return std::vector<Tensor>{unary_grad(g, x.detach(), out, "exp_grad", [](double, double y) { return y; })};
  });
}

Tensor log(const Tensor& x) {
  Tensor out = map_unary(x, "log", [](double v) { return std::log(v); });
  return maybe_record("log", {x}, out, [x, out](const Tensor& g, const auto&, bool graph) {
    no_graph(graph, "log");
    return std::vector<Tensor>{unary_grad(g, x.detach(), out, "log_grad", [](double v, double) { return 1.0 / v; })};
  });
}

Tensor square(const Tensor& x) {
  Tensor out = map_unary(x, "square", [](double v) { return v * v; });
  return maybe_record("square", {x}, out, [x](const Tensor& g, const auto&, bool graph) {
    return std::vector<Tensor>{mul(g, scale(saved(x, graph), 2.0))};
  });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops

Tensor sum(const Tensor& x) {
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    double acc = 0.0;
    for (T v : x.data<T>()) acc += static_cast<double>(v);
    return make_tensor<T>({}, {static_cast<T>(acc)}, "sum");
  });
  return maybe_record("sum", {x}, out, [s = x.shape()](const Tensor& g, const auto&, bool) {
    return std::vector<Tensor>{broadcast_to(g, s)};
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

namespace {
struct AxisSplit {
  std::size_t outer, n, inner;
};
AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit a{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}
void check_axis(const Tensor& x, std::size_t axis, std::string_view op) {
  if (axis >= x.rank()) throw ShapeError(std::string(op) + ": axis out of range for shape " + to_string(x.shape()));
}
}  // namespace

Tensor sum(const Tensor& x, std::size_t axis) {
  check_axis(x, axis, "sum");
  const auto sp = split_at(x.shape(), axis);
  Shape s = x.shape();
  s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    auto d = x.data<T>();
    std::vector<double> acc(sp.outer * sp.inner, 0.0);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.n; ++k) {
        const T* src = &d[(o * sp.n + k) * sp.inner];
        double* dst = &acc[o * sp.inner];
        for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += static_cast<double>(src[i]);
      }
    return make_tensor<T>(s, std::vector<T>(acc.begin(), acc.end()), "sum_axis");
  });
  return maybe_record("sum_axis", {x}, out, [axis, n = sp.n](const Tensor& g, const auto&, bool) {
    return std::vector<Tensor>{expand_axis(g, axis, n)};
  });
}

Tensor expand_axis(const Tensor& x, std::size_t axis, std::size_t n) {
  if (axis > x.rank()) throw ShapeError("expand_axis: axis out of range");
  Shape s = x.shape();
  s.insert(s.begin() + static_cast<std::ptrdiff_t>(axis), n);
  const auto sp = split_at(s, axis);
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    auto d = x.data<T>();
    std::vector<T> o(numel_of(s));
    for (std::size_t a = 0; a < sp.outer; ++a)
      for (std::size_t k = 0; k < n; ++k)
        std::copy_n(&d[a * sp.inner], sp.inner, &o[(a * n + k) * sp.inner]);
    return make_tensor<T>(s, std::move(o), "expand_axis");
  });
  return maybe_record("expand_axis", {x}, out, [axis](const Tensor& g, const auto&, bool) {
    return std::vector<Tensor>{sum(g, axis)};
  });
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (!is_suffix(x.shape(), shape))
    throw ShapeError("broadcast_to: " + to_string(x.shape()) + " is not a suffix of " + to_string(shape));
  if (x.shape() == shape) return x;
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    auto d = x.data<T>();
    const std::size_t n = numel_of(shape), m = d.size();
    std::vector<T> o(n);
    for (std::size_t i = 0; i < n; i += m) std::copy(d.begin(), d.end(), o.begin() + static_cast<std::ptrdiff_t>(i));
    return make_tensor<T>(shape, std::move(o), "broadcast");
  });
  return maybe_record("broadcast", {x}, out, [s = x.shape()](const Tensor& g, const auto&, bool) {
    return std::vector<Tensor>{reduce_to(g, s)};
  });
}

Tensor reduce_to(const Tensor& x, const Shape& suffix) {
  if (x.shape() == suffix) return x;
  if (!is_suffix(suffix, x.shape()))
    throw ShapeError("reduce_to: " + to_string(suffix) + " is not a suffix of " + to_string(x.shape()));
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    auto d = x.data<T>();
    const std::size_t m = numel_of(suffix);
    std::vector<double> acc(m, 0.0);
    for (std::size_t i = 0; i < d.size(); i += m)
      for (std::size_t j = 0; j < m; ++j) acc[j] += static_cast<double>(d[i + j]);
    return make_tensor<T>(suffix, std::vector<T>(acc.begin(), acc.end()), "reduce_to");
  });
  return maybe_record("reduce_to", {x}, out, [s = x.shape()](const Tensor& g, const auto&, bool) {
    return std::vector<Tensor>{broadcast_to(g, s)};
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  Tensor out = x.with_shape(std::move(shape));
  return maybe_record("reshape", {x}, out, [s = x.shape()](const Tensor& g, const auto&, bool) {
    return std::vector<Tensor>{reshape(g, s)};
  });
}

Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  check_axis(xs[0], axis, "concat");
  Shape s = xs[0].shape();
  std::size_t total = 0;
  for (const auto& t : xs) {
    require_same_dtype(t, xs[0], "concat");
    if (t.rank() != s.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && t.dim(i) != s[i])
        throw ShapeError("concat: shape mismatch " + to_string(t.shape()) + " vs " + to_string(s));
    total += t.dim(axis);
  }
  s[axis] = total;
  const auto sp = split_at(s, axis);
  Tensor out = dispatch(xs[0].dtype(), [&]<class T>() {
    std::vector<T> o(numel_of(s));
    std::size_t off = 0;
    for (const auto& t : xs) {
      auto d = t.data<T>();
      const std::size_t len = t.dim(axis);
      for (std::size_t a = 0; a < sp.outer; ++a)
        std::copy_n(&d[a * len * sp.inner], len * sp.inner, &o[(a * total + off) * sp.inner]);
      off += len;
    }
    return make_tensor<T>(s, std::move(o), "concat");
  });
  std::vector<std::size_t> lens;
  for (const auto& t : xs) lens.push_back(t.dim(axis));
  return maybe_record("concat", xs, out, [axis, lens](const Tensor& g, const auto& needs, bool) {
    std::vector<Tensor> r(lens.size());
    std::size_t off = 0;
    for (std::size_t i = 0; i < lens.size(); ++i) {
      if (needs[i]) r[i] = slice(g, axis, off, off + lens[i]);
      off += lens[i];
    }
    return r;
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t stop) {
  check_axis(x, axis, "slice");
  if (start >= stop || stop > x.dim(axis)) throw ShapeError("slice: invalid range on shape " + to_string(x.shape()));
  Shape s = x.shape();
  const std::size_t full = s[axis], len = stop - start;
  s[axis] = len;
  const auto sp = split_at(x.shape(), axis);
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    auto d = x.data<T>();
    std::vector<T> o(numel_of(s));
    for (std::size_t a = 0; a < sp.outer; ++a)
      std::copy_n(&d[(a * full + start) * sp.inner], len * sp.inner, &o[a * len * sp.inner]);
    return make_tensor<T>(s, std::move(o), "slice");
  });
  return maybe_record("slice", {x}, out, [axis, start, full](const Tensor& g, const auto&, bool) {
    return std::vector<Tensor>{embed(g, axis, start, full)};
  });
}

Tensor embed(const Tensor& x, std::size_t axis, std::size_t start, std::size_t full) {
  check_axis(x, axis, "embed");
  const std::size_t len = x.dim(axis);
  if (start + len > full) throw ShapeError("embed: range exceeds target extent");
  Shape s = x.shape();
  s[axis] = full;
  const auto sp = split_at(s, axis);
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    auto d = x.data<T>();
    std::vector<T> o(numel_of(s), T(0));
    for (std::size_t a = 0; a < sp.outer; ++a)
      std::copy_n(&d[a * len * sp.inner], len * sp.inner, &o[(a * full + start) * sp.inner]);
    return make_tensor<T>(s, std::move(o), "embed");
  });
  return maybe_record("embed", {x}, out, [axis, start, len](const Tensor& g, const auto&, bool) {
    return std::vector<Tensor>{slice(g, axis, start, start + len)};
  });
}

// ---------------------------------------------------------------------------
// Bilinear sampling

namespace {

struct Tap {
  std::size_t x0, x1, y0, y1;
  double fx, fy;
  double dpx_du, dpy_dv;  // zero where the coordinate is clamped
};

inline Tap make_tap(double u, double v, std::size_t W, std::size_t H) {
  Tap t{};
  const double sx = 0.5 * static_cast<double>(W - 1), sy = 0.5 * static_cast<double>(H - 1);
  double px = (u + 1.0) * sx, py = (v + 1.0) * sy;
  t.dpx_du = (u >= -1.0 && u <= 1.0) ? sx : 0.0;
  t.dpy_dv = (v >= -1.0 && v <= 1.0) ? sy : 0.0;
  px = std::clamp(px, 0.0, static_cast<double>(W - 1));
  py = std::clamp(py, 0.0, static_cast<double>(H - 1));
  t.x0 = W > 1 ? std::min(static_cast<std::size_t>(px), W - 2) : 0;
  t.y0 = H > 1 ? std::min(static_cast<std::size_t>(py), H - 2) : 0;
  t.x1 = W > 1 ? t.x0 + 1 : 0;
  t.y1 = H > 1 ? t.y0 + 1 : 0;
  t.fx = px - static_cast<double>(t.x0);
  t.fy = py - static_cast<double>(t.y0);
  return t;
}

struct GridDims {
  std::size_t B, C, H, W, N;
  bool batched;
};

GridDims grid_dims(const Tensor& plane, const Tensor& coords) {
  GridDims g{};
  if (plane.rank() == 3 && coords.rank() == 2 && coords.dim(1) == 2) {
    g = {1, plane.dim(0), plane.dim(1), plane.dim(2), coords.dim(0), false};
  } else if (plane.rank() == 4 && coords.rank() == 3 && coords.dim(2) == 2 && coords.dim(0) == plane.dim(0)) {
    g = {plane.dim(0), plane.dim(1), plane.dim(2), plane.dim(3), coords.dim(1), true};
  } else {
    throw ShapeError("grid_sample_bilinear: plane " + to_string(plane.shape()) + " incompatible with coords " +
                     to_string(coords.shape()));
  }
  return g;
}

}  // namespace

Tensor grid_sample_bilinear(const Tensor& plane, const Tensor& coords) {
  require_same_dtype(plane, coords, "grid_sample_bilinear");
  const GridDims gd = grid_dims(plane, coords);
  const Shape out_shape = gd.batched ? Shape{gd.B, gd.N, gd.C} : Shape{gd.N, gd.C};
  Tensor out = dispatch(plane.dtype(), [&]<class T>() {
    auto P = plane.data<T>();
    auto X = coords.data<T>();
    std::vector<T> o(gd.B * gd.N * gd.C);
    const std::size_t hw = gd.H * gd.W;
    for (std::size_t b = 0; b < gd.B; ++b)
      for (std::size_t n = 0; n < gd.N; ++n) {
        const std::size_t pn = b * gd.N + n;
        const Tap t = make_tap(X[2 * pn], X[2 * pn + 1], gd.W, gd.H);
        const double w00 = (1 - t.fx) * (1 - t.fy), w01 = t.fx * (1 - t.fy), w10 = (1 - t.fx) * t.fy,
                     w11 = t.fx * t.fy;
        const T* base = &P[b * gd.C * hw];
        for (std::size_t c = 0; c < gd.C; ++c) {
          const T* p = base + c * hw;
          o[pn * gd.C + c] = static_cast<T>(w00 * p[t.y0 * gd.W + t.x0] + w01 * p[t.y0 * gd.W + t.x1] +
                                            w10 * p[t.y1 * gd.W + t.x0] + w11 * p[t.y1 * gd.W + t.x1]);
        }
      }
    return make_tensor<T>(out_shape, std::move(o), "grid_sample_bilinear");
  });
  return maybe_record(
      "grid_sample_bilinear", {plane, coords}, out, [plane, coords, gd](const Tensor& g, const auto& needs, bool graph) {
        no_graph(graph, "grid_sample_bilinear");
        return dispatch(plane.dtype(), [&]<class T>() {
          auto P = plane.data<T>();
          auto X = coords.data<T>();
          auto G = g.data<T>();
          const std::size_t hw = gd.H * gd.W;
          std::vector<double> gp(needs[0] ? P.size() : 0, 0.0);
          std::vector<T> gc(needs[1] ? X.size() : 0, T(0));
          for (std::size_t b = 0; b < gd.B; ++b)
            for (std::size_t n = 0; n < gd.N; ++n) {
              const std::size_t pn = b * gd.N + n;
              const Tap t = make_tap(X[2 * pn], X[2 * pn + 1], gd.W, gd.H);
              const std::size_t i00 = t.y0 * gd.W + t.x0, i01 = t.y0 * gd.W + t.x1, i10 = t.y1 * gd.W + t.x0,
                                i11 = t.y1 * gd.W + t.x1;
              double du = 0, dv = 0;
              for (std::size_t c = 0; c < gd.C; ++c) {
                const double gv = G[pn * gd.C + c];
                const std::size_t off = b * gd.C * hw + c * hw;
                if (needs[0]) {
                  gp[off + i00] += gv * (1 - t.fx) * (1 - t.fy);
                  gp[off + i01] += gv * t.fx * (1 - t.fy);
                  gp[off + i10] += gv * (1 - t.fx) * t.fy;
                  gp[off + i11] += gv * t.fx * t.fy;
                }
                if (needs[1]) {
                  const double p00 = P[off + i00], p01 = P[off + i01], p10 = P[off + i10], p11 = P[off + i11];
                  du += gv * ((1 - t.fy) * (p01 - p00) + t.fy * (p11 - p10));
                  dv += gv * ((1 - t.fx) * (p10 - p00) + t.fx * (p11 - p01));
                }
              }
              if (needs[1]) {
                gc[2 * pn] = static_cast<T>(du * t.dpx_du);
                gc[2 * pn + 1] = static_cast<T>(dv * t.dpy_dv);
              }
            }
          std::vector<Tensor> r(2);
          if (needs[0])
            r[0] = make_tensor<T>(plane.shape(), std::vector<T>(gp.begin(), gp.end()), "grid_sample_grad_plane");
          if (needs[1]) r[1] = make_tensor<T>(coords.shape(), std::move(gc), "grid_sample_grad_coords");
          return r;
        });
      });
}

// ---------------------------------------------------------------------------

OpKind op_kind_from_name(std::string_view name) {
  static const std::unordered_map<std::string_view, OpKind> table = {
      {"add", OpKind::Add},         {"sub", OpKind::Sub},         {"mul", OpKind::Mul},
      {"matmul", OpKind::Matmul},   {"affine", OpKind::Affine},   {"conv2d", OpKind::Conv2d},
      {"leaky_relu", OpKind::LeakyRelu}, {"softplus", OpKind::Softplus}, {"sigmoid", OpKind::Sigmoid},
      {"tanh", OpKind::Tanh},       {"exp", OpKind::Exp},         {"log", OpKind::Log},
      {"sum", OpKind::Sum},         {"mean", OpKind::Mean},       {"square", OpKind::Square},
      {"concat", OpKind::Concat},   {"reshape", OpKind::Reshape}, {"broadcast", OpKind::Broadcast},
      {"slice", OpKind::Slice}};
  auto it = table.find(name);
  if (it == table.end()) throw std::invalid_argument("unknown op kind '" + std::string(name) + "'");
  return it->second;
}

Tensor apply(OpKind kind, const std::vector<Tensor>& in) {
  auto need = [&](std::size_t lo, std::size_t hi) {
    if (in.size() < lo || in.size() > hi) throw std::invalid_argument("apply: wrong number of inputs");
  };
  switch (kind) {
    case OpKind::Add: need(2, 2); return add(in[0], in[1]);
    case OpKind::Sub: need(2, 2); return sub(in[0], in[1]);
    case OpKind::Mul: need(2, 2); return mul(in[0], in[1]);
    case OpKind::Matmul: need(2, 2); return matmul(in[0], in[1]);
    case OpKind::Affine: need(2, 3); return affine(in[0], in[1], in.size() == 3 ? in[2] : Tensor{});
    case OpKind::Conv2d: need(2, 3); return conv2d(in[0], in[1], in.size() == 3 ? in[2] : Tensor{});
    case OpKind::LeakyRelu: need(1, 1); return leaky_relu(in[0]);
    case OpKind::Softplus: need(1, 1); return softplus(in[0]);
    case OpKind::Sigmoid: need(1, 1); return sigmoid(in[0]);
    case OpKind::Tanh: need(1, 1); return tanh(in[0]);
    case OpKind::Exp: need(1, 1); return exp(in[0]);
    case OpKind::Log: need(1, 1); return log(in[0]);
    case OpKind::Sum: need(1, 1); return sum(in[0]);
    case OpKind::Mean: need(1, 1); return mean(in[0]);
    case OpKind::Square: need(1, 1); return square(in[0]);
    case OpKind::Concat: need(1, 64); return concat(in, 0);
    case OpKind::Reshape: need(2, 2); return reshape(in[0], in[1].shape());
    case OpKind::Broadcast: need(2, 2); return broadcast_to(in[0], in[1].shape());
    case OpKind::Slice:
      need(1, 1);
      return slice(in[0], 0, 0, in[0].dim(0));
  }
  throw std::invalid_argument("apply: unknown op kind");
}

}  // namespace av::ad
