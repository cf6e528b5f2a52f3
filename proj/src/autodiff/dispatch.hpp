#pragma once

#include "avatar/autodiff.hpp"

namespace av::ad {

template <class F>
decltype(auto) dispatch(DType d, F&& f) {
  if (d == DType::F32) return f.template operator()<float>();
  return f.template operator()<double>();
}

inline void require_same_dtype(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.dtype() != b.dtype())
    throw ShapeError(std::string(op) + ": dtype mismatch (" + std::string(dtype_name(a.dtype())) + " vs " +
                     std::string(dtype_name(b.dtype())) + ")");
}

// Records `out` if any input is attached, otherwise returns it unchanged.
inline Tensor maybe_record(std::string_view op, std::vector<Tensor> inputs, Tensor out, BackwardFn fn) {
  if (Tape* tape = common_tape(inputs)) return tape->record(op, std::move(inputs), std::move(out), std::move(fn));
  return out;
}

// Inputs as seen by a backward rule: attached in graph mode, detached otherwise.
inline Tensor saved(const Tensor& t, bool build_graph) { return build_graph ? t : t.detach(); }

inline void no_graph(bool build_graph, std::string_view op) {
  if (build_graph) throw UnsupportedOpError(std::string(op) + " does not support build_graph backward");
}

}  // namespace av::ad
