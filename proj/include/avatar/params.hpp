#pragma once

// Ordered, named parameter collections shared by the networks, plus
// initialisers and the exponential moving average used for evaluation.

#include <string>
#include <vector>

#include "avatar/autodiff.hpp"
#include "avatar/checkpoint.hpp"
#include "avatar/rng.hpp"

namespace av {

class ParamSet {
 public:
  ParamSet() = default;
  explicit ParamSet(NamedTensors items) : items_(std::move(items)) {}

  void add(std::string name, ad::Tensor t);
  const ad::Tensor& operator[](const std::string& name) const;  // throws std::out_of_range
  bool contains(const std::string& name) const;

  const NamedTensors& items() const { return items_; }
  std::vector<ad::Tensor> tensors() const;
  void assign(const std::vector<ad::Tensor>& values);  // same order and shapes
  std::size_t count() const;                          // total scalar parameters

  // Copy with every tensor attached to `tape` as a leaf.
  ParamSet watched(ad::Tape& tape) const;
  ParamSet to(ad::DType dtype) const;

  // Reads the tensors named like ours from a checkpoint map; shapes must match.
  void load_from(const std::map<std::string, ad::Tensor>& stored, const std::string& prefix = "");
  void append_to(NamedTensors& out, const std::string& prefix = "") const;

 private:
  NamedTensors items_;
};

// (rows, cols) matrix with orthonormal rows or columns (whichever is fewer),
// times `gain`.
ad::Tensor orthogonal(Rng& rng, std::size_t rows, std::size_t cols, double gain, ad::DType dtype);

// ema <- decay * ema + (1 - decay) * current, elementwise.
void ema_update(ParamSet& ema, const ParamSet& current, double decay);

}  // namespace av
