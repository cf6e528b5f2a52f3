#include "avatar/params.hpp"

#include <Eigen/QR>
#include <stdexcept>

namespace av {

using ad::DType;
using ad::Tensor;

void ParamSet::add(std::string name, Tensor t) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  items_.emplace_back(std::move(name), std::move(t));
}

const Tensor& ParamSet::operator[](const std::string& name) const {
  for (const auto& [k, v] : items_)
    if (k == name) return v;
  throw std::out_of_range("no parameter named '" + name + "'");
}

bool ParamSet::contains(const std::string& name) const {
  for (const auto& kv : items_)
    if (kv.first == name) return true;
  return false;
}

std::vector<Tensor> ParamSet::tensors() const {
  std::vector<Tensor> out;
  for (const auto& kv : items_) out.push_back(kv.second);
  return out;
}

void ParamSet::assign(const std::vector<Tensor>& values) {
  if (values.size() != items_.size()) throw ad::ShapeError("ParamSet::assign: count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].shape() != items_[i].second.shape())
      throw ad::ShapeError("ParamSet::assign: shape mismatch for '" + items_[i].first + "'");
    items_[i].second = values[i].detach();
  }
}

std::size_t ParamSet::count() const {
  std::size_t n = 0;
  for (const auto& kv : items_) n += kv.second.numel();
  return n;
}

ParamSet ParamSet::watched(ad::Tape& tape) const {
  ParamSet p;
  for (const auto& [k, v] : items_) p.items_.emplace_back(k, tape.watch(v));
  return p;
}

ParamSet ParamSet::to(DType dtype) const {
  ParamSet p;
  for (const auto& [k, v] : items_) p.items_.emplace_back(k, v.to(dtype));
  return p;
}

void ParamSet::load_from(const std::map<std::string, Tensor>& stored, const std::string& prefix) {
  for (auto& [k, v] : items_) {
    auto it = stored.find(prefix + k);
    if (it == stored.end()) throw std::out_of_range("checkpoint lacks tensor '" + prefix + k + "'");
    if (it->second.shape() != v.shape())
      throw ad::ShapeError("checkpoint tensor '" + prefix + k + "' has shape " + ad::to_string(it->second.shape()) +
                           ", expected " + ad::to_string(v.shape()));
    v = it->second.to(v.dtype());
  }
}

void ParamSet::append_to(NamedTensors& out, const std::string& prefix) const {
  for (const auto& [k, v] : items_) out.emplace_back(prefix + k, v.detach());
}

Tensor orthogonal(Rng& rng, std::size_t rows, std::size_t cols, double gain, DType dtype) {
  const bool tall = rows >= cols;
  const Eigen::Index m = static_cast<Eigen::Index>(tall ? rows : cols), n = static_cast<Eigen::Index>(tall ? cols : rows);
  Eigen::MatrixXd a(m, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < m; ++i) a(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(m, n);
  // Sign fix so the result is uniformly distributed over orthogonal matrices.
  const Eigen::MatrixXd r = qr.matrixQR();
  for (Eigen::Index j = 0; j < n; ++j)
    if (r(j, j) < 0) q.col(j) *= -1;
  std::vector<double> v(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      v[i * cols + j] = gain * (tall ? q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))
                                     : q(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)));
  return Tensor::from({rows, cols}, v, dtype);
}

void ema_update(ParamSet& ema, const ParamSet& current, double decay) {
  if (!(decay >= 0 && decay <= 1)) throw std::invalid_argument("ema decay must lie in [0, 1]");
  const auto cur = current.tensors();
  auto old = ema.tensors();
  std::vector<Tensor> next;
  for (std::size_t i = 0; i < old.size(); ++i) {
    if (old[i].shape() != cur[i].shape()) throw ad::ShapeError("ema_update: shape mismatch");
    if (decay == 0) {
      next.push_back(cur[i].detach());
      continue;
    }
    std::vector<double> a = old[i].values(), b = cur[i].values();
    for (std::size_t k = 0; k < a.size(); ++k) a[k] = decay * a[k] + (1 - decay) * b[k];
    next.push_back(Tensor::from(old[i].shape(), a, old[i].dtype()));
  }
  ema.assign(next);
}

}  // namespace av
