#include <cmath>

#include "avatar/autodiff.hpp"
#include "dispatch.hpp"

namespace av::ad {

AdamState make_adam(const std::vector<Tensor>& params, AdamConfig config) {
  AdamState s;
  s.config = config;
  for (const auto& p : params) {
    s.m.push_back(Tensor::zeros(p.shape(), p.dtype()));
    s.v.push_back(Tensor::zeros(p.shape(), p.dtype()));
  }
  return s;
}

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ShapeError("adam_step: parameter/gradient/state counts differ");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].shape() != grads[i].shape() || params[i].shape() != state.m[i].shape())
      throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(i));

  state.step += 1;
  const auto& c = state.config;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    dispatch(params[i].dtype(), [&]<class T>() {
      auto p = params[i].data<T>();
      auto g = grads[i].template data<T>();
      auto m = state.m[i].template data<T>();
      auto v = state.v[i].template data<T>();
      std::vector<T> np(p.size()), nm(p.size()), nv(p.size());
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = g[k];
        const double mk = c.beta1 * static_cast<double>(m[k]) + (1.0 - c.beta1) * gk;
        const double vk = c.beta2 * static_cast<double>(v[k]) + (1.0 - c.beta2) * gk * gk;
        nm[k] = static_cast<T>(mk);
        nv[k] = static_cast<T>(vk);
        np[k] = static_cast<T>(static_cast<double>(p[k]) - c.lr * (mk / bc1) / (std::sqrt(vk / bc2) + c.eps));
      }
      params[i] = make_tensor<T>(params[i].shape(), std::move(np), "adam_step");
      state.m[i] = make_tensor<T>(params[i].shape(), std::move(nm), "adam_step");
      state.v[i] = make_tensor<T>(params[i].shape(), std::move(nv), "adam_step");
    });
  }
}

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f, const std::vector<Tensor>& point,
                  double h) {
  Tape tape;
  std::vector<Tensor> attached;
  for (const auto& p : point) attached.push_back(tape.watch(p));
  const Tensor y = f(attached);
  const auto analytic = tape.gradients(y, attached);

  std::vector<Tensor> probe;
  for (const auto& p : point) probe.push_back(p.detach());
  auto eval = [&](std::size_t which, std::size_t k, double delta) {
    auto vals = point[which].values();
    vals[k] += delta;
    probe[which] = Tensor::from(point[which].shape(), vals, point[which].dtype());
    const double out = f(probe).item();
    probe[which] = point[which].detach();
    if (!std::isfinite(out)) throw NonFiniteError("grad_check: f is non-finite at a perturbed point");
    return out;
  };

  double worst = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const auto a = analytic[i].values();
    for (std::size_t k = 0; k < a.size(); ++k) {
      const double numeric = (eval(i, k, h) - eval(i, k, -h)) / (2.0 * h);
      worst = std::max(worst, std::abs(a[k] - numeric) / (std::abs(numeric) + 1e-12));
    }
  }
  return worst;
}

}  // namespace av::ad
