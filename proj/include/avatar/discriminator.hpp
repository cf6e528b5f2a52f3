#pragma once

// Pose-conditioned convolutional discriminator with projection conditioning:
// logit = phi(h(x)) + <psi(label), h(x)>, where psi is a bias-free linear map
// so a zeroed label block contributes exactly nothing. Built only from ops
// that support differentiable backward, so the R1 penalty can be taken
// through it.

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "avatar/autodiff.hpp"
#include "avatar/params.hpp"
#include "avatar/pose_codec.hpp"

namespace av {

struct DiscConfig {
  int resolution = 32;
  // Channels after the stem conv and after each stride-2 conv.
  std::vector<int> channels{16, 32, 64, 64};
  int feature_dim = 64;
  int label_dim = BinningConfig{}.dim();
  double r1_gamma = 1.0;

  void validate() const;
  int final_res() const;
};

nlohmann::json disc_config_to_json(const DiscConfig& c);
DiscConfig disc_config_from_json(const nlohmann::json& j);  // unknown keys -> SchemaError

ParamSet init_discriminator(const DiscConfig& cfg, std::uint64_t seed, ad::DType dtype = ad::DType::F32);

// Image features h(x), (B, feature_dim).
ad::Tensor disc_features(const DiscConfig& cfg, const ParamSet& p, const ad::Tensor& images);
// images (B, 3, H, W), labels (B, label_dim) -> logits (B).
ad::Tensor discriminate(const DiscConfig& cfg, const ParamSet& p, const ad::Tensor& images, const ad::Tensor& labels);

// Dense label rows for a batch, (B, label_dim).
ad::Tensor label_batch(const std::vector<PoseLabel>& labels, const BinningConfig& bins,
                       ad::DType dtype = ad::DType::F32);

struct DLoss {
  ad::Tensor total;  // scalar, attached when p is
  double gan = 0;    // mean softplus(D(fake)) + mean softplus(-D(real))
  double r1 = 0;     // (gamma / 2) * mean ||grad_x D(real)||^2
  double real_logit = 0, fake_logit = 0;  // batch means
};

// Non-saturating discriminator loss with the R1 penalty on reals. The real
// images are watched on `tape` to take the penalty by double backward; `p`
// may be attached to the same tape. Fakes should be detached.
DLoss d_loss(const DiscConfig& cfg, const ParamSet& p, ad::Tape& tape, const ad::Tensor& real_images,
             const ad::Tensor& real_labels, const ad::Tensor& fake_images, const ad::Tensor& fake_labels,
             double gamma);

// mean softplus(-logit).
ad::Tensor g_loss(const ad::Tensor& fake_logits);

}  // namespace av
