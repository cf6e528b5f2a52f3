#include <cmath>
#include <numbers>

#include <Eigen/LU>
#include <gtest/gtest.h>

#include "avatar/camera.hpp"
#include "avatar/pose_codec.hpp"

using namespace av;

TEST(Pose, YawNormalization) {
  EXPECT_DOUBLE_EQ(normalize_yaw(180.0), -180.0);
  EXPECT_DOUBLE_EQ(normalize_yaw(-180.0), -180.0);
  EXPECT_DOUBLE_EQ(normalize_yaw(190.0), -170.0);
  EXPECT_DOUBLE_EQ(normalize_yaw(-540.0), -180.0);
  EXPECT_DOUBLE_EQ(normalize_yaw(725.0), 5.0);
  EXPECT_LT(normalize_yaw(std::nextafter(180.0, 0.0)), 180.0);
  EXPECT_THROW(SphericalPose::make(0, 31), std::invalid_argument);
  EXPECT_THROW(SphericalPose::make(0, 0, 0), std::invalid_argument);
}

TEST(Camera, SamplePose) {
  Rng a(7), b(7);
  EXPECT_EQ(sample_pose(a), sample_pose(b));
  Rng r(1);
  auto p = sample_pose(r, {0, 0}, {0, 0}, 2.0);
  EXPECT_EQ(p, SphericalPose::make(0, 0, 2.0));
  EXPECT_THROW(sample_pose(r, {10, 0}, {0, 0}), std::invalid_argument);
  double mean = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) mean += sample_pose(r).yaw_deg;
  EXPECT_NEAR(mean / n, 0.0, 2.0);
}

TEST(Camera, ExtrinsicsConvention) {
  auto m = extrinsics(SphericalPose::make(0, 0, 2.7));
  EXPECT_NEAR((m.block<3, 1>(0, 3) - Eigen::Vector3d(0, 0, 2.7)).norm(), 0.0, 1e-12);
  EXPECT_NEAR((-m.block<3, 1>(0, 2) - Eigen::Vector3d(0, 0, -1)).norm(), 0.0, 1e-12);
  EXPECT_NEAR((camera_position(SphericalPose::make(90, 0, 2.0)) - Eigen::Vector3d(2, 0, 0)).norm(), 0.0, 1e-12);
  EXPECT_NEAR(camera_position(SphericalPose::make(0, 30, 2.0)).y(), 1.0, 1e-12);
}

TEST(Camera, ExtrinsicsRigid) {
  Rng r(3);
  for (int i = 0; i < 200; ++i) {
    const auto pose = sample_pose(r);
    const Eigen::Matrix4d m = extrinsics(pose);
    const Eigen::Matrix3d rot = m.block<3, 3>(0, 0);
    EXPECT_LT((rot.transpose() * rot - Eigen::Matrix3d::Identity()).norm(), 1e-6);
    EXPECT_NEAR(rot.determinant(), 1.0, 1e-6);
    const Eigen::Vector3d look = -rot.col(2);
    EXPECT_NEAR(look.dot(-camera_position(pose).normalized()), 1.0, 1e-12);
    EXPECT_GT(rot.col(1).y(), 0.0);
  }
}

TEST(Camera, Rays) {
  CameraRig rig{4, 4, 1.5, 1.5, 4, 4, 1, 3};  // principal point on pixel (1,1)'s centre
  const auto pose = SphericalPose::make(37, -12, 2.7);
  auto rs = rays(pose, rig);
  ASSERT_EQ(rs.size(), 16u);
  const Eigen::Vector3d look = -extrinsics(pose).block<3, 1>(0, 2);
  EXPECT_NEAR(rs[1 * 4 + 1].dir.dot(look), 1.0, 1e-6);
  for (const auto& ray : rs) {
    EXPECT_NEAR(ray.dir.norm(), 1.0, 1e-6);
    EXPECT_EQ(ray.origin, camera_position(pose));
  }
  // fx = fy = W = 4 with the centre at 2: the corner pixel centre (0.5, 0.5)
  // sits 1.5 px off-axis in both directions, so cos = 1 / sqrt(1 + 2 * (1.5/4)^2).
  CameraRig r2{4, 4, 2, 2, 4, 4, 1, 3};
  auto rs2 = rays(SphericalPose::make(0, 0), r2);
  EXPECT_NEAR(rs2[0].dir.dot(Eigen::Vector3d(0, 0, -1)), 1.0 / std::sqrt(1.28125), 1e-12);
  EXPECT_LT(rs2[0].dir.x(), 0.0);  // left column looks left
  EXPECT_GT(rs2[0].dir.y(), 0.0);  // top row looks up
}

TEST(Camera, FlipPose) {
  EXPECT_DOUBLE_EQ(flip_pose(SphericalPose::make(30, 5)).yaw_deg, -30.0);
  EXPECT_DOUBLE_EQ(flip_pose(SphericalPose::make(0, 5)).yaw_deg, 0.0);
  const auto p = SphericalPose::make(73.2, -4, 2.1);
  EXPECT_EQ(flip_pose(flip_pose(p)), p);
  EXPECT_EQ(flip_pose(SphericalPose::make(-180, 0)).yaw_deg, -180.0);
}

TEST(Camera, FlippedRaysAreMirrored) {
  const auto rig = CameraRig::square(8);
  const auto p = SphericalPose::make(41, 13);
  auto a = rays(p, rig), b = rays(flip_pose(p), rig);
  for (int v = 0; v < 8; ++v)
    for (int u = 0; u < 8; ++u) {
      const auto& ra = a[v * 8 + u];
      const auto& rb = b[v * 8 + (7 - u)];
      EXPECT_NEAR(ra.dir.x(), -rb.dir.x(), 1e-12);
      EXPECT_NEAR(ra.dir.y(), rb.dir.y(), 1e-12);
      EXPECT_NEAR(ra.dir.z(), rb.dir.z(), 1e-12);
    }
}

TEST(Camera, PoseJson) {
  const auto p = SphericalPose::make(-12.5, 3.25, 2.7);
  EXPECT_EQ(pose_from_json(pose_to_json(p)), p);
  auto j = pose_to_json(p);
  j["roll"] = 1;
  EXPECT_THROW(pose_from_json(j), std::invalid_argument);
}

TEST(Codec, Dimensions) {
  BinningConfig cfg;
  EXPECT_EQ(cfg.dim(), 60);
  EXPECT_EQ(cfg.yaw_fine, 40);
  EXPECT_EQ(cfg.pitch_fine, 15);
  EXPECT_EQ(cfg.yaw_coarse, 3);
  EXPECT_EQ(cfg.pitch_coarse, 2);
  EXPECT_EQ(cfg.fine_dim(), 55);
}

TEST(Codec, BinIndex) {
  EXPECT_EQ(bin_index(0, kYawRange, 40), 20);
  EXPECT_EQ(bin_index(0, kPitchRange, 15), 7);
  EXPECT_EQ(bin_index(30, kPitchRange, 15), 14);
  EXPECT_EQ(bin_index(-30, kPitchRange, 15), 0);
  EXPECT_THROW(bin_index(30.5, kPitchRange, 15), std::invalid_argument);
  int prev = 0;
  for (double y = -180; y < 180; y += 0.01) {
    const int k = bin_index(y, kYawRange, 40);
    EXPECT_GE(k, prev);
    prev = k;
  }
  for (int k = 0; k + 1 < 40; ++k)
    EXPECT_EQ(bin_index(bin_center(kYawRange, 40, k + 1), kYawRange, 40) -
                  bin_index(bin_center(kYawRange, 40, k), kYawRange, 40),
              1);
}

TEST(Codec, EncodeExamples) {
  BinningConfig cfg;
  auto v = label_vector(encode(SphericalPose::make(0, 0), cfg, LabelPart::Fine), cfg);
  ASSERT_EQ(v.size(), 60u);
  for (std::size_t i = 0; i < 60; ++i) EXPECT_EQ(v[i], (i == 20 || i == 47) ? 1.0f : 0.0f) << i;
  v = label_vector(encode(SphericalPose::make(170, 0), cfg, LabelPart::Coarse), cfg);
  for (std::size_t i = 0; i < 60; ++i) EXPECT_EQ(v[i], (i == 57 || i == 59) ? 1.0f : 0.0f) << i;
}

TEST(Codec, EveryLabelHasTwoHotsInsideActivePart) {
  BinningConfig cfg;
  Rng r(11);
  for (int i = 0; i < 2000; ++i) {
    const auto pose = sample_pose(r);
    for (auto part : {LabelPart::Fine, LabelPart::Coarse}) {
      auto v = label_vector(encode(pose, cfg, part), cfg);
      float total = 0, inside = 0;
      for (int k = 0; k < 60; ++k) {
        total += v[k];
        const bool in_fine = k < 55;
        if (in_fine == (part == LabelPart::Fine)) inside += v[k];
      }
      EXPECT_EQ(total, 2.0f);
      EXPECT_EQ(inside, 2.0f);
    }
  }
}

TEST(Codec, Confidence) {
  EXPECT_TRUE(is_confident(SphericalPose::make(45, 10)));
  EXPECT_FALSE(is_confident(SphericalPose::make(90, 0)));
  EXPECT_TRUE(is_confident(SphericalPose::make(60, 15)));
  EXPECT_TRUE(is_confident(SphericalPose::make(-60, -15)));
  EXPECT_FALSE(is_confident(SphericalPose::make(0, 15.001)));
}

TEST(Codec, SamplePartRates) {
  ConfidencePolicy pol;
  Rng r(2024);
  const int n = 100000;
  int fine_front = 0, fine_back = 0;
  for (int i = 0; i < n; ++i) {
    fine_front += sample_part(SphericalPose::make(10, 5), pol, r) == LabelPart::Fine;
    fine_back += sample_part(SphericalPose::make(170, 5), pol, r) == LabelPart::Fine;
  }
  EXPECT_NEAR(fine_front / double(n), 0.9, 0.01);
  EXPECT_NEAR(fine_back / double(n), 0.1, 0.01);
  ConfidencePolicy always{.p_high = 1.0};
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(sample_part(SphericalPose::make(0, 0), always, r), LabelPart::Fine);
  const auto before = r.draws();
  sample_part(SphericalPose::make(0, 0), pol, r);
  EXPECT_EQ(r.draws(), before + 1);
}

TEST(Codec, FlipExamples) {
  BinningConfig cfg;
  EXPECT_EQ(encode(SphericalPose::make(4, 0), cfg, LabelPart::Fine).yaw_bin, 20);
  EXPECT_EQ(flip_encode(SphericalPose::make(4, 0), cfg, LabelPart::Fine).yaw_bin, 19);
  EXPECT_EQ(flip_encode(SphericalPose::make(0, 3), cfg, LabelPart::Fine),
            encode(SphericalPose::make(0, 3), cfg, LabelPart::Fine));
  const auto p = SphericalPose::make(-77, 21);
  EXPECT_EQ(flip_encode(p, cfg, LabelPart::Fine).pitch_bin, encode(p, cfg, LabelPart::Fine).pitch_bin);
}

TEST(Codec, ExhaustiveOverBinCentres) {
  BinningConfig cfg;
  for (auto part : {LabelPart::Fine, LabelPart::Coarse}) {
    const int ny = cfg.yaw_bins(part), np = cfg.pitch_bins(part);
    for (int a = 0; a < ny; ++a)
      for (int b = 0; b < np; ++b) {
        const PoseLabel l{part, a, b};
        const auto centre = decode(l, cfg);
        EXPECT_EQ(encode(centre, cfg, part), l);
        const auto flipped = flip_encode(centre, cfg, part);
        EXPECT_EQ(flipped.yaw_bin, ny - 1 - a);
        EXPECT_EQ(flipped.pitch_bin, b);
        EXPECT_EQ(flip_encode(decode(flipped, cfg), cfg, part), l);
      }
  }
}

TEST(Codec, LabelJson) {
  BinningConfig cfg;
  const PoseLabel l{LabelPart::Coarse, 2, 1};
  EXPECT_EQ(label_from_json(label_to_json(l), cfg), l);
  EXPECT_THROW(label_from_json({{"part", "coarse"}, {"yaw_bin", 3}, {"pitch_bin", 0}}, cfg), std::invalid_argument);
  EXPECT_THROW(label_from_json({{"part", "medium"}, {"yaw_bin", 0}, {"pitch_bin", 0}}, cfg), std::invalid_argument);
}

TEST(Codec, FineVectorForConditioning) {
  BinningConfig cfg;
  auto v = fine_vector(SphericalPose::make(0, 0), cfg);
  ASSERT_EQ(v.size(), 55u);
  EXPECT_EQ(v[20], 1.0f);
  EXPECT_EQ(v[47], 1.0f);
}
