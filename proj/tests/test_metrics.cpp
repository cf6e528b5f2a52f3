#include <cmath>
#include <filesystem>

#include <Eigen/Eigenvalues>
#include <gtest/gtest.h>

#include "avatar/metrics.hpp"

using namespace av;
namespace fs = std::filesystem;

namespace {

GaussianStats stats(Eigen::VectorXd mu, Eigen::MatrixXd sigma) {
  return {std::move(mu), std::move(sigma), 100};
}

Eigen::MatrixXd random_spd(int d, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd a(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) a(i, j) = rng.normal();
  return a * a.transpose() / d + 0.1 * Eigen::MatrixXd::Identity(d, d);
}

Eigen::VectorXd random_vec(int d, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::VectorXd v(d);
  for (int i = 0; i < d; ++i) v[i] = rng.normal();
  return v;
}

// One single-style corpus per style, synthesised once per test binary.
const Dataset& corpus(const std::string& style) {
  static std::map<std::string, Dataset> cache;
  auto it = cache.find(style);
  if (it != cache.end()) return it->second;
  const fs::path dir = fs::temp_directory_path() / ("avatar_metrics_" + style);
  fs::remove_all(dir);
  SynthConfig cfg;
  cfg.n = 400;
  cfg.styles = {style};
  cfg.seed = 77;
  synth_dataset(cfg, dir);
  Dataset d = load_dataset(dir);
  fs::remove_all(dir);
  return cache.emplace(style, std::move(d)).first->second;
}

Dataset subset(const Dataset& d, int parity) {
  Dataset out;
  out.resolution = d.resolution;
  for (const auto& r : d.records)
    if (r.id % 2 == parity) out.records.push_back(r);
  return out;
}

Eigen::MatrixXd embed_all(const FeatureExtractor& fx, const Dataset& d) {
  std::vector<Image> ims;
  for (const auto& r : d.records) ims.push_back(r.image);
  return fx.embed(ims);
}

}  // namespace

TEST(Frechet, ClosedForms) {
  const Eigen::MatrixXd s = random_spd(5, 1);
  const Eigen::VectorXd mu = random_vec(5, 2);
  EXPECT_NEAR(frechet(stats(mu, s), stats(mu, s)), 0.0, 1e-8);

  EXPECT_NEAR(frechet(stats(Eigen::Vector2d(0, 0), Eigen::Matrix2d::Identity()),
                      stats(Eigen::Vector2d(3, 4), Eigen::Matrix2d::Identity())),
              25.0, 1e-8);

  const Eigen::Matrix2d a = Eigen::Vector2d(1, 4).asDiagonal(), b = Eigen::Vector2d(4, 1).asDiagonal();
  EXPECT_NEAR(frechet(stats(Eigen::Vector2d::Zero(), a), stats(Eigen::Vector2d::Zero(), b)), 2.0, 1e-8);
}

TEST(Frechet, SymmetricAndMatchesProductRoot) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const int d = 2 + static_cast<int>(seed % 6);
    const auto a = stats(random_vec(d, seed), random_spd(d, seed + 100));
    const auto b = stats(random_vec(d, seed + 200), random_spd(d, seed + 300));
    const double ab = frechet(a, b), ba = frechet(b, a);
    EXPECT_NEAR(ab, ba, 1e-8);
    // Independent route: tr (S_a S_b)^1/2 from the eigenvalues of the
    // non-symmetric product, which are real and non-negative.
    const Eigen::EigenSolver<Eigen::MatrixXd> es(a.sigma * b.sigma);
    double tr = 0;
    for (int i = 0; i < d; ++i) tr += std::sqrt(std::max(0.0, es.eigenvalues()[i].real()));
    const double expect = (a.mu - b.mu).squaredNorm() + a.sigma.trace() + b.sigma.trace() - 2 * tr;
    EXPECT_NEAR(ab, expect, 1e-8 * std::max(1.0, expect));
    EXPECT_GE(ab, 0.0);
  }
}

TEST(Frechet, OneDimensional) {
  // (mu_a - mu_b)^2 + (s_a - s_b)^2
  Eigen::MatrixXd va(1, 1), vb(1, 1);
  va << 4.0;
  vb << 9.0;
  Eigen::VectorXd ma(1), mb(1);
  ma << 1.0;
  mb << -1.0;
  EXPECT_NEAR(frechet(stats(ma, va), stats(mb, vb)), 4.0 + 1.0, 1e-12);
}

TEST(Frechet, RankDeficientCovarianceClamped) {
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(3, 3);
  s(0, 0) = 1;
  s(0, 1) = s(1, 0) = 1;
  s(1, 1) = 1;  // rank 1
  const auto a = stats(Eigen::Vector3d::Zero(), s);
  EXPECT_NEAR(frechet(a, a), 0.0, 1e-8);
}

TEST(Frechet, DimensionMismatchThrows) {
  EXPECT_THROW(frechet(stats(Eigen::Vector2d::Zero(), Eigen::Matrix2d::Identity()),
                       stats(Eigen::Vector3d::Zero(), Eigen::Matrix3d::Identity())),
               std::invalid_argument);
}

TEST(GaussianStats, MeanAndUnbiasedCovariance) {
  Eigen::MatrixXd f(3, 2);
  f << 1, 2, 3, 6, 5, 10;
  const auto s = gaussian_stats(f);
  EXPECT_DOUBLE_EQ(s.mu[0], 3.0);
  EXPECT_DOUBLE_EQ(s.mu[1], 6.0);
  EXPECT_DOUBLE_EQ(s.sigma(0, 0), 4.0);
  EXPECT_DOUBLE_EQ(s.sigma(0, 1), 8.0);
  EXPECT_DOUBLE_EQ(s.sigma(1, 1), 16.0);
  EXPECT_EQ(s.n, 3u);
  EXPECT_THROW(gaussian_stats(Eigen::MatrixXd(1, 2)), std::invalid_argument);
}

TEST(Features, DeterministicAndShaped) {
  const FeatureExtractor a, b;
  Image im(3, 32, 32);
  Rng rng(3);
  for (auto& v : im.data) v = static_cast<float>(rng.uniform());
  const std::vector<Image> one{im, im};
  const Eigen::MatrixXd fa = a.embed(one), fb = b.embed(one);
  EXPECT_EQ(fa.cols(), 64);
  EXPECT_EQ(fa.rows(), 2);
  for (int j = 0; j < 64; ++j) {
    EXPECT_EQ(fa(0, j), fb(0, j));
    EXPECT_EQ(fa(0, j), fa(1, j));
  }
  EXPECT_THROW(a.embed(std::vector<Image>{Image(3, 16, 16)}), std::invalid_argument);
  EXPECT_EQ(FeatureExtractor({32, 12}).embed(one).cols(), 12);
}

TEST(Features, SeparatesStyles) {
  const FeatureExtractor fx;
  const Eigen::MatrixXd a = embed_all(fx, corpus("Hulk")), b = embed_all(fx, corpus("Pixel Art"));
  const Eigen::RowVectorXd ca = a.colwise().mean(), cb = b.colwise().mean();
  auto spread = [](const Eigen::MatrixXd& m, const Eigen::RowVectorXd& c) {
    return std::sqrt((m.rowwise() - c).rowwise().squaredNorm().mean());
  };
  EXPECT_GT((ca - cb).norm(), std::max(spread(a, ca), spread(b, cb)));
}

TEST(Protocol, HalvesCloserThanStylesAndReplayerNearZero) {
  const FeatureExtractor fx;
  const Dataset& a = corpus("Hulk");
  const Dataset& b = corpus("Pixel Art");
  const auto half0 = gaussian_stats(embed_all(fx, subset(a, 0)));
  const auto half1 = gaussian_stats(embed_all(fx, subset(a, 1)));
  const double halves = frechet(half0, half1);
  const double cross = frechet(gaussian_stats(embed_all(fx, a)), gaussian_stats(embed_all(fx, b)));
  std::printf("halves %.4f  cross-style %.4f\n", halves, cross);
  EXPECT_LT(10 * halves, cross);

  const ReferenceStats ref = reference_stats(fx, a);
  DatasetReplayer replay(a);
  const FdScore s = eval_protocol(replay, ref, fx, 2000, 5);
  std::printf("replayer FD %.4f  (front %.4f side %.4f back %.4f)\n", s.overall, *s.per_bucket[0], *s.per_bucket[1],
              *s.per_bucket[2]);
  EXPECT_LT(s.overall, 0.5);
  EXPECT_LT(s.overall, cross / 10);
  for (const auto& v : s.per_bucket) ASSERT_TRUE(v.has_value());

  const FdScore again = eval_protocol(replay, ref, fx, 2000, 5);
  EXPECT_EQ(fd_score_to_json(again).dump(), fd_score_to_json(s).dump());
  EXPECT_EQ(fd_score_to_json(s)["n"], 2000);
}

namespace {

// Records every pose pair it is asked for.
class Recorder : public ViewSource {
 public:
  std::vector<SphericalPose> cond, views;
  std::vector<Image> render(std::span<const SphericalPose> c, std::span<const SphericalPose> v, Rng&) override {
    cond.assign(c.begin(), c.end());
    views.assign(v.begin(), v.end());
    return std::vector<Image>(v.size(), Image(3, 32, 32, 0.5f));
  }
};

}  // namespace

TEST(Protocol, ConditioningAndViewPosesIndependent) {
  const FeatureExtractor fx;
  Dataset d;
  d.resolution = 32;
  Rng rng(1);
  for (int i = 0; i < 300; ++i) {
    DatasetRecord r;
    r.id = i;
    r.image = Image(3, 32, 32);
    for (auto& v : r.image.data) v = static_cast<float>(rng.uniform());
    r.nominal = sample_pose(rng);
    d.records.push_back(std::move(r));
  }
  const auto ref = reference_stats(fx, d);
  Recorder a, b;
  eval_protocol(a, ref, fx, 4000, 1);
  eval_protocol(b, ref, fx, 4000, 2);
  // Different seeds change views and conditioning; each stream is its own.
  EXPECT_NE(a.views[0], b.views[0]);
  // Views are the same stream whatever n is: the first draws coincide.
  Recorder c;
  eval_protocol(c, ref, fx, 10, 1);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(c.views[i], a.views[i]);
    EXPECT_EQ(c.cond[i], a.cond[i]);
  }
  // Empirical independence: bucket contingency table is close to the
  // product of its margins (chi-square with 4 dof, 99.9% quantile 18.5).
  double table[3][3] = {};
  for (std::size_t i = 0; i < a.views.size(); ++i)
    table[static_cast<int>(view_bucket(a.cond[i]))][static_cast<int>(view_bucket(a.views[i]))] += 1;
  double rows[3] = {}, cols[3] = {};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      rows[i] += table[i][j];
      cols[j] += table[i][j];
    }
  double chi2 = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const double e = rows[i] * cols[j] / 4000.0;
      chi2 += (table[i][j] - e) * (table[i][j] - e) / e;
    }
  EXPECT_LT(chi2, 18.5);
}

TEST(Protocol, BucketBoundaries) {
  EXPECT_EQ(view_bucket(SphericalPose::make(59.9, 0)), ViewBucket::Front);
  EXPECT_EQ(view_bucket(SphericalPose::make(-60, 0)), ViewBucket::Side);
  EXPECT_EQ(view_bucket(SphericalPose::make(119.9, 0)), ViewBucket::Side);
  EXPECT_EQ(view_bucket(SphericalPose::make(-120, 0)), ViewBucket::Back);
  EXPECT_EQ(view_bucket(SphericalPose::make(-180, 0)), ViewBucket::Back);
}
