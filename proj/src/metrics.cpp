#include "avatar/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Eigenvalues>

#include "avatar/parallel.hpp"

namespace av {

using ad::DType;
using ad::Tensor;

namespace {

constexpr int kStages = 3;
constexpr std::size_t kChannels[kStages] = {32, 64, 64};
constexpr std::size_t kEmbedBatch = 64;

std::size_t pooled_width() {
  std::size_t n = 0;
  for (std::size_t c : kChannels) n += c;
  return n;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

double trace_sqrt(const Eigen::MatrixXd& m) {
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  return es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
}

}  // namespace

FeatureExtractor::FeatureExtractor(FeatureConfig cfg) : cfg_(cfg) {
  if (cfg_.dim < 1) throw std::invalid_argument("features: dim must be positive");
  if (cfg_.resolution < 8 || cfg_.resolution % 8 != 0)
    throw std::invalid_argument("features: resolution must be a positive multiple of 8");
  Rng rng(derive_seed(cfg_.seed, {0x6e6574ULL}));
  const double gain = std::sqrt(2.0 / (1.0 + 0.2 * 0.2));
  std::size_t in = 3;
  for (std::size_t out : kChannels) {
    std::vector<double> w(out * in * 9);
    const double sd = gain / std::sqrt(9.0 * in);
    for (auto& v : w) v = sd * rng.normal();
    conv_.push_back(Tensor::from({out, in, 3, 3}, w, DType::F64));
    in = out;
  }
  const std::size_t r = static_cast<std::size_t>(cfg_.resolution) >> kStages;
  const auto flat = static_cast<Eigen::Index>(in * r * r + pooled_width());
  proj_.resize(cfg_.dim, flat);
  const double sd = 1.0 / std::sqrt(static_cast<double>(flat));
  for (Eigen::Index i = 0; i < proj_.rows(); ++i)
    for (Eigen::Index j = 0; j < proj_.cols(); ++j) proj_(i, j) = sd * rng.normal();
}

Eigen::MatrixXd FeatureExtractor::embed(std::span<const Image> images) const {
  const auto R = static_cast<std::size_t>(cfg_.resolution);
  for (const auto& im : images)
    if (im.channels != 3 || im.height != cfg_.resolution || im.width != cfg_.resolution)
      throw std::invalid_argument("features: expected 3x" + std::to_string(R) + "x" + std::to_string(R) +
                                  " images, got " + std::to_string(im.channels) + "x" + std::to_string(im.height) +
                                  "x" + std::to_string(im.width));
  Eigen::MatrixXd out(static_cast<Eigen::Index>(images.size()), cfg_.dim);
  const std::size_t chunks = (images.size() + kEmbedBatch - 1) / kEmbedBatch;
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t lo = c * kEmbedBatch, hi = std::min(images.size(), lo + kEmbedBatch);
    std::vector<double> x;
    x.reserve((hi - lo) * 3 * R * R);
    for (std::size_t i = lo; i < hi; ++i)
      for (float v : images[i].data) x.push_back(2.0 * v - 1.0);
    const std::size_t B = hi - lo;
    Tensor h = Tensor::from({B, 3, R, R}, x, DType::F64);
    // Row layout: final activations flattened, then every stage's channel
    // sums over space divided by sqrt(area). The pooled part carries colour
    // and texture statistics that do not move with the view.
    Eigen::MatrixXd rows(static_cast<Eigen::Index>(B), proj_.cols());
    Eigen::Index pooled_col = proj_.cols() - static_cast<Eigen::Index>(pooled_width());
    for (std::size_t s = 0; s < kStages; ++s) {
      h = ad::leaky_relu(ad::conv2d(h, conv_[s], {}, {2, 1}), 0.2);
      const auto v = h.data<double>();
      const std::size_t C = h.dim(1), HW = h.dim(2) * h.dim(3);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          double acc = 0;
          for (std::size_t i = 0; i < HW; ++i) acc += v[(b * C + c) * HW + i];
          rows(static_cast<Eigen::Index>(b), pooled_col + static_cast<Eigen::Index>(c)) =
              acc / std::sqrt(static_cast<double>(HW));
        }
      pooled_col += static_cast<Eigen::Index>(C);
    }
    const auto v = h.data<double>();
    const std::size_t flat = h.numel() / B;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < flat; ++i)
        rows(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(i)) = v[b * flat + i];
    out.middleRows(static_cast<Eigen::Index>(lo), static_cast<Eigen::Index>(B)) = rows * proj_.transpose();
  });
  return out;
}

GaussianStats gaussian_stats(const Eigen::MatrixXd& features) {
  if (features.rows() < 2) throw std::invalid_argument("gaussian_stats: need at least 2 samples");
  GaussianStats s;
  s.n = static_cast<std::size_t>(features.rows());
  s.mu = features.colwise().mean().transpose();
  const Eigen::MatrixXd centred = features.rowwise() - s.mu.transpose();
  s.sigma = centred.transpose() * centred / static_cast<double>(features.rows() - 1);
  return s;
}

double frechet(const GaussianStats& a, const GaussianStats& b) {
  if (a.mu.size() != b.mu.size() || a.sigma.rows() != b.sigma.rows() || a.sigma.rows() != a.mu.size())
    throw std::invalid_argument("frechet: dimension mismatch (" + std::to_string(a.mu.size()) + " vs " +
                                std::to_string(b.mu.size()) + ")");
  const Eigen::MatrixXd ra = psd_sqrt(a.sigma);
  const double cross = trace_sqrt(ra * b.sigma * ra);
  const double d = (a.mu - b.mu).squaredNorm() + a.sigma.trace() + b.sigma.trace() - 2.0 * cross;
  return std::max(d, 0.0);
}

ViewBucket view_bucket(const SphericalPose& pose) {
  const double y = std::abs(normalize_yaw(pose.yaw_deg));
  return y < 60.0 ? ViewBucket::Front : y < 120.0 ? ViewBucket::Side : ViewBucket::Back;
}

const char* bucket_name(ViewBucket b) {
  switch (b) {
    case ViewBucket::Front: return "front";
    case ViewBucket::Side: return "side";
    case ViewBucket::Back: return "back";
  }
  return "?";
}

ReferenceStats reference_stats(const FeatureExtractor& fx, const Dataset& data) {
  std::vector<Image> images;
  images.reserve(data.records.size());
  for (const auto& r : data.records) images.push_back(r.image);
  const Eigen::MatrixXd f = fx.embed(images);
  ReferenceStats ref;
  ref.overall = gaussian_stats(f);
  for (ViewBucket b : kViewBuckets) {
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < data.records.size(); ++i)
      if (view_bucket(data.records[i].nominal) == b) rows.push_back(static_cast<Eigen::Index>(i));
    if (rows.size() >= 2) ref.bucket[static_cast<int>(b)] = gaussian_stats(f(rows, Eigen::all));
  }
  return ref;
}

GeneratorSource::GeneratorSource(GeneratorConfig cfg, ParamSet params, int batch)
    : cfg_(std::move(cfg)), params_(std::move(params)), batch_(batch) {
  if (batch_ < 1) throw std::invalid_argument("GeneratorSource: batch must be positive");
}

std::vector<Image> GeneratorSource::render(std::span<const SphericalPose> conditioning,
                                           std::span<const SphericalPose> views, Rng& rng) {
  if (conditioning.size() != views.size()) throw std::invalid_argument("render: pose lists differ in length");
  std::vector<Image> out;
  out.reserve(views.size());
  const DType dt = params_.tensors().front().dtype();
  for (std::size_t lo = 0; lo < views.size(); lo += static_cast<std::size_t>(batch_)) {
    const std::size_t hi = std::min(views.size(), lo + static_cast<std::size_t>(batch_));
    const auto n = static_cast<int>(hi - lo);
    const Rendered r = generate(cfg_, params_, sample_z(rng, n, cfg_.d_z, dt),
                                gpc_labels(conditioning.subspan(lo, hi - lo), dt), views.subspan(lo, hi - lo));
    for (int b = 0; b < n; ++b) out.push_back(to_image(r.rgb, static_cast<std::size_t>(b)));
  }
  return out;
}

DatasetReplayer::DatasetReplayer(const Dataset& data) : data_(data) {
  if (data.records.empty()) throw std::invalid_argument("DatasetReplayer: empty dataset");
  by_yaw_.resize(data.records.size());
  for (std::size_t i = 0; i < by_yaw_.size(); ++i) by_yaw_[i] = i;
  std::stable_sort(by_yaw_.begin(), by_yaw_.end(), [&](std::size_t a, std::size_t b) {
    return data.records[a].nominal.yaw_deg < data.records[b].nominal.yaw_deg;
  });
}

std::vector<Image> DatasetReplayer::render(std::span<const SphericalPose>, std::span<const SphericalPose> views,
                                           Rng& rng) {
  std::vector<Image> out;
  out.reserve(views.size());
  const std::size_t n = by_yaw_.size();
  auto yaw = [&](std::size_t k) { return data_.records[by_yaw_[k % n]].nominal.yaw_deg; };
  auto dist = [](double a, double b) { return std::abs(normalize_yaw(a - b)); };
  for (const auto& v : views) {
    const auto it = std::lower_bound(by_yaw_.begin(), by_yaw_.end(), v.yaw_deg,
                                     [&](std::size_t i, double y) { return data_.records[i].nominal.yaw_deg < y; });
    const std::size_t hi = static_cast<std::size_t>(it - by_yaw_.begin()) % n;
    const std::size_t lo = (hi + n - 1) % n;
    const double dl = dist(yaw(lo), v.yaw_deg), dh = dist(yaw(hi), v.yaw_deg);
    const bool take_hi = dh < dl || (dh == dl && rng.bernoulli(0.5));
    out.push_back(data_.records[by_yaw_[take_hi ? hi : lo]].image);
  }
  return out;
}

nlohmann::json fd_score_to_json(const FdScore& s) {
  nlohmann::json per = nlohmann::json::object();
  for (ViewBucket b : kViewBuckets) {
    const auto& v = s.per_bucket[static_cast<int>(b)];
    per[bucket_name(b)] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  }
  return {{"overall", s.overall}, {"per_bucket", per}, {"n", s.n}, {"seed", s.seed}};
}

FdScore eval_protocol(ViewSource& source, const ReferenceStats& ref, const FeatureExtractor& fx, std::size_t n,
                      std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("eval_protocol: need n >= 2");
  Rng cond_rng(derive_seed(seed, {1})), view_rng(derive_seed(seed, {2})), latent_rng(derive_seed(seed, {3}));
  std::vector<SphericalPose> cond(n), views(n);
  for (auto& p : cond) p = sample_pose(cond_rng);
  for (auto& p : views) p = sample_pose(view_rng);
  const std::vector<Image> images = source.render(cond, views, latent_rng);
  const Eigen::MatrixXd f = fx.embed(images);

  FdScore s;
  s.n = n;
  s.seed = seed;
  s.overall = frechet(gaussian_stats(f), ref.overall);
  for (ViewBucket b : kViewBuckets) {
    const auto& rb = ref.bucket[static_cast<int>(b)];
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < n; ++i)
      if (view_bucket(views[i]) == b) rows.push_back(static_cast<Eigen::Index>(i));
    if (rb && rows.size() >= 2) s.per_bucket[static_cast<int>(b)] = frechet(gaussian_stats(f(rows, Eigen::all)), *rb);
  }
  return s;
}

}  // namespace av
