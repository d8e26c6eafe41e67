#include "diffreg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "diffreg/random.hpp"

namespace diffreg {

namespace {

Vec3 random_unit(std::mt19937_64& rng) {
  Vec3 v;
  do {
    v = Vec3(standard_normal(rng), standard_normal(rng), standard_normal(rng));
  } while (v.norm() < 1e-12);
  return v.normalized();
}

Eigen::VectorXd random_feature(std::mt19937_64& rng, int dim) {
  Eigen::VectorXd f(dim);
  for (int k = 0; k < dim; ++k) f[k] = standard_normal(rng);
  return f.normalized();
}

Eigen::VectorXd noisy(const Eigen::VectorXd& base, double sigma, std::mt19937_64& rng) {
  Eigen::VectorXd f = base;
  for (Eigen::Index k = 0; k < f.size(); ++k) f[k] += sigma * standard_normal(rng);
  const double n = f.norm();
  return n > 0.0 ? Eigen::VectorXd(f / n) : f;
}

double surface_depth(const SceneSpec& spec, double u, double v) {
  const auto& K = spec.intrinsics;
  const double su = u / K.width;
  const double sv = v / K.height;
  const double shape = 0.5 + 0.25 * std::sin(2.0 * std::numbers::pi * (1.5 * su + 0.2)) +
                       0.25 * std::cos(2.0 * std::numbers::pi * (1.0 * sv + 0.1 * su));
  return spec.min_depth + spec.extent * shape;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t root, std::string_view stream) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : stream) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return splitmix64(root ^ splitmix64(h));
}

void SceneSpec::validate() const {
  intrinsics.validate();
  if (num_points < 1) throw Error(ErrorCode::InvalidArgument, "num_points must be >= 1");
  if (!(extent > 0.0)) throw Error(ErrorCode::InvalidArgument, "extent must be positive");
  if (!(min_depth > 0.0)) throw Error(ErrorCode::InvalidArgument, "min_depth must be positive");
  if (!(outlier_fraction >= 0.0 && outlier_fraction <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "outlier_fraction must lie in [0,1]");
  }
  if (pixel_noise < 0.0 || point_noise < 0.0 || feature_noise < 0.0) {
    throw Error(ErrorCode::InvalidArgument, "noise levels must be non-negative");
  }
  if (max_rotation_deg < 0.0 || max_rotation_deg > 180.0 || max_translation < 0.0) {
    throw Error(ErrorCode::InvalidArgument, "pose magnitude out of range");
  }
  if (feature_dim < 0) throw Error(ErrorCode::InvalidArgument, "feature_dim must be >= 0");
}

Scene generate_scene(const SceneSpec& spec) {
  spec.validate();
  const auto& K = spec.intrinsics;
  std::mt19937_64 pose_rng(derive_seed(spec.seed, "pose"));
  std::mt19937_64 point_rng(derive_seed(spec.seed, "points"));
  std::mt19937_64 feature_rng(derive_seed(spec.seed, "features"));
  std::mt19937_64 noise_rng(derive_seed(spec.seed, "noise"));
  std::mt19937_64 outlier_rng(derive_seed(spec.seed, "outliers"));

  Scene scene;
  scene.K = K;
  const double angle = uniform01(pose_rng) * spec.max_rotation_deg * std::numbers::pi / 180.0;
  const Vec3 axis = random_unit(pose_rng);
  const Vec3 dir = random_unit(pose_rng);
  const double dist = uniform01(pose_rng) * spec.max_translation;
  Vec6 tangent;
  tangent << angle * axis, dist * dir;
  scene.gt_pose = Pose::from_tangent(tangent);
  const Pose to_world = scene.gt_pose.inverse();

  const auto n = static_cast<std::size_t>(spec.num_points);
  const double margin = std::min({4.0 * spec.pixel_noise + 1.0, 0.25 * K.width, 0.25 * K.height});
  scene.cloud.points.resize(n);
  scene.cloud.features.resize(static_cast<Eigen::Index>(n), spec.feature_dim);
  scene.correspondences.pairs.resize(n);
  scene.is_outlier.assign(n, false);

  for (std::size_t i = 0; i < n; ++i) {
    const double u = uniform(point_rng, margin, K.width - margin);
    const double v = uniform(point_rng, margin, K.height - margin);
    const double z = spec.layout == SceneLayout::Surface ? surface_depth(spec, u, v)
                                                         : uniform(point_rng, spec.min_depth, spec.min_depth + spec.extent);
    const Vec3 x = to_world.apply(unproject(Vec2(u, v), z, K));
    const Projection proj = project(scene.gt_pose.apply(x), K);

    auto& c = scene.correspondences.pairs[i];
    c.point = x;
    c.pixel = proj.pixel;
    c.pixel_depth = proj.depth;
    c.score = 1.0;
    const Eigen::VectorXd base = random_feature(feature_rng, spec.feature_dim);
    c.point_feature = noisy(base, spec.feature_noise, feature_rng);
    c.pixel_feature = noisy(base, spec.feature_noise, feature_rng);
    scene.cloud.points[i] = x;
    if (spec.feature_dim > 0) scene.cloud.features.row(static_cast<Eigen::Index>(i)) = c.point_feature.transpose();
  }

  // Noise after the exact projections so the clean geometry is recoverable.
  for (auto& c : scene.correspondences.pairs) {
    if (spec.pixel_noise > 0.0) {
      c.pixel += spec.pixel_noise * Vec2(standard_normal(noise_rng), standard_normal(noise_rng));
      c.pixel.x() = std::clamp(c.pixel.x(), 0.0, std::nextafter(static_cast<double>(K.width), 0.0));
      c.pixel.y() = std::clamp(c.pixel.y(), 0.0, std::nextafter(static_cast<double>(K.height), 0.0));
    }
    if (spec.point_noise > 0.0) {
      c.point += spec.point_noise * Vec3(standard_normal(noise_rng), standard_normal(noise_rng), standard_normal(noise_rng));
    }
  }

  const auto num_outliers = static_cast<std::size_t>(std::floor(spec.outlier_fraction * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(outlier_rng, i)]);
  for (std::size_t k = 0; k < num_outliers; ++k) {
    auto& c = scene.correspondences.pairs[order[k]];
    c.pixel = Vec2(uniform(outlier_rng, 0.0, K.width), uniform(outlier_rng, 0.0, K.height));
    c.pixel.x() = std::min(c.pixel.x(), std::nextafter(static_cast<double>(K.width), 0.0));
    c.pixel.y() = std::min(c.pixel.y(), std::nextafter(static_cast<double>(K.height), 0.0));
    c.pixel_depth = uniform(outlier_rng, spec.min_depth, spec.min_depth + spec.extent);
    scene.is_outlier[order[k]] = true;
  }

  std::mt19937_64 keypoint_rng(derive_seed(spec.seed, "keypoints"));
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(keypoint_rng, i)]);
  scene.keypoints.pixels.resize(n);
  scene.keypoints.depths.resize(n);
  scene.keypoints.features.resize(static_cast<Eigen::Index>(n), spec.feature_dim);
  scene.keypoint_of.resize(n);
  for (std::size_t slot = 0; slot < n; ++slot) {
    const auto& c = scene.correspondences.pairs[perm[slot]];
    scene.keypoints.pixels[slot] = c.pixel;
    scene.keypoints.depths[slot] = *c.pixel_depth;
    if (spec.feature_dim > 0) scene.keypoints.features.row(static_cast<Eigen::Index>(slot)) = c.pixel_feature.transpose();
    scene.keypoint_of[perm[slot]] = static_cast<int>(slot);
  }

  // Procedural texture; only its shape matters to the numerical pipeline.
  scene.image.width = K.width;
  scene.image.height = K.height;
  scene.image.pixels.resize(static_cast<std::size_t>(K.width) * K.height * 3);
  for (int r = 0; r < K.height; ++r) {
    for (int col = 0; col < K.width; ++col) {
      const std::size_t base = (static_cast<std::size_t>(r) * K.width + col) * 3;
      scene.image.pixels[base + 0] = 0.5 + 0.5 * std::sin(0.05 * col);
      scene.image.pixels[base + 1] = 0.5 + 0.5 * std::cos(0.07 * r);
      scene.image.pixels[base + 2] = 0.5 + 0.5 * std::sin(0.03 * (r + col));
    }
  }
  return scene;
}

Pose perturb_pose(const Pose& pose, double angle_deg, double dist, std::uint64_t seed) {
  if (!(angle_deg >= 0.0 && angle_deg <= 180.0)) throw Error(ErrorCode::InvalidArgument, "angle must lie in [0,180]");
  std::mt19937_64 rng(derive_seed(seed, "perturb"));
  const Vec3 axis = random_unit(rng);
  const Vec3 dir = random_unit(rng);
  const Mat3 delta = so3_exp(angle_deg * std::numbers::pi / 180.0 * axis);
  return Pose::from_rotation_translation(pose.rotation() * delta, pose.translation() + dist * dir);
}

}  // namespace diffreg
