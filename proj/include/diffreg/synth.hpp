#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "diffreg/correspondence.hpp"
#include "diffreg/geometry.hpp"
#include "diffreg/matching.hpp"

namespace diffreg {

enum class SceneLayout {
  /// Depths uniform in [min_depth, min_depth + extent].
  UniformBox,
  /// Depths follow a smooth height field; used where rendered depth maps
  /// should look like a real surface.
  Surface,
};

struct SceneSpec {
  int num_points = 100;
  /// Depth span of the sampled volume (m).
  double extent = 2.0;
  double min_depth = 2.0;
  double max_rotation_deg = 60.0;
  double max_translation = 2.0;
  double pixel_noise = 0.0;
  double point_noise = 0.0;
  double outlier_fraction = 0.0;
  int feature_dim = 32;
  double feature_noise = 0.05;
  SceneLayout layout = SceneLayout::UniformBox;
  std::uint64_t seed = 0;
  CameraIntrinsics intrinsics{500.0, 500.0, 320.0, 240.0, 640, 480};

  void validate() const;
};

struct Scene {
  PointCloud cloud;
  Image image;
  Pose gt_pose;
  CameraIntrinsics K;
  /// Ground-truth pairs with noise and outliers applied; pixel_depth holds
  /// the depth of the pair's pixel (random for outliers).
  CorrespondenceSet correspondences;
  std::vector<bool> is_outlier;
  /// Image-side descriptors: every pair's pixel with its pixel feature and
  /// depth, in a seeded shuffled order. keypoint_of[i] locates pair i.
  Keypoints keypoints;
  std::vector<int> keypoint_of;
};

Scene generate_scene(const SceneSpec& spec);

/// Rotates by exactly angle_deg about a random axis (right-multiplied) and
/// shifts the translation by exactly `dist` in a random direction.
Pose perturb_pose(const Pose& pose, double angle_deg, double dist, std::uint64_t seed);

/// Named sub-stream of a root seed: streams with different names are
/// statistically independent and adding a name never shifts another.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream);

}  // namespace diffreg
