#pragma once

#include <optional>
#include <vector>

#include "diffreg/geometry.hpp"

namespace diffreg {

/// One 3D point paired with one image pixel.
struct Correspondence {
  Vec3 point = Vec3::Zero();
  Vec2 pixel = Vec2::Zero();
  Eigen::VectorXd point_feature;
  Eigen::VectorXd pixel_feature;
  double score = 0.0;
  /// Depth along the pixel ray, needed wherever the pixel is unprojected.
  std::optional<double> pixel_depth;
  /// Coarse patch pair this correspondence was harvested from (-1: none).
  int patch_index = -1;
};

struct CorrespondenceSet {
  std::vector<Correspondence> pairs;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
  /// Feature dimension shared by the set, 0 when features are absent.
  int feature_dim() const;
  /// Throws on non-finite scores, out-of-bounds pixels or ragged features.
  void validate(const CameraIntrinsics& K) const;
};

}  // namespace diffreg
