#include "diffreg/correspondence.hpp"

#include <cmath>
#include <string>

namespace diffreg {

int CorrespondenceSet::feature_dim() const {
  if (pairs.empty()) return 0;
  return static_cast<int>(pairs.front().point_feature.size());
}

void CorrespondenceSet::validate(const CameraIntrinsics& K) const {
  const int F = feature_dim();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& c = pairs[i];
    const std::string where = "pair " + std::to_string(i);
    if (!std::isfinite(c.score)) throw Error(ErrorCode::InvalidArgument, where + ": non-finite score");
    if (!c.point.allFinite()) throw Error(ErrorCode::InvalidArgument, where + ": non-finite point");
    if (!K.contains(c.pixel)) throw Error(ErrorCode::InvalidArgument, where + ": pixel outside the image");
    if (c.point_feature.size() != F || c.pixel_feature.size() != F) {
      throw Error(ErrorCode::ShapeMismatch, where + ": feature dimension differs from the set");
    }
  }
}

}  // namespace diffreg
