#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/SparseCore>

#include "diffreg/geometry.hpp"

namespace diffreg {

/// Dense H x W depth grid; 0 marks an empty pixel.
struct DepthMap {
  int width = 0;
  int height = 0;
  std::vector<double> values;        // row-major
  std::vector<std::uint8_t> mask;    // 1 where occupied

  static DepthMap empty(int width, int height);
  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
  double at(int x, int y) const { return values[index(x, y)]; }
  bool occupied(int x, int y) const { return mask[index(x, y)] != 0; }
  int occupied_count() const;
  /// Throws InvalidArgument on size mismatch, non-positive occupied values,
  /// or non-zero empty values.
  void validate() const;
};

enum class RasterMode { Hard, Splat };

struct RenderOptions {
  RasterMode mode = RasterMode::Splat;
  /// Splat mode: points within this relative depth of the nearest one at a
  /// pixel count as the same surface and are blended; farther ones are
  /// occluded.
  double blend_band = 0.05;
};

struct DensifyConfig {
  double threshold = 0.1;
  double max_depth = 15.0;
};

struct DepthChainConfig {
  RenderOptions render;
  DensifyConfig densify;
  bool densify_enabled = true;
  /// 0 selects height / 8 (width / 8), at least 1.
  int latent_height = 0;
  int latent_width = 0;
};

/// How one sparse pixel value depends on one point: derivative w.r.t. the
/// point's camera-frame depth and w.r.t. its projected pixel position.
struct PixelContribution {
  int point = 0;
  double d_depth = 0.0;
  Vec2 d_pixel = Vec2::Zero();
};

/// Everything depth_backward needs to replay a forward pass.
struct DepthProvenance {
  bool valid = false;
  /// Distinct per forward pass.
  std::uint64_t stamp = 0;
  RasterMode mode = RasterMode::Splat;
  Pose pose;
  CameraIntrinsics K;
  std::vector<Vec3> points;
  /// CSR over sparse pixels: contributions[offsets[p] .. offsets[p+1]).
  std::vector<std::size_t> offsets;
  std::vector<PixelContribution> contributions;
  bool densified = false;
  bool resized = false;
  Eigen::SparseMatrix<double, Eigen::RowMajor> densify_jacobian;  // HW x HW
  Eigen::SparseMatrix<double, Eigen::RowMajor> resize_jacobian;   // hw x HW
  /// Upstream gradient shape; the sparse map's own size until resized.
  int latent_height = 0;
  int latent_width = 0;
};

struct RenderResult {
  DepthMap depth;
  DepthProvenance provenance;
};

/// Projects R x + t into K's image. Hard mode rounds to the nearest pixel
/// centre (integer coordinates) and keeps the nearest depth. Splat mode
/// spreads each point over its four bilinear neighbours; per pixel the value
/// is sum(w) / sum(w / z) over the points inside the blend band of the
/// nearest one. Points behind the camera are skipped.
RenderResult render_sparse_depth(const std::vector<Vec3>& points, const Pose& pose, const CameraIntrinsics& K,
                                 const RenderOptions& options = {});

struct DensifyResult {
  DepthMap depth;
  /// d output / d input; a clamped output follows the extreme input pixel.
  Eigen::SparseMatrix<double, Eigen::RowMajor> jacobian;
};

/// Morphological completion on inverted depth v = max_depth - d (for
/// d > threshold): 7x7 diamond dilation, 3x3 erosion, 5x5 dilation, 5x5
/// median, 5x5 binomial blur where the median exceeds the threshold, then
/// re-inversion. Occupied output = median above threshold; values are
/// clamped to the input's occupied range. Out-of-image samples are ignored
/// by the morphology, replicated by the median and mirrored (reflect-101)
/// by the blur.
DensifyResult densify_with_jacobian(const DepthMap& sparse, const DensifyConfig& config = {});
DepthMap densify(const DepthMap& sparse, const DensifyConfig& config = {});

struct ResizeResult {
  DepthMap latent;
  Eigen::SparseMatrix<double, Eigen::RowMajor> jacobian;
};

/// Area-weighted mean over the occupied pixels of each latent cell; a cell
/// is occupied when any covered pixel is. Throws BadDims unless
/// 1 <= h <= H and 1 <= w <= W.
ResizeResult resize_to_latent_with_jacobian(const DepthMap& depth, int h, int w);
DepthMap resize_to_latent(const DepthMap& depth, int h, int w);

struct DepthChainResult {
  DepthMap sparse;
  DepthMap dense;
  DepthMap latent;
  DepthProvenance provenance;
};

/// render -> densify -> resize, keeping the provenance of each stage.
DepthChainResult render_depth_chain(const std::vector<Vec3>& points, const Pose& pose, const CameraIntrinsics& K,
                                    const DepthChainConfig& config = {});

struct DepthGradients {
  Vec6 pose = Vec6::Zero();
  Eigen::MatrixX3d points;  // N x 3
};

/// Vector-Jacobian product of the latent depth (h x w upstream) w.r.t. the
/// pose tangent and the points. Throws ProvenanceMissing for an empty
/// provenance and DimMismatch for a wrongly sized upstream.
DepthGradients depth_backward(const Eigen::MatrixXd& upstream, const DepthProvenance& provenance);

}  // namespace diffreg
