#pragma once

#include <cstdint>
#include <vector>

#include "diffreg/correspondence.hpp"
#include "diffreg/geometry.hpp"

namespace diffreg {

struct PnPResult {
  Pose pose;
  double reprojection_rmse = 0.0;
  int iterations = 0;
  bool converged = false;
};

struct PnPGradients {
  Eigen::MatrixX3d grad_points;  // N x 3
  Eigen::MatrixX2d grad_pixels;  // N x 2
};

struct RefineOptions {
  int max_iters = 100;
  /// Convergence threshold on the infinity norm of the cost gradient.
  double tol = 1e-8;
  double initial_damping = 1e-3;
  double max_damping = 1e12;
};

struct RansacOptions {
  double threshold_px = 8.0;
  int max_iters = 500;
  std::uint64_t seed = 0;
  RefineOptions refine;
};

struct BackwardOptions {
  /// Largest admissible |f|_inf at the pose handed to the backward pass.
  double stationarity_tol = 1e-6;
  double max_condition = 1e12;
};

/// Sum over pairs of |K(R x + t) - y|^2.
double reprojection_cost(const Pose& pose, const CorrespondenceSet& corr, const CameraIntrinsics& K);
/// Root mean square over all 2N residual coordinates (pixels).
double reprojection_rmse(const Pose& pose, const CorrespondenceSet& corr, const CameraIntrinsics& K);

/// Gradient of reprojection_cost w.r.t. the 6-vector pose tangent. This is the
/// constraint function whose root the implicit-function backward pass assumes.
Vec6 constraint_function(const Pose& pose, const CorrespondenceSet& corr, const CameraIntrinsics& K);

/// Non-iterative EPnP over four control points.
PnPResult epnp_solve(const CorrespondenceSet& corr, const CameraIntrinsics& K);

/// Levenberg-damped Gauss-Newton on the tangent coordinates. A step is kept
/// when it lowers the cost, or when it stays within 1e-13 relative of it and
/// lowers |f|_inf (the rounding floor where cost comparisons stop meaning
/// anything).
PnPResult refine_pose(const Pose& init, const CorrespondenceSet& corr, const CameraIntrinsics& K,
                      const RefineOptions& options = {});

/// EPnP followed by refine_pose.
PnPResult solve_pnp(const CorrespondenceSet& corr, const CameraIntrinsics& K, const RefineOptions& options = {});

struct RansacResult {
  PnPResult result;
  std::vector<bool> inlier_mask;
  int num_inliers = 0;
};

RansacResult ransac_pnp(const CorrespondenceSet& corr, const CameraIntrinsics& K, const RansacOptions& options);

/// Implicit-function-theorem gradients of the solved pose tangent w.r.t. the
/// 3D points and 2D pixels, contracted with the upstream gradient grad_pose.
PnPGradients bpnp_backward(const Pose& pose, const CorrespondenceSet& corr, const CameraIntrinsics& K,
                           const Vec6& grad_pose, const BackwardOptions& options = {});

/// d f / d tangent (6x6), by central differences of the analytic f.
Mat6 constraint_jacobian_pose(const Pose& pose, const CorrespondenceSet& corr, const CameraIntrinsics& K);

}  // namespace diffreg
