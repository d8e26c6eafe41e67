#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <vector>

#include "diffreg/error.hpp"

namespace diffreg {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Mat23 = Eigen::Matrix<double, 2, 3>;
using Mat36 = Eigen::Matrix<double, 3, 6>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

Mat3 skew(const Vec3& v);

/// Rodrigues exponential map so(3) -> SO(3).
Mat3 so3_exp(const Vec3& omega);

/// Logarithm SO(3) -> so(3); the returned angle lies in [0, pi].
Vec3 so3_log(const Mat3& rotation);

/// Left Jacobian of SO(3): exp(omega + d) ~= exp(J_l(omega) d) exp(omega).
Mat3 so3_left_jacobian(const Vec3& omega);

/// Rigid transform x -> R x + t mapping point-cloud coordinates into the
/// camera frame. The 6-vector tangent (axis-angle, translation) is kept in
/// sync with the matrix form and is the coordinate system used for every
/// derivative in the library.
class Pose {
 public:
  Pose() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()), tangent_(Vec6::Zero()) {}

  static Pose identity() { return Pose(); }
  static Pose from_tangent(const Vec6& tangent);
  /// Projects `rotation` onto SO(3) if it is slightly off.
  static Pose from_rotation_translation(const Mat3& rotation, const Vec3& translation);
  static Pose from_matrix(const Mat4& matrix);

  const Mat3& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }
  const Vec6& tangent() const { return tangent_; }
  Mat4 matrix() const;

  Vec3 apply(const Vec3& p) const { return rotation_ * p + translation_; }
  Pose inverse() const;
  /// (a * b).apply(p) == a.apply(b.apply(p))
  Pose operator*(const Pose& other) const;

  /// d(R p + t) / d(tangent), 3x6.
  Mat36 point_jacobian(const Vec3& p) const;

 private:
  friend struct TangentPose pose_from_tangent(const Vec6& tangent);

  Mat3 rotation_;
  Vec3 translation_;
  Vec6 tangent_;
};

struct TangentPose {
  Pose pose;
  /// The rotation angle was >= pi so the stored tangent is the canonical
  /// representative rather than the input vector.
  bool canonicalized = false;
};

TangentPose pose_from_tangent(const Vec6& tangent);
Vec6 pose_to_tangent(const Pose& pose);

struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  /// Throws InvalidArgument when the pinhole invariants do not hold.
  void validate() const;
  Mat3 matrix() const;
  bool contains(const Vec2& pixel) const {
    return pixel.x() >= 0.0 && pixel.y() >= 0.0 && pixel.x() < width && pixel.y() < height;
  }
};

inline constexpr double kMinDepth = 1e-9;

struct Projection {
  Vec2 pixel;
  double depth = 0.0;
};

Projection project(const Vec3& p, const CameraIntrinsics& K);
Vec3 unproject(const Vec2& pixel, double depth, const CameraIntrinsics& K);
/// d pixel / d p at p (camera frame), 2x3.
Mat23 project_jacobian(const Vec3& p, const CameraIntrinsics& K);

struct PointCloud {
  std::vector<Vec3> points;
  /// N x F, zero columns when the cloud carries no features.
  Eigen::MatrixXd features;

  std::size_t size() const { return points.size(); }
  int feature_dim() const { return static_cast<int>(features.cols()); }
  void validate() const;
};

PointCloud transform(const Pose& pose, const PointCloud& cloud);

struct Image {
  int width = 0;
  int height = 0;
  /// Row-major H x W x 3, values in [0,1].
  std::vector<double> pixels;
  /// (H*W) x F row-major by pixel, zero columns when absent.
  Eigen::MatrixXd features;

  void validate() const;
};

}  // namespace diffreg
