#include "diffreg/geometry.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace diffreg {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonPositiveDepth: return "NonPositiveDepth";
    case ErrorCode::TooFewCorrespondences: return "TooFewCorrespondences";
    case ErrorCode::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorCode::NumericalFailure: return "NumericalFailure";
    case ErrorCode::NoConsensus: return "NoConsensus";
    case ErrorCode::NotStationary: return "NotStationary";
    case ErrorCode::SingularHessian: return "SingularHessian";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::EmptyPatch: return "EmptyPatch";
    case ErrorCode::MissingFeature: return "MissingFeature";
    case ErrorCode::MissingDepth: return "MissingDepth";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::BadDims: return "BadDims";
    case ErrorCode::ProvenanceMissing: return "ProvenanceMissing";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::StaleProvenance: return "StaleProvenance";
    case ErrorCode::MissingTarget: return "MissingTarget";
    case ErrorCode::ProviderFailure: return "ProviderFailure";
    case ErrorCode::EmptyCorrespondences: return "EmptyCorrespondences";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::EmptyPatchSet: return "EmptyPatchSet";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ParseError: return "ParseError";
  }
  return "Unknown";
}

Mat3 skew(const Vec3& v) {
  Mat3 s;
  // clang-format off
  s <<     0.0, -v.z(),  v.y(),
         v.z(),    0.0, -v.x(),
        -v.y(),  v.x(),    0.0;
  // clang-format on
  return s;
}

Mat3 so3_exp(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const Mat3 W = skew(omega);
  double a;
  double b;
  if (theta2 < 1e-12) {
    // Taylor terms keep full precision for tiny angles.
    a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0;
    b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0;
  } else {
    const double theta = std::sqrt(theta2);
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta2;
  }
  return Mat3::Identity() + a * W + b * W * W;
}

Vec3 so3_log(const Mat3& R) {
  const Vec3 w(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
  const double s = 0.5 * w.norm();
  const double c = std::clamp(0.5 * (R.trace() - 1.0), -1.0, 1.0);
  const double theta = std::atan2(s, c);

  if (theta < 1e-6) {
    // theta / sin(theta) ~= 1 + theta^2 / 6
    return 0.5 * (1.0 + theta * theta / 6.0) * w;
  }
  if (c > -0.99) {
    return (theta / (2.0 * std::sin(theta))) * w;
  }
  // Near pi: recover the axis from the symmetric part, (1-c) a a^T.
  const Mat3 sym = 0.5 * (R + R.transpose()) - c * Mat3::Identity();
  int k = 0;
  sym.diagonal().maxCoeff(&k);
  Vec3 axis = sym.col(k) / std::sqrt(std::max(sym(k, k), 1e-300));
  axis.normalize();
  if (axis.dot(w) < 0.0) axis = -axis;
  return theta * axis;
}

Mat3 so3_left_jacobian(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const Mat3 W = skew(omega);
  double a;
  double b;
  if (theta2 < 1e-10) {
    a = 0.5 - theta2 / 24.0;
    b = 1.0 / 6.0 - theta2 / 120.0;
  } else {
    const double theta = std::sqrt(theta2);
    a = (1.0 - std::cos(theta)) / theta2;
    b = (theta - std::sin(theta)) / (theta2 * theta);
  }
  return Mat3::Identity() + a * W + b * W * W;
}

namespace {

Mat3 nearest_rotation(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  return svd.matrixU() * d * svd.matrixV().transpose();
}

}  // namespace

TangentPose pose_from_tangent(const Vec6& tangent) {
  TangentPose out;
  const Vec3 omega = tangent.head<3>();
  out.pose.rotation_ = so3_exp(omega);
  out.pose.translation_ = tangent.tail<3>();
  if (omega.norm() < std::numbers::pi) {
    out.pose.tangent_ = tangent;
  } else {
    out.pose.tangent_.head<3>() = so3_log(out.pose.rotation_);
    out.pose.tangent_.tail<3>() = out.pose.translation_;
    out.canonicalized = true;
  }
  return out;
}

Vec6 pose_to_tangent(const Pose& pose) { return pose.tangent(); }

Pose Pose::from_tangent(const Vec6& tangent) { return pose_from_tangent(tangent).pose; }

Pose Pose::from_rotation_translation(const Mat3& rotation, const Vec3& translation) {
  Pose p;
  const double ortho_err = (rotation.transpose() * rotation - Mat3::Identity()).norm();
  p.rotation_ = (ortho_err > 1e-12 || rotation.determinant() < 0.0) ? nearest_rotation(rotation) : rotation;
  p.translation_ = translation;
  p.tangent_.head<3>() = so3_log(p.rotation_);
  p.tangent_.tail<3>() = translation;
  return p;
}

Pose Pose::from_matrix(const Mat4& m) {
  return from_rotation_translation(m.topLeftCorner<3, 3>(), m.topRightCorner<3, 1>());
}

Mat4 Pose::matrix() const {
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = rotation_;
  m.topRightCorner<3, 1>() = translation_;
  return m;
}

Pose Pose::inverse() const {
  const Mat3 rt = rotation_.transpose();
  return from_rotation_translation(rt, -(rt * translation_));
}

Pose Pose::operator*(const Pose& other) const {
  return from_rotation_translation(rotation_ * other.rotation_, rotation_ * other.translation_ + translation_);
}

Mat36 Pose::point_jacobian(const Vec3& p) const {
  Mat36 J;
  J.leftCols<3>() = -skew(rotation_ * p) * so3_left_jacobian(tangent_.head<3>());
  J.rightCols<3>() = Mat3::Identity();
  return J;
}

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "focal lengths must be positive");
  }
  if (width < 1 || height < 1) {
    throw Error(ErrorCode::InvalidArgument, "image size must be positive");
  }
  if (!(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height)) {
    throw Error(ErrorCode::InvalidArgument, "principal point outside the image");
  }
}

Mat3 CameraIntrinsics::matrix() const {
  Mat3 k;
  k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
  return k;
}

Projection project(const Vec3& p, const CameraIntrinsics& K) {
  if (!(p.z() > kMinDepth)) {
    throw Error(ErrorCode::NonPositiveDepth, "point at z=" + std::to_string(p.z()));
  }
  return {Vec2(K.fx * p.x() / p.z() + K.cx, K.fy * p.y() / p.z() + K.cy), p.z()};
}

Vec3 unproject(const Vec2& pixel, double depth, const CameraIntrinsics& K) {
  if (!(depth > kMinDepth)) {
    throw Error(ErrorCode::NonPositiveDepth, "depth " + std::to_string(depth));
  }
  return {(pixel.x() - K.cx) * depth / K.fx, (pixel.y() - K.cy) * depth / K.fy, depth};
}

Mat23 project_jacobian(const Vec3& p, const CameraIntrinsics& K) {
  const double iz = 1.0 / p.z();
  Mat23 J;
  J << K.fx * iz, 0.0, -K.fx * p.x() * iz * iz, 0.0, K.fy * iz, -K.fy * p.y() * iz * iz;
  return J;
}

void PointCloud::validate() const {
  if (points.empty()) throw Error(ErrorCode::EmptyInput, "point cloud is empty");
  for (const auto& p : points) {
    if (!p.allFinite()) throw Error(ErrorCode::InvalidArgument, "non-finite point coordinate");
  }
  if (features.cols() > 0 && static_cast<std::size_t>(features.rows()) != points.size()) {
    throw Error(ErrorCode::ShapeMismatch, "feature rows do not match point count");
  }
}

PointCloud transform(const Pose& pose, const PointCloud& cloud) {
  PointCloud out;
  out.points.reserve(cloud.points.size());
  for (const auto& p : cloud.points) out.points.push_back(pose.apply(p));
  out.features = cloud.features;
  return out;
}

void Image::validate() const {
  if (width < 1 || height < 1) throw Error(ErrorCode::InvalidArgument, "image size must be positive");
  if (pixels.size() != static_cast<std::size_t>(width) * height * 3) {
    throw Error(ErrorCode::ShapeMismatch, "pixel buffer does not match H x W x 3");
  }
  for (double v : pixels) {
    if (!std::isfinite(v)) throw Error(ErrorCode::InvalidArgument, "non-finite pixel value");
  }
  if (features.cols() > 0 && features.rows() != static_cast<Eigen::Index>(width) * height) {
    throw Error(ErrorCode::ShapeMismatch, "feature rows do not match H x W");
  }
}

}  // namespace diffreg
