#pragma once

#include <string>
#include <vector>

#include "diffreg/correspondence.hpp"
#include "diffreg/geometry.hpp"

namespace diffreg {

struct MetricThresholds {
  double inlier_distance = 0.05;      // tau1 (m)
  double fmr_inlier_ratio = 0.10;     // tau2
  double patch_distance_3d = 0.0375;  // tau3 (m)
  double patch_distance_2d = 8.0;     // tau4 (px)
  double patch_overlap = 0.3;         // tau5
  double rmse_recall = 0.1;           // tau6 (m)

  /// 5 cm / 10 %: the values quoted with the main results.
  static MetricThresholds maintext();
  /// 10 cm / 5 %: the values given with the formal metric definitions.
  static MetricThresholds appendix();
  /// "maintext" | "appendix"; anything else throws InvalidArgument.
  static MetricThresholds preset(const std::string& name);
  void validate() const;
};

/// Fraction of pairs with |T(x) - K^-1(y)| < tau1. Requires pixel depths.
double inlier_ratio(const CorrespondenceSet& corr, const Pose& gt_pose, const CameraIntrinsics& K, double tau1);

/// Fraction of per-pair inlier ratios strictly above tau2.
double feature_matching_recall(const std::vector<double>& inlier_ratios, double tau2);

/// Up-sampled members of one coarse patch correspondence.
struct PatchPairMembers {
  std::vector<Vec3> points;          // point-cloud frame
  std::vector<Vec2> pixels;
  std::vector<double> pixel_depths;  // one per pixel
};

struct PatchOverlap {
  double image_side = 0.0;
  double point_side = 0.0;
};

PatchOverlap patch_overlap(const PatchPairMembers& pair, const Pose& gt_pose, const CameraIntrinsics& K, double tau3,
                           double tau4);

double patch_inlier_ratio(const std::vector<PatchPairMembers>& pairs, const Pose& gt_pose, const CameraIntrinsics& K,
                          double tau3, double tau4, double tau5);

double registration_rmse(const std::vector<Vec3>& points, const Pose& gt_pose, const Pose& pred_pose);
double registration_recall(const std::vector<double>& rmses, double tau6);

struct PoseErrors {
  double rre_deg = 0.0;
  double rte = 0.0;
};

PoseErrors relative_pose_errors(const Pose& gt_pose, const Pose& pred_pose);

struct PairReport {
  std::string name;
  double inlier_ratio = 0.0;
  double rmse = 0.0;
  double rre_deg = 0.0;
  double rte = 0.0;
  double patch_inlier_ratio = -1.0;  // negative when not evaluated
};

struct EvalReport {
  std::vector<PairReport> pairs;
  double feature_matching_recall = 0.0;
  double patch_inlier_ratio = -1.0;
  double registration_recall = 0.0;
  double mean_rre_deg = 0.0;
  double mean_rte = 0.0;
  double mean_inlier_ratio = 0.0;
};

/// Aggregates dataset-level values from the per-pair entries.
EvalReport summarize(std::vector<PairReport> pairs, const MetricThresholds& thresholds);

std::string report_to_json(const EvalReport& report);
std::string report_to_csv(const EvalReport& report);

}  // namespace diffreg
