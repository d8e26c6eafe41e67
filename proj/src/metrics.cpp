#include "diffreg/metrics.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <sstream>

namespace diffreg {

MetricThresholds MetricThresholds::maintext() { return MetricThresholds{}; }

MetricThresholds MetricThresholds::appendix() {
  MetricThresholds t;
  t.inlier_distance = 0.10;
  t.fmr_inlier_ratio = 0.05;
  return t;
}

MetricThresholds MetricThresholds::preset(const std::string& name) {
  if (name == "maintext") return maintext();
  if (name == "appendix") return appendix();
  throw Error(ErrorCode::InvalidArgument, "unknown threshold preset '" + name + "'");
}

void MetricThresholds::validate() const {
  if (!(inlier_distance > 0 && fmr_inlier_ratio > 0 && patch_distance_3d > 0 && patch_distance_2d > 0 &&
        patch_overlap > 0 && rmse_recall > 0)) {
    throw Error(ErrorCode::InvalidArgument, "metric thresholds must be positive");
  }
  if (fmr_inlier_ratio >= 1.0 || patch_overlap >= 1.0) {
    throw Error(ErrorCode::InvalidArgument, "ratio thresholds must lie in (0,1)");
  }
}

double inlier_ratio(const CorrespondenceSet& corr, const Pose& gt_pose, const CameraIntrinsics& K, double tau1) {
  if (corr.empty()) throw Error(ErrorCode::EmptyCorrespondences, "inlier ratio of an empty set is undefined");
  std::size_t inliers = 0;
  for (const auto& c : corr.pairs) {
    if (!c.pixel_depth) throw Error(ErrorCode::MissingDepth, "inlier ratio needs pixel depths");
    const Vec3 ray_point = unproject(c.pixel, *c.pixel_depth, K);
    if ((gt_pose.apply(c.point) - ray_point).norm() < tau1) ++inliers;
  }
  return static_cast<double>(inliers) / static_cast<double>(corr.size());
}

double feature_matching_recall(const std::vector<double>& inlier_ratios, double tau2) {
  if (inlier_ratios.empty()) throw Error(ErrorCode::EmptyDataset, "no pairs to compute FMR over");
  const auto hits = std::count_if(inlier_ratios.begin(), inlier_ratios.end(), [&](double ir) { return ir > tau2; });
  return static_cast<double>(hits) / static_cast<double>(inlier_ratios.size());
}

PatchOverlap patch_overlap(const PatchPairMembers& pair, const Pose& gt_pose, const CameraIntrinsics& K, double tau3,
                           double tau4) {
  if (pair.pixel_depths.size() != pair.pixels.size()) {
    throw Error(ErrorCode::MissingDepth, "every patch pixel needs a depth");
  }
  std::vector<Vec3> camera_points;
  std::vector<Vec2> projected;
  camera_points.reserve(pair.points.size());
  for (const auto& x : pair.points) {
    camera_points.push_back(gt_pose.apply(x));
    if (camera_points.back().z() > kMinDepth) projected.push_back(project(camera_points.back(), K).pixel);
  }
  std::vector<Vec3> ray_points;
  ray_points.reserve(pair.pixels.size());
  for (std::size_t j = 0; j < pair.pixels.size(); ++j) ray_points.push_back(unproject(pair.pixels[j], pair.pixel_depths[j], K));

  PatchOverlap out;
  if (!camera_points.empty() && !ray_points.empty()) {
    std::size_t hits = 0;
    for (const auto& p : camera_points) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : ray_points) best = std::min(best, (p - q).norm());
      if (best < tau3) ++hits;
    }
    out.point_side = static_cast<double>(hits) / static_cast<double>(camera_points.size());
  }
  if (!pair.pixels.empty() && !projected.empty()) {
    std::size_t hits = 0;
    for (const auto& y : pair.pixels) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : projected) best = std::min(best, (q - y).norm());
      if (best < tau4) ++hits;
    }
    out.image_side = static_cast<double>(hits) / static_cast<double>(pair.pixels.size());
  }
  return out;
}

double patch_inlier_ratio(const std::vector<PatchPairMembers>& pairs, const Pose& gt_pose, const CameraIntrinsics& K,
                          double tau3, double tau4, double tau5) {
  if (pairs.empty()) throw Error(ErrorCode::EmptyPatchSet, "no patch correspondences");
  std::size_t hits = 0;
  for (const auto& pair : pairs) {
    const PatchOverlap o = patch_overlap(pair, gt_pose, K, tau3, tau4);
    if (std::min(o.image_side, o.point_side) > tau5) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

double registration_rmse(const std::vector<Vec3>& points, const Pose& gt_pose, const Pose& pred_pose) {
  if (points.empty()) throw Error(ErrorCode::EmptyInput, "RMSE needs at least one point");
  double sum = 0.0;
  for (const auto& x : points) sum += (gt_pose.apply(x) - pred_pose.apply(x)).squaredNorm();
  return std::sqrt(sum / static_cast<double>(points.size()));
}

double registration_recall(const std::vector<double>& rmses, double tau6) {
  if (rmses.empty()) throw Error(ErrorCode::EmptyDataset, "no pairs to compute RR over");
  const auto hits = std::count_if(rmses.begin(), rmses.end(), [&](double r) { return r < tau6; });
  return static_cast<double>(hits) / static_cast<double>(rmses.size());
}

PoseErrors relative_pose_errors(const Pose& gt_pose, const Pose& pred_pose) {
  const Mat3 delta = gt_pose.rotation().transpose() * pred_pose.rotation();
  // Same angle as arccos(clamp((tr - 1) / 2)), but atan2 keeps full precision
  // near 0 where arccos bottoms out around 1e-6 degrees.
  const double c = std::clamp(0.5 * (delta.trace() - 1.0), -1.0, 1.0);
  const Vec3 axis(delta(2, 1) - delta(1, 2), delta(0, 2) - delta(2, 0), delta(1, 0) - delta(0, 1));
  const double s = std::min(0.5 * axis.norm(), 1.0);
  return {std::atan2(s, c) * 180.0 / std::numbers::pi, (gt_pose.translation() - pred_pose.translation()).norm()};
}

EvalReport summarize(std::vector<PairReport> pairs, const MetricThresholds& thresholds) {
  if (pairs.empty()) throw Error(ErrorCode::EmptyDataset, "no pairs to summarize");
  EvalReport report;
  std::vector<double> irs;
  std::vector<double> rmses;
  double pir_sum = 0.0;
  int pir_count = 0;
  for (const auto& p : pairs) {
    irs.push_back(p.inlier_ratio);
    rmses.push_back(p.rmse);
    report.mean_rre_deg += p.rre_deg;
    report.mean_rte += p.rte;
    report.mean_inlier_ratio += p.inlier_ratio;
    if (p.patch_inlier_ratio >= 0.0) {
      pir_sum += p.patch_inlier_ratio;
      ++pir_count;
    }
  }
  const auto n = static_cast<double>(pairs.size());
  report.mean_rre_deg /= n;
  report.mean_rte /= n;
  report.mean_inlier_ratio /= n;
  report.feature_matching_recall = feature_matching_recall(irs, thresholds.fmr_inlier_ratio);
  report.registration_recall = registration_recall(rmses, thresholds.rmse_recall);
  report.patch_inlier_ratio = pir_count > 0 ? pir_sum / pir_count : -1.0;
  report.pairs = std::move(pairs);
  return report;
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["pairs"] = nlohmann::ordered_json::array();
  for (const auto& p : report.pairs) {
    nlohmann::ordered_json e;
    e["name"] = p.name;
    e["inlier_ratio"] = p.inlier_ratio;
    e["rmse"] = p.rmse;
    e["rre_deg"] = p.rre_deg;
    e["rte"] = p.rte;
    if (p.patch_inlier_ratio >= 0.0) e["patch_inlier_ratio"] = p.patch_inlier_ratio;
    j["pairs"].push_back(e);
  }
  j["feature_matching_recall"] = report.feature_matching_recall;
  if (report.patch_inlier_ratio >= 0.0) j["patch_inlier_ratio"] = report.patch_inlier_ratio;
  j["registration_recall"] = report.registration_recall;
  j["mean_inlier_ratio"] = report.mean_inlier_ratio;
  j["mean_rre_deg"] = report.mean_rre_deg;
  j["mean_rte"] = report.mean_rte;
  return j.dump(2) + "\n";
}

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string report_to_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "name,inlier_ratio,rmse,rre_deg,rte,patch_inlier_ratio\n";
  for (const auto& p : report.pairs) {
    os << p.name << ',' << num(p.inlier_ratio) << ',' << num(p.rmse) << ',' << num(p.rre_deg) << ',' << num(p.rte) << ','
       << (p.patch_inlier_ratio >= 0.0 ? num(p.patch_inlier_ratio) : "") << '\n';
  }
  os << "# FMR," << num(report.feature_matching_recall) << '\n';
  os << "# RR," << num(report.registration_recall) << '\n';
  if (report.patch_inlier_ratio >= 0.0) os << "# PIR," << num(report.patch_inlier_ratio) << '\n';
  os << "# mean_RRE_deg," << num(report.mean_rre_deg) << '\n';
  os << "# mean_RTE," << num(report.mean_rte) << '\n';
  return os.str();
}

}  // namespace diffreg
