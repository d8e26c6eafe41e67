#include "doctest.h"

#include <numbers>

#include "diffreg/metrics.hpp"
#include "test_support.hpp"
#include "json.hpp"

using namespace diffreg;

namespace {

// Brute-force recomputations written directly from the metric definitions.
double brute_ir(const CorrespondenceSet& corr, const Pose& gt, const CameraIntrinsics& K, double tau) {
  int hits = 0;
  for (const auto& c : corr.pairs) {
    const double z = *c.pixel_depth;
    const Vec3 q((c.pixel.x() - K.cx) / K.fx * z, (c.pixel.y() - K.cy) / K.fy * z, z);
    const Vec3 p = gt.rotation() * c.point + gt.translation();
    if (std::sqrt((p - q).dot(p - q)) < tau) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(corr.size());
}

double brute_overlap_min(const PatchPairMembers& pair, const Pose& gt, const CameraIntrinsics& K, double t3,
                         double t4) {
  int p_hits = 0;
  for (const auto& x : pair.points) {
    bool hit = false;
    const Vec3 p = gt.rotation() * x + gt.translation();
    for (std::size_t j = 0; j < pair.pixels.size(); ++j) {
      const double z = pair.pixel_depths[j];
      const Vec3 q((pair.pixels[j].x() - K.cx) / K.fx * z, (pair.pixels[j].y() - K.cy) / K.fy * z, z);
      if ((p - q).norm() < t3) hit = true;
    }
    p_hits += hit;
  }
  int i_hits = 0;
  for (const auto& y : pair.pixels) {
    bool hit = false;
    for (const auto& x : pair.points) {
      const Vec3 p = gt.rotation() * x + gt.translation();
      const Vec2 u(K.fx * p.x() / p.z() + K.cx, K.fy * p.y() / p.z() + K.cy);
      if ((u - y).norm() < t4) hit = true;
    }
    i_hits += hit;
  }
  return std::min(static_cast<double>(p_hits) / pair.points.size(), static_cast<double>(i_hits) / pair.pixels.size());
}

PatchPairMembers random_patch_pair(const Scene& scene, std::mt19937_64& rng, double jitter) {
  PatchPairMembers pair;
  const std::size_t n = scene.correspondences.size();
  const std::size_t start = uniform_index(rng, n - 8);
  for (std::size_t k = start; k < start + 8; ++k) {
    const auto& c = scene.correspondences.pairs[k];
    pair.points.push_back(c.point + jitter * Vec3(standard_normal(rng), standard_normal(rng), standard_normal(rng)));
    if (uniform01(rng) < 0.8) {
      pair.pixels.push_back(c.pixel + jitter * 100 * Vec2(standard_normal(rng), standard_normal(rng)));
      pair.pixel_depths.push_back(*c.pixel_depth);
    }
  }
  if (pair.pixels.empty()) {
    pair.pixels.push_back(scene.correspondences.pairs[start].pixel);
    pair.pixel_depths.push_back(*scene.correspondences.pairs[start].pixel_depth);
  }
  return pair;
}

}  // namespace

TEST_CASE("inlier ratio") {
  const auto scene = testing::make_scene(10, 3);
  CHECK(inlier_ratio(scene.correspondences, scene.gt_pose, scene.K, 0.05) == 1.0);

  SUBCASE("displaced pairs") {
    auto corr = scene.correspondences;
    for (auto& c : corr.pairs) c.point += scene.gt_pose.rotation().transpose() * Vec3(0.2, 0, 0);
    CHECK(inlier_ratio(corr, scene.gt_pose, scene.K, 0.1) == 0.0);
  }
  SUBCASE("seven of ten") {
    auto corr = scene.correspondences;
    // Move three pairs 0.2 m along the camera x axis, expressed in the world frame.
    for (int i : {1, 4, 8}) corr.pairs[i].point += scene.gt_pose.rotation().transpose() * Vec3(0.2, 0, 0);
    for (int i : {0, 2}) corr.pairs[i].point += scene.gt_pose.rotation().transpose() * Vec3(0.0, 0.09, 0);
    CHECK(inlier_ratio(corr, scene.gt_pose, scene.K, 0.1) == 0.7);
    CHECK(brute_ir(corr, scene.gt_pose, scene.K, 0.1) == 0.7);
  }
  SUBCASE("empty and missing depth") {
    CHECK_THROWS_AS(inlier_ratio(CorrespondenceSet{}, scene.gt_pose, scene.K, 0.1), Error);
    auto corr = scene.correspondences;
    corr.pairs[0].pixel_depth.reset();
    CHECK_THROWS_AS(inlier_ratio(corr, scene.gt_pose, scene.K, 0.1), Error);
  }
  SUBCASE("monotone in the threshold and matches brute force") {
    const auto noisy = testing::make_scene(200, 8, 2.0, 0.3);
    double prev = 0.0;
    for (double tau = 0.005; tau < 0.5; tau *= 1.3) {
      const double ir = inlier_ratio(noisy.correspondences, noisy.gt_pose, noisy.K, tau);
      CHECK(ir >= prev);
      CHECK(ir == brute_ir(noisy.correspondences, noisy.gt_pose, noisy.K, tau));
      prev = ir;
    }
  }
}

TEST_CASE("feature matching recall is strict") {
  CHECK(feature_matching_recall({1.0, 1.0}, 0.05) == 1.0);
  CHECK(feature_matching_recall({0.0, 0.0, 0.0}, 0.05) == 0.0);
  CHECK(feature_matching_recall({0.04, 0.05, 0.06}, 0.05) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK_THROWS_AS(feature_matching_recall({}, 0.05), Error);
}

TEST_CASE("patch inlier ratio") {
  const auto scene = testing::make_scene(120, 6);
  const auto thr = MetricThresholds::maintext();
  SUBCASE("identical contents count") {
    PatchPairMembers pair;
    for (int i = 0; i < 5; ++i) {
      pair.points.push_back(scene.correspondences.pairs[i].point);
      pair.pixels.push_back(scene.correspondences.pairs[i].pixel);
      pair.pixel_depths.push_back(*scene.correspondences.pairs[i].pixel_depth);
    }
    const auto o = patch_overlap(pair, scene.gt_pose, scene.K, thr.patch_distance_3d, thr.patch_distance_2d);
    CHECK(o.image_side == 1.0);
    CHECK(o.point_side == 1.0);
    CHECK(patch_inlier_ratio({pair}, scene.gt_pose, scene.K, 0.0375, 8.0, 0.3) == 1.0);
  }
  SUBCASE("far-apart contents do not count") {
    PatchPairMembers pair;
    pair.points.push_back(scene.correspondences.pairs[0].point);
    pair.pixels.push_back(scene.correspondences.pairs[0].pixel + Vec2(200, 0));
    pair.pixel_depths.push_back(*scene.correspondences.pairs[0].pixel_depth + 1.0);
    const auto o = patch_overlap(pair, scene.gt_pose, scene.K, 0.0375, 8.0);
    CHECK(o.image_side == 0.0);
    CHECK(o.point_side == 0.0);
    CHECK(patch_inlier_ratio({pair}, scene.gt_pose, scene.K, 0.0375, 8.0, 0.3) == 0.0);
  }
  SUBCASE("random instances match brute force") {
    std::mt19937_64 rng(41);
    for (int inst = 0; inst < 10; ++inst) {
      std::vector<PatchPairMembers> pairs;
      int hits = 0;
      for (int k = 0; k < 12; ++k) {
        pairs.push_back(random_patch_pair(scene, rng, uniform(rng, 0.0, 0.08)));
        if (brute_overlap_min(pairs.back(), scene.gt_pose, scene.K, 0.0375, 8.0) > 0.3) ++hits;
      }
      CHECK(patch_inlier_ratio(pairs, scene.gt_pose, scene.K, 0.0375, 8.0, 0.3) == static_cast<double>(hits) / 12.0);
    }
    CHECK_THROWS_AS(patch_inlier_ratio({}, scene.gt_pose, scene.K, 0.0375, 8.0, 0.3), Error);
  }
}

TEST_CASE("registration rmse and recall") {
  const auto scene = testing::make_scene(100, 7);
  const auto& pts = scene.cloud.points;
  CHECK(registration_rmse(pts, scene.gt_pose, scene.gt_pose) == 0.0);

  const Pose shifted = Pose::from_rotation_translation(scene.gt_pose.rotation(), scene.gt_pose.translation() + Vec3(0.1, 0, 0));
  CHECK(registration_rmse(pts, scene.gt_pose, shifted) == doctest::Approx(0.1).epsilon(1e-14));

  std::mt19937_64 rng(13);
  std::vector<double> rmses;
  for (int inst = 0; inst < 10; ++inst) {
    const Pose pred = perturb_pose(scene.gt_pose, uniform(rng, 0, 5), uniform(rng, 0, 0.2), inst);
    double sum = 0.0;
    for (const auto& x : pts) {
      const Vec3 d = (scene.gt_pose.rotation() * x + scene.gt_pose.translation()) -
                     (pred.rotation() * x + pred.translation());
      sum += d.squaredNorm();
    }
    const double brute = std::sqrt(sum / pts.size());
    const double got = registration_rmse(pts, scene.gt_pose, pred);
    CHECK(std::abs(got - brute) <= 1e-12);
    rmses.push_back(got);
  }
  const auto hits = std::count_if(rmses.begin(), rmses.end(), [](double r) { return r < 0.1; });
  CHECK(registration_recall(rmses, 0.1) == static_cast<double>(hits) / 10.0);
  CHECK_THROWS_AS(registration_rmse({}, scene.gt_pose, scene.gt_pose), Error);
  CHECK_THROWS_AS(registration_recall({}, 0.1), Error);
}

TEST_CASE("relative pose errors") {
  const auto scene = testing::make_scene(10, 1);
  const auto zero = relative_pose_errors(scene.gt_pose, scene.gt_pose);
  CHECK(zero.rre_deg < 1e-6);
  CHECK(zero.rte == 0.0);

  Vec6 v = Vec6::Zero();
  v[2] = std::numbers::pi / 2;
  const auto quarter = relative_pose_errors(Pose::identity(), Pose::from_tangent(v));
  CHECK(quarter.rre_deg == doctest::Approx(90.0).epsilon(1e-12));
  CHECK(quarter.rte == 0.0);

  const Pose moved = Pose::from_rotation_translation(Mat3::Identity(), Vec3(0.03, 0.04, 0));
  CHECK(relative_pose_errors(Pose::identity(), moved).rte == doctest::Approx(0.05).epsilon(1e-15));

  const Pose other = perturb_pose(scene.gt_pose, 33.0, 0.2, 5);
  CHECK(relative_pose_errors(scene.gt_pose, other).rre_deg ==
        doctest::Approx(relative_pose_errors(other, scene.gt_pose).rre_deg).epsilon(1e-12));
}

TEST_CASE("threshold presets") {
  const auto m = MetricThresholds::maintext();
  CHECK(m.inlier_distance == 0.05);
  CHECK(m.fmr_inlier_ratio == 0.10);
  const auto a = MetricThresholds::appendix();
  CHECK(a.inlier_distance == 0.10);
  CHECK(a.fmr_inlier_ratio == 0.05);
  CHECK(a.patch_distance_3d == 0.0375);
  CHECK(a.patch_distance_2d == 8.0);
  CHECK(a.patch_overlap == 0.3);
  CHECK(a.rmse_recall == 0.1);
  CHECK_THROWS_AS(MetricThresholds::preset("paper"), Error);
  MetricThresholds bad;
  bad.fmr_inlier_ratio = 1.0;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("dataset summary equals recomputation from per-pair values") {
  std::vector<PairReport> pairs;
  std::mt19937_64 rng(3);
  for (int i = 0; i < 10; ++i) {
    PairReport p;
    p.name = "pair" + std::to_string(i);
    p.inlier_ratio = uniform01(rng);
    p.rmse = uniform(rng, 0, 0.3);
    p.rre_deg = uniform(rng, 0, 10);
    p.rte = uniform(rng, 0, 1);
    p.patch_inlier_ratio = uniform01(rng);
    pairs.push_back(p);
  }
  const auto thr = MetricThresholds::maintext();
  const auto report = summarize(pairs, thr);
  int fmr = 0;
  int rr = 0;
  double pir = 0.0;
  for (const auto& p : pairs) {
    fmr += p.inlier_ratio > thr.fmr_inlier_ratio;
    rr += p.rmse < thr.rmse_recall;
    pir += p.patch_inlier_ratio;
  }
  CHECK(report.feature_matching_recall == fmr / 10.0);
  CHECK(report.registration_recall == rr / 10.0);
  CHECK(std::abs(report.patch_inlier_ratio - pir / 10.0) <= 1e-12);

  const auto j = nlohmann::json::parse(report_to_json(report));
  CHECK(j["pairs"].size() == 10);
  CHECK(j["registration_recall"].get<double>() == report.registration_recall);
  const std::string csv = report_to_csv(report);
  CHECK(csv.rfind("name,inlier_ratio,rmse,rre_deg,rte,patch_inlier_ratio\n", 0) == 0);
  CHECK(csv.find("# FMR,") != std::string::npos);
}
