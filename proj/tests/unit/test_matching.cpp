#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "diffreg/matching.hpp"
#include "test_support.hpp"

using namespace diffreg;

namespace {

Eigen::MatrixXd random_features(std::mt19937_64& rng, int rows, int cols) {
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = standard_normal(rng);
  }
  return m;
}

// Direct evaluation of the loss formula, written without log-sum-exp.
double direct_circle(const CircleAnchor& a, const CircleLossParams& p) {
  if (a.pos_distances.empty() || a.neg_distances.empty()) return 0.0;
  long double sp = 0.0L;
  long double sn = 0.0L;
  for (std::size_t i = 0; i < a.pos_distances.size(); ++i) {
    const double w = a.pos_weights.empty() ? 1.0 : a.pos_weights[i];
    const double beta = p.scale * w * std::max(0.0, a.pos_distances[i] - p.pos_margin);
    sp += std::exp(static_cast<long double>(beta * (a.pos_distances[i] - p.pos_margin)));
  }
  for (std::size_t i = 0; i < a.neg_distances.size(); ++i) {
    const double w = a.neg_weights.empty() ? 1.0 : a.neg_weights[i];
    const double beta = p.scale * w * std::max(0.0, p.neg_margin - a.neg_distances[i]);
    sn += std::exp(static_cast<long double>(beta * (p.neg_margin - a.neg_distances[i])));
  }
  return static_cast<double>(std::log1p(sp * sn) / p.scale);
}

CircleAnchor random_anchor(std::mt19937_64& rng) {
  CircleAnchor a;
  const int np = 1 + static_cast<int>(uniform_index(rng, 5));
  const int nn = 1 + static_cast<int>(uniform_index(rng, 8));
  for (int i = 0; i < np; ++i) a.pos_distances.push_back(uniform(rng, 0.15, 1.2));
  for (int i = 0; i < nn; ++i) a.neg_distances.push_back(uniform(rng, 0.2, 1.35));
  return a;
}

}  // namespace

TEST_CASE("coarse_match") {
  SUBCASE("exact match") {
    Eigen::MatrixXd patches(3, 2);
    patches << 1, 0, 0, 1, 0.6, 0.8;
    Eigen::MatrixXd sp(1, 2);
    sp << 0.6, 0.8;
    const auto m = coarse_match(patches, sp, 1);
    REQUIRE(m.size() == 1);
    CHECK(m[0].patch == 2);
    CHECK(m[0].score == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("orthogonal features tie to the lowest index") {
    Eigen::MatrixXd patches = Eigen::MatrixXd::Zero(4, 5);
    for (int i = 0; i < 4; ++i) patches(i, i + 1) = 1.0;
    Eigen::MatrixXd sp = Eigen::MatrixXd::Zero(2, 5);
    sp(0, 0) = 1.0;
    sp(1, 0) = 2.0;
    const auto m = coarse_match(patches, sp, 1);
    REQUIRE(m.size() == 2);
    for (const auto& pm : m) {
      CHECK(pm.score == 0.0);
      CHECK(pm.patch == 0);
    }
  }
  SUBCASE("random features equal brute force") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 10; ++trial) {
      const Eigen::MatrixXd patches = random_features(rng, 64, 32);
      const Eigen::MatrixXd sps = random_features(rng, 20, 32);
      const auto got = coarse_match(patches, sps, 3);
      REQUIRE(got.size() == 60);
      for (int s = 0; s < 20; ++s) {
        std::vector<std::pair<double, int>> all;
        for (int p = 0; p < 64; ++p) {
          double dot = 0.0, na = 0.0, nb = 0.0;
          for (int f = 0; f < 32; ++f) {
            dot += sps(s, f) * patches(p, f);
            na += sps(s, f) * sps(s, f);
            nb += patches(p, f) * patches(p, f);
          }
          all.emplace_back(dot / std::sqrt(na * nb), p);
        }
        std::sort(all.begin(), all.end(), [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
        for (int j = 0; j < 3; ++j) {
          CHECK(got[static_cast<std::size_t>(3 * s + j)].patch == all[static_cast<std::size_t>(j)].second);
          CHECK(std::abs(got[static_cast<std::size_t>(3 * s + j)].score - all[static_cast<std::size_t>(j)].first) < 1e-12);
        }
      }
    }
  }
  SUBCASE("empty input") {
    CHECK_THROWS_AS(coarse_match(Eigen::MatrixXd(0, 4), Eigen::MatrixXd::Ones(2, 4), 1), Error);
    try {
      coarse_match(Eigen::MatrixXd::Ones(2, 4), Eigen::MatrixXd(0, 4), 1);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::EmptyInput);
    }
  }
}

TEST_CASE("fine_match") {
  SUBCASE("single point and pixel") {
    FinePatch fp;
    fp.points = {Vec3(1, 2, 3)};
    fp.point_features = Eigen::MatrixXd::Ones(1, 4);
    fp.pixels = {Vec2(5, 6)};
    fp.pixel_features = -Eigen::MatrixXd::Ones(1, 4);
    for (int k : {1, 3, 10}) {
      const auto out = fine_match(fp, k, 7);
      REQUIRE(out.size() == 1);
      CHECK(out.pairs[0].point == Vec3(1, 2, 3));
      CHECK(out.pairs[0].pixel == Vec2(5, 6));
      CHECK(out.pairs[0].score == doctest::Approx(-1.0));
      CHECK(out.pairs[0].patch_index == 7);
    }
  }
  SUBCASE("duplicate point features order deterministically") {
    FinePatch fp;
    std::mt19937_64 rng(4);
    const Eigen::MatrixXd pix = random_features(rng, 6, 8);
    Eigen::MatrixXd pts(3, 8);
    for (int i = 0; i < 3; ++i) pts.row(i) = pix.row(2);
    fp.point_features = pts;
    fp.pixel_features = pix;
    for (int i = 0; i < 3; ++i) fp.points.emplace_back(i, 0, 1);
    for (int j = 0; j < 6; ++j) fp.pixels.emplace_back(j, 0);
    const auto out = fine_match_pairs(fp, 2);
    REQUIRE(out.size() == 6);
    // Score 1 pairs for each point first, in point order, then runners-up.
    for (int i = 0; i < 3; ++i) {
      CHECK(out[static_cast<std::size_t>(i)].point == i);
      CHECK(out[static_cast<std::size_t>(i)].pixel == 2);
    }
    for (std::size_t t = 1; t < out.size(); ++t) {
      const auto& a = out[t - 1];
      const auto& b = out[t];
      CHECK((a.score > b.score || (a.score == b.score && (a.point < b.point || (a.point == b.point && a.pixel < b.pixel)))));
    }
  }
  SUBCASE("random features equal brute-force top-5") {
    std::mt19937_64 rng(8);
    FinePatch fp;
    fp.point_features = random_features(rng, 50, 16);
    fp.pixel_features = random_features(rng, 200, 16);
    for (int i = 0; i < 50; ++i) fp.points.emplace_back(i, 0, 1);
    for (int j = 0; j < 200; ++j) fp.pixels.emplace_back(j, 0);
    const auto out = fine_match_pairs(fp, 5);
    REQUIRE(out.size() == 250);
    for (int i = 0; i < 50; ++i) {
      std::vector<std::pair<double, int>> all;
      for (int j = 0; j < 200; ++j) {
        const double s = fp.point_features.row(i).dot(fp.pixel_features.row(j)) /
                         (fp.point_features.row(i).norm() * fp.pixel_features.row(j).norm());
        all.emplace_back(s, j);
      }
      std::sort(all.begin(), all.end(), [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
      std::vector<int> want;
      for (int t = 0; t < 5; ++t) want.push_back(all[static_cast<std::size_t>(t)].second);
      std::vector<int> got;
      for (const auto& p : out) {
        if (p.point == i) got.push_back(p.pixel);
      }
      std::sort(want.begin(), want.end());
      std::sort(got.begin(), got.end());
      CHECK(got == want);
    }
  }
  SUBCASE("empty patch") {
    FinePatch fp;
    fp.points = {Vec3(0, 0, 1)};
    fp.point_features = Eigen::MatrixXd::Ones(1, 2);
    fp.pixel_features = Eigen::MatrixXd(0, 2);
    try {
      fine_match(fp, 1);
      FAIL("expected EmptyPatch");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::EmptyPatch);
    }
  }
}

TEST_CASE("coarse-to-fine matching on a synthetic scene") {
  SceneSpec spec;
  spec.num_points = 300;
  spec.seed = 3;
  const auto scene = generate_scene(spec);
  const auto res = match_coarse_to_fine(scene.cloud, scene.keypoints, scene.K.width, scene.K.height);
  REQUIRE(!res.correspondences.empty());
  // Pooled random descriptors make coarse matching lossy; the exact partner
  // of at least half the points should still survive.
  int correct = 0;
  for (std::size_t t = 0; t < res.point_ids.size(); ++t) {
    if (scene.keypoint_of[static_cast<std::size_t>(res.point_ids[t])] == res.pixel_ids[t]) ++correct;
  }
  CHECK(correct >= 150);
  CHECK(static_cast<double>(correct) / res.correspondences.size() > 0.15);
  const auto again = match_coarse_to_fine(scene.cloud, scene.keypoints, scene.K.width, scene.K.height);
  CHECK(again.point_ids == res.point_ids);
  CHECK(again.pixel_ids == res.pixel_ids);
}

TEST_CASE("mutual_best") {
  SUBCASE("hand-built ties and conflicts") {
    CoarseToFineResult m;
    const double scores[] = {0.9, 0.8, 0.9, 0.95, 0.5};
    for (double sc : scores) {
      Correspondence c;
      c.score = sc;
      m.correspondences.pairs.push_back(c);
    }
    m.point_ids = {0, 0, 1, 2, 3};
    m.pixel_ids = {10, 11, 11, 10, 12};
    const auto r = mutual_best(m);
    // Pair 0 loses pixel 10 to pair 3; pair 1 loses point 0 to pair 0.
    CHECK(r.point_ids == std::vector<int>{1, 2, 3});
    CHECK(r.pixel_ids == std::vector<int>{11, 10, 12});
    m.point_ids.pop_back();
    CHECK_THROWS_AS(mutual_best(m), Error);
  }
  SUBCASE("agrees with a quadratic scan") {
    SceneSpec spec;
    spec.num_points = 200;
    spec.seed = 8;
    spec.outlier_fraction = 0.3;
    const auto scene = generate_scene(spec);
    const auto res = match_coarse_to_fine(scene.cloud, scene.keypoints, scene.K.width, scene.K.height);
    const auto r = mutual_best(res);
    const auto& P = res.correspondences.pairs;
    std::vector<int> want;
    for (std::size_t i = 0; i < P.size(); ++i) {
      bool keep = true;
      for (std::size_t j = 0; j < P.size() && keep; ++j) {
        if (j == i) continue;
        const bool rival = res.point_ids[j] == res.point_ids[i] || res.pixel_ids[j] == res.pixel_ids[i];
        if (rival && (P[j].score > P[i].score || (P[j].score == P[i].score && j < i))) keep = false;
      }
      if (keep) want.push_back(static_cast<int>(i));
    }
    REQUIRE(r.correspondences.size() == want.size());
    for (std::size_t k = 0; k < want.size(); ++k) {
      CHECK(r.point_ids[k] == res.point_ids[static_cast<std::size_t>(want[k])]);
      CHECK(r.pixel_ids[k] == res.pixel_ids[static_cast<std::size_t>(want[k])]);
    }
  }
}

TEST_CASE("label_pairs") {
  const auto scene = testing::make_scene(40, 10);
  const auto& K = scene.K;
  const Pose& gt = scene.gt_pose;

  SUBCASE("exact pairs are positive") {
    for (auto l : label_pairs(scene.correspondences, gt, K)) CHECK(l == PairLabel::Positive);
  }
  SUBCASE("a 0.2 m displacement is negative") {
    auto corr = scene.correspondences;
    for (auto& c : corr.pairs) c.point += gt.rotation().transpose() * Vec3(0, 0, 0.2);
    for (auto l : label_pairs(corr, gt, K)) CHECK(l == PairLabel::Negative);
  }
  SUBCASE("between the bands is ignored") {
    // Pixel 10 px off along x; depth chosen to put the 3D distance in
    // (0.0375, 0.10). Both distances measured directly here.
    CorrespondenceSet corr;
    Correspondence c;
    c.point = gt.inverse().apply(Vec3(0.1, -0.2, 2.0));
    const Vec3 pc = gt.apply(c.point);
    c.pixel = project(pc, K).pixel + Vec2(10, 0);
    c.pixel_depth = 2.0;
    corr.pairs.push_back(c);
    const double d3 = (pc - unproject(c.pixel, 2.0, K)).norm();
    const double d2 = (project(pc, K).pixel - c.pixel).norm();
    REQUIRE(d3 > 0.0375);
    REQUIRE(d3 < 0.10);
    REQUIRE(d2 == doctest::Approx(10.0));
    CHECK(label_pairs(corr, gt, K)[0] == PairLabel::Ignored);
  }
  SUBCASE("invariant to ordering and to a consistent rigid pre-transform") {
    auto corr = testing::make_scene(60, 11, 6.0, 0.3).correspondences;
    const auto base = label_pairs(corr, gt, K);
    auto reversed = corr;
    std::reverse(reversed.pairs.begin(), reversed.pairs.end());
    auto rl = label_pairs(reversed, gt, K);
    std::reverse(rl.begin(), rl.end());
    CHECK(rl == base);

    Vec6 a;
    a << 0.3, -0.2, 0.5, 1.0, 2.0, -0.5;
    const Pose A = Pose::from_tangent(a);
    auto moved = corr;
    for (auto& c : moved.pairs) c.point = A.apply(c.point);
    CHECK(label_pairs(moved, gt * A.inverse(), K) == base);
  }
  SUBCASE("coarse labels") {
    CHECK(label_patch_pair(0.5, 0.3) == PairLabel::Positive);
    CHECK(label_patch_pair(0.1, 0.19) == PairLabel::Negative);
    CHECK(label_patch_pair(0.5, 0.1) == PairLabel::Ignored);
  }
}

TEST_CASE("circle_loss") {
  const CircleLossParams params;
  SUBCASE("empty sides give zero") {
    CircleAnchor a;
    a.pos_distances = {0.5, 0.7};
    CHECK(circle_loss(a, params).loss == 0.0);
    a.pos_distances.clear();
    a.neg_distances = {0.3};
    CHECK(circle_loss(a, params).loss == 0.0);
  }
  SUBCASE("at the margins the loss is log 2 / scale") {
    CircleAnchor a;
    a.pos_distances = {params.pos_margin};
    a.neg_distances = {params.neg_margin};
    CHECK(circle_loss(a, params).loss == doctest::Approx(std::log(2.0) / params.scale).epsilon(1e-15));
  }
  SUBCASE("matches direct evaluation and finite differences") {
    std::mt19937_64 rng(21);
    for (int inst = 0; inst < 20; ++inst) {
      const CircleAnchor a = random_anchor(rng);
      const auto res = circle_loss(a, params);
      CHECK(res.loss >= 0.0);
      CHECK(std::abs(res.loss - direct_circle(a, params)) <= 1e-12 * std::max(1.0, res.loss));
      std::vector<double> grad = res.grad_pos;
      grad.insert(grad.end(), res.grad_neg.begin(), res.grad_neg.end());
      Eigen::VectorXd x(static_cast<Eigen::Index>(grad.size()));
      for (std::size_t i = 0; i < a.pos_distances.size(); ++i) x[static_cast<Eigen::Index>(i)] = a.pos_distances[i];
      for (std::size_t i = 0; i < a.neg_distances.size(); ++i) {
        x[static_cast<Eigen::Index>(a.pos_distances.size() + i)] = a.neg_distances[i];
      }
      const auto f = [&](const Eigen::VectorXd& v) {
        CircleAnchor b = a;
        for (std::size_t i = 0; i < b.pos_distances.size(); ++i) b.pos_distances[i] = v[static_cast<Eigen::Index>(i)];
        for (std::size_t i = 0; i < b.neg_distances.size(); ++i) {
          b.neg_distances[i] = v[static_cast<Eigen::Index>(b.pos_distances.size() + i)];
        }
        return circle_loss(b, params).loss;
      };
      const Eigen::VectorXd fd = testing::fd_gradient(f, x, 1e-6);
      const Eigen::VectorXd an = Eigen::Map<const Eigen::VectorXd>(grad.data(), static_cast<Eigen::Index>(grad.size()));
      CHECK(testing::relative_error(an, fd) < 1e-6);
      // Monotone: non-decreasing in positives, non-increasing in negatives.
      for (std::size_t i = 0; i < a.pos_distances.size(); ++i) CHECK(fd[static_cast<Eigen::Index>(i)] >= -1e-12);
      for (std::size_t i = 0; i < a.neg_distances.size(); ++i) {
        CHECK(fd[static_cast<Eigen::Index>(a.pos_distances.size() + i)] <= 1e-12);
      }
    }
  }
  SUBCASE("large distances stay finite") {
    CircleAnchor a;
    a.pos_distances = {50.0, 80.0};
    a.neg_distances = {0.0};
    const auto res = circle_loss(a, params);
    CHECK(std::isfinite(res.loss));
    CHECK(std::isfinite(res.grad_pos[0]));
  }
  SUBCASE("parameter validation") {
    CircleLossParams bad;
    bad.neg_margin = 0.05;
    CHECK_THROWS_AS(circle_loss(CircleAnchor{}, bad), Error);
  }
}

TEST_CASE("scaled coarse circle loss") {
  std::mt19937_64 rng(5);
  std::vector<CircleAnchor> anchors;
  for (int i = 0; i < 8; ++i) anchors.push_back(random_anchor(rng));
  anchors.push_back(CircleAnchor{{0.4}, {}, {}, {}});  // no negatives: inactive

  SUBCASE("unit overlaps equal the plain loss") {
    std::vector<std::vector<double>> ones;
    for (const auto& a : anchors) ones.emplace_back(a.pos_distances.size(), 1.0);
    const auto scaled = scaled_circle_loss_coarse(anchors, ones);
    const auto plain = circle_loss_batch(anchors);
    CHECK(scaled.loss == plain.loss);
    CHECK(scaled.active_anchors == 8);
  }
  SUBCASE("zero overlaps turn positive terms into unit weights") {
    std::vector<std::vector<double>> zeros;
    for (const auto& a : anchors) zeros.emplace_back(a.pos_distances.size(), 0.0);
    const auto scaled = scaled_circle_loss_coarse(anchors, zeros);
    for (std::size_t i = 0; i < 8; ++i) {
      const auto& a = anchors[i];
      double sn = 0.0;
      for (double d : a.neg_distances) {
        const double c = std::max(0.0, 1.4 - d);
        sn += std::exp(24.0 * c * c);
      }
      const double want = std::log1p(static_cast<double>(a.pos_distances.size()) * sn) / 24.0;
      CHECK(scaled.per_anchor[i].loss == doctest::Approx(want).epsilon(1e-12));
      for (double g : scaled.per_anchor[i].grad_pos) CHECK(g == 0.0);
    }
  }
  SUBCASE("random overlaps equal direct evaluation") {
    std::vector<std::vector<double>> overlaps;
    for (const auto& a : anchors) {
      overlaps.emplace_back();
      for (std::size_t j = 0; j < a.pos_distances.size(); ++j) overlaps.back().push_back(uniform01(rng));
    }
    const auto scaled = scaled_circle_loss_coarse(anchors, overlaps);
    double sum = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
      CircleAnchor a = anchors[i];
      a.pos_weights = overlaps[i];
      sum += direct_circle(a, CircleLossParams{});
    }
    CHECK(std::abs(scaled.loss - sum / 8.0) <= 1e-12);
  }
  SUBCASE("overlaps outside [0,1] are rejected") {
    std::vector<std::vector<double>> bad;
    for (const auto& a : anchors) bad.emplace_back(a.pos_distances.size(), 1.5);
    CHECK_THROWS_AS(scaled_circle_loss_coarse(anchors, bad), Error);
  }
  CHECK(matching_loss(0.5, 0.25, 2.0) == 1.0);
}
