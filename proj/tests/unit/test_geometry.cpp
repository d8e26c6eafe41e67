#include "doctest.h"

#include <numbers>
#include <random>

#include "diffreg/geometry.hpp"
#include "diffreg/random.hpp"
#include "test_support.hpp"

using namespace diffreg;

namespace {

CameraIntrinsics unit_camera() { return {1.0, 1.0, 0.0, 0.0, 1, 1}; }
CameraIntrinsics hundred_camera() { return {100.0, 100.0, 50.0, 50.0, 200, 200}; }

Vec3 random_vec(std::mt19937_64& rng, double scale) {
  return Vec3(uniform(rng, -scale, scale), uniform(rng, -scale, scale), uniform(rng, -scale, scale));
}

}  // namespace

TEST_CASE("project follows the pinhole model") {
  const auto p0 = project(Vec3(0, 0, 1), unit_camera());
  CHECK(p0.pixel.isApprox(Vec2(0, 0)));
  CHECK(p0.depth == 1.0);

  const auto p1 = project(Vec3(1, 2, 2), hundred_camera());
  CHECK(p1.pixel.x() == doctest::Approx(100.0).epsilon(1e-15));
  CHECK(p1.pixel.y() == doctest::Approx(150.0).epsilon(1e-15));
  CHECK(p1.depth == 2.0);

  try {
    project(Vec3(0, 0, -1), unit_camera());
    FAIL("expected NonPositiveDepth");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonPositiveDepth);
  }
}

TEST_CASE("unproject inverts project") {
  CHECK(unproject(Vec2(0, 0), 1.0, unit_camera()).isApprox(Vec3(0, 0, 1)));
  CHECK((unproject(Vec2(100, 150), 2.0, hundred_camera()) - Vec3(1, 2, 2)).norm() < 1e-12);
  CHECK_THROWS_AS(unproject(Vec2(0, 0), 0.0, unit_camera()), Error);

  std::mt19937_64 rng(7);
  const auto K = testing::default_camera();
  for (int i = 0; i < 1000; ++i) {
    const Vec2 y(uniform(rng, 0, K.width), uniform(rng, 0, K.height));
    const double d = uniform(rng, 0.1, 20.0);
    const auto back = project(unproject(y, d, K), K);
    CHECK((back.pixel - y).norm() < 1e-9);
    CHECK(std::abs(back.depth - d) < 1e-9);
  }
}

TEST_CASE("project Jacobian matches central differences") {
  std::mt19937_64 rng(11);
  const auto K = testing::default_camera();
  for (int trial = 0; trial < 50; ++trial) {
    Vec3 p = random_vec(rng, 1.0);
    p.z() = uniform(rng, 0.5, 5.0);
    const Mat23 J = project_jacobian(p, K);
    for (int c = 0; c < 3; ++c) {
      const double h = 1e-6;
      Vec3 pp = p;
      Vec3 pm = p;
      pp[c] += h;
      pm[c] -= h;
      const Vec2 fd = (project(pp, K).pixel - project(pm, K).pixel) / (2 * h);
      CHECK(testing::relative_error(J.col(c), fd) < 1e-5);
    }
  }
}

TEST_CASE("tangent parameterization") {
  SUBCASE("zero tangent is the identity") {
    const Pose p = Pose::from_tangent(Vec6::Zero());
    CHECK(p.rotation().isApprox(Mat3::Identity()));
    CHECK(p.translation().isZero());
  }
  SUBCASE("quarter turn about x") {
    Vec6 v = Vec6::Zero();
    v[0] = std::numbers::pi / 2;
    Mat3 expected;
    expected << 1, 0, 0, 0, 0, -1, 0, 1, 0;
    CHECK((Pose::from_tangent(v).rotation() - expected).norm() < 1e-15);
  }
  SUBCASE("round trip through the matrix form") {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 1000; ++i) {
      Vec6 v;
      v << random_vec(rng, 1.5), random_vec(rng, 3.0);
      if (v.head<3>().norm() >= 3.0) continue;
      const Pose p = Pose::from_tangent(v);
      const Pose q = Pose::from_rotation_translation(p.rotation(), p.translation());
      CHECK((q.tangent() - v).norm() < 1e-9);
      CHECK((p.rotation().transpose() * p.rotation() - Mat3::Identity()).norm() < 1e-9);
      CHECK(std::abs(p.rotation().determinant() - 1.0) < 1e-9);
    }
  }
  SUBCASE("log near pi stays accurate") {
    Vec3 axis(0.3, -0.5, 0.8);
    axis.normalize();
    for (double angle : {std::numbers::pi - 1e-3, std::numbers::pi - 1e-7, std::numbers::pi}) {
      const Vec3 w = so3_log(so3_exp(angle * axis));
      CHECK(std::abs(w.norm() - angle) < 1e-9);
      CHECK((so3_exp(w) - so3_exp(angle * axis)).norm() < 1e-9);
    }
  }
  SUBCASE("angles at or beyond pi are canonicalized") {
    Vec6 v = Vec6::Zero();
    v[2] = 1.5 * std::numbers::pi;
    const auto tp = pose_from_tangent(v);
    CHECK(tp.canonicalized);
    CHECK(tp.pose.tangent().head<3>().norm() <= std::numbers::pi + 1e-12);
    CHECK((so3_exp(tp.pose.tangent().head<3>()) - tp.pose.rotation()).norm() < 1e-12);
    CHECK_FALSE(pose_from_tangent(Vec6::Constant(0.1)).canonicalized);
  }
}

TEST_CASE("pose point Jacobian matches central differences") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Vec6 v;
    v << random_vec(rng, 1.0), random_vec(rng, 1.0);
    const Pose pose = Pose::from_tangent(v);
    const Vec3 x = random_vec(rng, 2.0);
    const Mat36 J = pose.point_jacobian(x);
    for (int k = 0; k < 6; ++k) {
      const double h = 1e-6;
      Vec6 vp = v;
      Vec6 vm = v;
      vp[k] += h;
      vm[k] -= h;
      const Vec3 fd = (Pose::from_tangent(vp).apply(x) - Pose::from_tangent(vm).apply(x)) / (2 * h);
      CHECK(testing::relative_error(J.col(k), fd) < 1e-6);
    }
  }
}

TEST_CASE("transform is rigid and composes") {
  PointCloud cloud;
  cloud.points = {Vec3(1, 1, 1)};
  Vec6 v = Vec6::Zero();
  v[5] = 1.0;
  CHECK(transform(Pose::from_tangent(v), cloud).points[0].isApprox(Vec3(1, 1, 2)));
  CHECK(transform(Pose::identity(), cloud).points[0] == cloud.points[0]);

  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    Vec6 a;
    Vec6 b;
    a << random_vec(rng, 1.0), random_vec(rng, 2.0);
    b << random_vec(rng, 1.0), random_vec(rng, 2.0);
    const Pose A = Pose::from_tangent(a);
    const Pose B = Pose::from_tangent(b);
    PointCloud c;
    for (int i = 0; i < 30; ++i) c.points.push_back(random_vec(rng, 5.0));
    const auto composed = transform(A * B, c);
    const auto sequential = transform(A, transform(B, c));
    const auto moved = transform(A, c);
    for (std::size_t i = 0; i < c.size(); ++i) {
      CHECK((composed.points[i] - sequential.points[i]).norm() < 1e-9);
      for (std::size_t j = i + 1; j < c.size(); ++j) {
        const double d0 = (c.points[i] - c.points[j]).norm();
        const double d1 = (moved.points[i] - moved.points[j]).norm();
        CHECK(std::abs(d0 - d1) < 1e-9);
      }
    }
    CHECK(((A * A.inverse()).matrix() - Mat4::Identity()).norm() < 1e-12);
  }
}

TEST_CASE("intrinsics validation") {
  CHECK_NOTHROW(testing::default_camera().validate());
  CameraIntrinsics bad = testing::default_camera();
  bad.fx = 0.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = testing::default_camera();
  bad.cx = 640.0;
  CHECK_THROWS_AS(bad.validate(), Error);
}
