#include "doctest.h"

#include <filesystem>
#include <random>

#include "diffreg/dct.hpp"
#include "diffreg/pnp.hpp"
#include "diffreg/random.hpp"
#include "diffreg/synth.hpp"
#include "test_support.hpp"

using namespace diffreg;

namespace {

CameraIntrinsics unit_camera() { return {1.0, 1.0, 0.0, 0.0, 10, 10}; }

OffsetNetwork random_network(int input_dim, std::uint64_t seed, std::vector<int> hidden = {16, 16}) {
  std::mt19937_64 rng(seed);
  std::vector<DenseLayer> layers;
  int in = input_dim;
  hidden.push_back(3);
  for (int out : hidden) {
    DenseLayer L;
    L.weight = Eigen::MatrixXd(out, in);
    L.bias = Eigen::VectorXd(out);
    for (Eigen::Index i = 0; i < L.weight.size(); ++i) L.weight.data()[i] = uniform(rng, -0.5, 0.5);
    for (Eigen::Index i = 0; i < L.bias.size(); ++i) L.bias[i] = uniform(rng, -0.2, 0.2);
    layers.push_back(L);
    in = out;
  }
  return OffsetNetwork(layers);
}

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, -1.0, 1.0);
  return m;
}

std::vector<Vec3> random_offsets(std::size_t n, std::mt19937_64& rng, double scale) {
  std::vector<Vec3> out(n);
  for (auto& v : out) v = Vec3(uniform(rng, -scale, scale), uniform(rng, -scale, scale), uniform(rng, -scale, scale));
  return out;
}

Eigen::VectorXd flat(const std::vector<Vec3>& v) {
  Eigen::VectorXd out(3 * v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out.segment<3>(3 * i) = v[i];
  return out;
}

std::vector<Vec3> unflat(const Eigen::VectorXd& x) {
  std::vector<Vec3> out(x.size() / 3);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.segment<3>(3 * i);
  return out;
}

// Loss evaluated independently of offset_loss.
long double direct_offset_loss(const CorrespondenceSet& corr, const std::vector<Vec3>& dp, const Pose& pose,
                               const CameraIntrinsics& K, double mu) {
  long double sum = 0.0L;
  for (std::size_t i = 0; i < corr.size(); ++i) {
    const auto& c = corr.pairs[i];
    const Vec3 y = Vec3((c.pixel.x() - K.cx) / K.fx, (c.pixel.y() - K.cy) / K.fy, 1.0) * *c.pixel_depth;
    const Vec3 r = pose.rotation() * (c.point + dp[i]) + pose.translation() - y;
    sum += static_cast<long double>(r.squaredNorm()) + mu * static_cast<long double>(dp[i].norm());
  }
  return sum / corr.size();
}

}  // namespace

TEST_CASE("assemble_pair_feature") {
  Correspondence c;
  c.point_feature = Eigen::Vector2d(1, 2);
  c.pixel_feature = Eigen::Vector2d(3, 4);
  c.point = Vec3(0, 0, 1);
  c.pixel = Vec2(0, 0);
  c.pixel_depth = 1.0;
  Eigen::VectorXd want(10);
  want << 1, 2, 3, 4, 0, 0, 1, 0, 0, 1;
  CHECK(assemble_pair_feature(c, unit_camera()) == want);

  Correspondence z;
  z.point_feature = Eigen::VectorXd::Zero(5);
  z.pixel_feature = Eigen::VectorXd::Zero(5);
  z.pixel = Vec2(0, 0);
  z.pixel_depth = 2.5;
  const Eigen::VectorXd fz = assemble_pair_feature(z, unit_camera());
  CHECK(fz.size() == 16);
  CHECK(fz.head(15).isZero(0.0));
  CHECK(fz[15] == 2.5);

  Correspondence missing = c;
  missing.pixel_feature.resize(0);
  CHECK_THROWS_AS(assemble_pair_feature(missing, unit_camera()), Error);
  try {
    assemble_pair_feature(missing, unit_camera());
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingFeature);
  }
  Correspondence nodepth = c;
  nodepth.pixel_depth.reset();
  try {
    assemble_pair_feature(nodepth, unit_camera());
    FAIL("expected MissingDepth");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingDepth);
  }

  const auto scene = testing::make_scene(12, 3);
  const auto feats = assemble_pair_features(scene.correspondences, scene.K);
  CHECK(feats.rows() == 12);
  CHECK(feats.cols() == 2 * 8 + 6);
}

TEST_CASE("offset network forward") {
  SUBCASE("zero network predicts zero") {
    std::vector<DenseLayer> layers{{Eigen::MatrixXd::Zero(4, 10), Eigen::VectorXd::Zero(4)},
                                   {Eigen::MatrixXd::Zero(3, 4), Eigen::VectorXd::Zero(3)}};
    std::mt19937_64 rng(1);
    const auto out = predict_offsets(OffsetNetwork(layers), random_matrix(7, 10, rng));
    for (const auto& v : out) CHECK(v.isZero(0.0));
  }
  SUBCASE("single linear layer copying the first three inputs") {
    DenseLayer L{Eigen::MatrixXd::Zero(3, 8), Eigen::VectorXd::Zero(3)};
    L.weight.leftCols(3).setIdentity();
    std::mt19937_64 rng(2);
    const Eigen::MatrixXd x = random_matrix(5, 8, rng);
    const auto out = predict_offsets(OffsetNetwork({L}), x);
    for (int i = 0; i < 5; ++i) CHECK(out[i] == Vec3(x.row(i).head<3>().transpose()));
  }
  SUBCASE("initialized network starts at zero offsets") {
    const auto net = OffsetNetwork::initialize(22);
    CHECK(net.layers().size() == 3);
    CHECK(net.layers()[0].weight.rows() == 128);
    CHECK(net.layers()[1].weight.rows() == 128);
    std::mt19937_64 rng(3);
    CHECK(net.forward(random_matrix(4, 22, rng)).isZero(0.0));
  }
  SUBCASE("shape errors") {
    CHECK_THROWS_AS(OffsetNetwork({{Eigen::MatrixXd::Zero(4, 3), Eigen::VectorXd::Zero(4)}}), Error);
    CHECK_THROWS_AS(OffsetNetwork({{Eigen::MatrixXd::Zero(4, 3), Eigen::VectorXd::Zero(4)},
                                   {Eigen::MatrixXd::Zero(3, 5), Eigen::VectorXd::Zero(3)}}),
                    Error);
    const auto net = random_network(6, 1);
    try {
      net.forward(Eigen::MatrixXd::Zero(2, 5));
      FAIL("expected ShapeMismatch");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::ShapeMismatch);
    }
  }
}

TEST_CASE("offset network backward matches finite differences") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto net = random_network(9, seed);
    std::mt19937_64 rng(seed + 100);
    const Eigen::MatrixXd x = random_matrix(4, 9, rng);
    const Eigen::MatrixXd up = random_matrix(4, 3, rng);
    const auto g = net.backward(x, up);

    const Eigen::VectorXd x_flat = Eigen::Map<const Eigen::VectorXd>(x.data(), x.size());
    const Eigen::VectorXd fd_x = testing::fd_gradient(
        [&](const Eigen::VectorXd& v) {
          const Eigen::MatrixXd xv = Eigen::Map<const Eigen::MatrixXd>(v.data(), x.rows(), x.cols());
          return (net.forward(xv).array() * up.array()).sum();
        },
        x_flat, 1e-6);
    const Eigen::VectorXd gx = Eigen::Map<const Eigen::VectorXd>(g.inputs.data(), g.inputs.size());
    CHECK(testing::relative_error(gx, fd_x) < 1e-5);

    const Eigen::VectorXd fd_w = testing::fd_gradient(
        [&](const Eigen::VectorXd& p) { return (net.with_parameters(p).forward(x).array() * up.array()).sum(); },
        net.parameters(), 1e-6);
    CHECK(testing::relative_error(OffsetNetwork::flatten(g.layers), fd_w) < 1e-5);
  }
}

TEST_CASE("offset network weights round-trip through the manifest") {
  const auto dir = std::filesystem::temp_directory_path() / "diffreg_test_dct";
  std::filesystem::create_directories(dir);
  const auto net = random_network(7, 9);
  net.save(dir / "net.json");
  const auto back = OffsetNetwork::load(dir / "net.json");
  REQUIRE(back.layers().size() == net.layers().size());
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    const Eigen::MatrixXd w32 = net.layers()[l].weight.cast<float>().cast<double>();
    CHECK(back.layers()[l].weight == w32);
  }
  std::filesystem::resize_file(dir / "net.layer0.bias.f32", 4);
  try {
    OffsetNetwork::load(dir / "net.json");
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ShapeMismatch);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("apply_offsets") {
  const auto scene = testing::make_scene(10, 4);
  const auto& corr = scene.correspondences;
  const auto same = apply_offsets(corr, std::vector<Vec3>(10, Vec3::Zero()));
  for (std::size_t i = 0; i < 10; ++i) CHECK(same.pairs[i].point == corr.pairs[i].point);

  std::vector<Vec3> dp(10, Vec3::Zero());
  dp[3] = Vec3(0, 0, 0.1);
  const auto moved = apply_offsets(corr, dp);
  CHECK(moved.pairs[3].point.z() == corr.pairs[3].point.z() + 0.1);
  CHECK(moved.pairs[4].point == corr.pairs[4].point);

  std::mt19937_64 rng(5);
  const auto r = random_offsets(10, rng, 0.3);
  std::vector<Vec3> neg(10);
  for (int i = 0; i < 10; ++i) neg[i] = -r[i];
  const auto back = apply_offsets(apply_offsets(corr, r), neg);
  REQUIRE(back.size() == corr.size());
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK((back.pairs[i].point - corr.pairs[i].point).lpNorm<Eigen::Infinity>() <= 1e-15);
    CHECK(back.pairs[i].pixel == corr.pairs[i].pixel);
    CHECK(back.pairs[i].score == corr.pairs[i].score);
    CHECK(back.pairs[i].point_feature == corr.pairs[i].point_feature);
  }
  try {
    apply_offsets(corr, std::vector<Vec3>(9));
    FAIL("expected LengthMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::LengthMismatch);
  }
}

TEST_CASE("offset_loss") {
  SUBCASE("zero residual cases") {
    const auto scene = testing::make_scene(15, 6);
    const std::vector<Vec3> zero(15, Vec3::Zero());
    CHECK(offset_loss(scene.correspondences, zero, scene.gt_pose, scene.K, 0.0).loss < 1e-24);

    // Offsets that land every point exactly on its unprojected pixel.
    auto corr = scene.correspondences;
    std::mt19937_64 rng(6);
    const auto shift = random_offsets(15, rng, 0.2);
    for (std::size_t i = 0; i < corr.size(); ++i) corr.pairs[i].point += shift[i];
    std::vector<Vec3> fix(15);
    for (std::size_t i = 0; i < 15; ++i) fix[i] = -shift[i];
    CHECK(offset_loss(corr, fix, scene.gt_pose, scene.K, 0.0).loss < 1e-24);
  }
  SUBCASE("matches the direct formula and finite differences") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      const auto scene = testing::make_scene(12, seed, 2.0);
      std::mt19937_64 rng(seed);
      const auto dp = random_offsets(12, rng, 0.1);
      const double mu = seed % 2 ? 0.0 : 0.3;
      const auto res = offset_loss(scene.correspondences, dp, scene.gt_pose, scene.K, mu);
      CHECK(std::abs(res.loss - static_cast<double>(direct_offset_loss(scene.correspondences, dp, scene.gt_pose,
                                                                       scene.K, mu))) <= 1e-12 * res.loss);
      const Eigen::VectorXd fd = testing::fd_gradient(
          [&](const Eigen::VectorXd& v) {
            return offset_loss(scene.correspondences, unflat(v), scene.gt_pose, scene.K, mu).loss;
          },
          flat(dp), 1e-6);
      CHECK(testing::relative_error(flat(res.grad), fd) < 1e-6);
    }
  }
  SUBCASE("regularizer subgradient at zero is zero") {
    const auto scene = testing::make_scene(5, 7);
    const auto res = offset_loss(scene.correspondences, std::vector<Vec3>(5, Vec3::Zero()), scene.gt_pose, scene.K,
                                 2.0);
    for (const auto& g : res.grad) CHECK(g.norm() < 1e-12);
  }
  SUBCASE("exactly quadratic along a line when mu is 0") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      const auto scene = testing::make_scene(10, seed, 3.0);
      std::mt19937_64 rng(seed + 7);
      const Eigen::VectorXd base = flat(random_offsets(10, rng, 0.2));
      const Eigen::VectorXd dir = flat(random_offsets(10, rng, 1.0));
      auto f = [&](double s) {
        return offset_loss(scene.correspondences, unflat(base + s * dir), scene.gt_pose, scene.K, 0.0).loss;
      };
      // Fit through s = -1, 0, 1 and predict s = 0.5 and s = 2.
      const double fm = f(-1.0), f0 = f(0.0), fp = f(1.0);
      const double a = 0.5 * (fp + fm) - f0;
      const double b = 0.5 * (fp - fm);
      for (double s : {0.5, 2.0, -3.0}) {
        const double pred = a * s * s + b * s + f0;
        CHECK(std::abs(f(s) - pred) <= 1e-10 * std::max(1.0, std::abs(pred)));
      }
    }
  }
  SUBCASE("errors") {
    auto scene = testing::make_scene(4, 8);
    scene.correspondences.pairs[2].pixel_depth.reset();
    try {
      offset_loss(scene.correspondences, std::vector<Vec3>(4, Vec3::Zero()), scene.gt_pose, scene.K, 0.1);
      FAIL("expected MissingDepth");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::MissingDepth);
    }
  }
}

TEST_CASE("tune_offsets") {
  SUBCASE("aligned pairs stay at zero") {
    const auto scene = testing::make_scene(20, 9);
    const auto res = tune_offsets(scene.correspondences, scene.gt_pose, scene.K, 0.1, 50);
    CHECK(flat(res.offsets).norm() < 1e-6);
  }
  SUBCASE("constant 3D bias is cancelled") {
    const auto scene = testing::make_scene(25, 10);
    auto corr = scene.correspondences;
    const Vec3 bias(0.05, -0.08, 0.12);
    for (auto& c : corr.pairs) c.point += bias;
    const auto res = tune_offsets(corr, scene.gt_pose, scene.K, 0.0, 200);
    CHECK(res.distance_loss < 1e-10);
    for (const auto& dp : res.offsets) CHECK((dp + bias).norm() < 1e-5);
    for (std::size_t i = 1; i < res.losses.size(); ++i) CHECK(res.losses[i] <= res.losses[i - 1]);
  }
  SUBCASE("larger mu shrinks the offsets") {
    const auto scene = testing::make_scene(20, 11, 3.0);
    double prev = std::numeric_limits<double>::infinity();
    for (double mu : {0.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0}) {
      const auto res = tune_offsets(scene.correspondences, scene.gt_pose, scene.K, mu, 300);
      for (std::size_t i = 1; i < res.losses.size(); ++i) CHECK(res.losses[i] <= res.losses[i - 1]);
      const double norm = flat(res.offsets).norm();
      CHECK(norm <= prev + 1e-9);
      prev = norm;
    }
    CHECK(prev < 1e-3);
  }
  SUBCASE("steps must be positive") { CHECK_THROWS_AS(tune_offsets({}, Pose(), testing::default_camera(), 0, 0), Error); }
}

TEST_CASE("pose responds to input features through offsets and the solver") {
  const auto scene = testing::make_scene(20, 12);
  const auto net = random_network(2 * 8 + 6, 12, {8});
  const auto& corr0 = scene.correspondences;
  auto solve_with = [&](const CorrespondenceSet& corr) {
    const auto offsets = predict_offsets(net, assemble_pair_features(corr, scene.K));
    const auto moved = apply_offsets(corr, offsets);
    return testing::stationary_pose(moved, scene.K, scene.gt_pose);
  };
  const Pose pose = solve_with(corr0);
  const auto moved = apply_offsets(corr0, predict_offsets(net, assemble_pair_features(corr0, scene.K)));
  Vec6 gz;
  gz << 0.5, -0.2, 0.8, 0.1, 0.3, -0.6;
  // Chain: pose <- points (BPnP) <- offsets <- network input.
  const auto gp = bpnp_backward(pose, moved, scene.K, gz);
  const Eigen::MatrixXd gin = net.backward(assemble_pair_features(corr0, scene.K), gp.grad_points).inputs;
  const int pair = 5, entry = 2;
  const double h = 1e-5;
  auto p = corr0, m = corr0;
  p.pairs[pair].point_feature[entry] += h;
  m.pairs[pair].point_feature[entry] -= h;
  const double fd = gz.dot(solve_with(p).tangent() - solve_with(m).tangent()) / (2 * h);
  CHECK(std::abs(fd) > 1e-8);
  CHECK(std::abs(gin(pair, entry) - fd) <= 1e-3 * std::abs(fd));
}
