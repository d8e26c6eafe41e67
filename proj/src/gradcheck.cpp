#include "diffreg/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>

#include "diffreg/csd.hpp"
#include "diffreg/dct.hpp"
#include "diffreg/depth.hpp"
#include "diffreg/matching.hpp"
#include "diffreg/pnp.hpp"
#include "diffreg/random.hpp"
#include "diffreg/synth.hpp"

namespace diffreg {
namespace {

using Fn = std::function<double(const Eigen::VectorXd&)>;

Eigen::VectorXd central_differences(const Fn& f, const Eigen::VectorXd& x, double h) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Eigen::VectorXd xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    g[i] = (f(xp) - f(xm)) / (2.0 * h);
  }
  return g;
}

double rel_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& fd) {
  return (analytic - fd).norm() / std::max(fd.norm(), 1e-300);
}

Eigen::VectorXd flatten(const std::vector<Vec3>& v) {
  Eigen::VectorXd out(3 * static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out.segment<3>(3 * static_cast<Eigen::Index>(i)) = v[i];
  return out;
}

std::vector<Vec3> unflatten(const Eigen::VectorXd& x) {
  std::vector<Vec3> out(static_cast<std::size_t>(x.size() / 3));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.segment<3>(3 * static_cast<Eigen::Index>(i));
  return out;
}

Vec6 random_vec6(std::mt19937_64& rng) {
  Vec6 v;
  for (int i = 0; i < 6; ++i) v[i] = uniform(rng, -1.0, 1.0);
  return v;
}

Pose tight_refine(const CorrespondenceSet& corr, const CameraIntrinsics& K, const Pose& init) {
  RefineOptions opt;
  opt.tol = 1e-10;
  opt.max_iters = 200;
  return refine_pose(init, corr, K, opt).pose;
}

// Re-solve oracle: the refined pose as a function of one perturbed input.
void check_bpnp(GradcheckResult& out, const GradcheckOptions& opt) {
  const double sign = opt.flip_sign ? -1.0 : 1.0;
  std::mt19937_64 rng(derive_seed(opt.seed, "gradcheck-bpnp"));
  for (int inst = 0; inst < 20; ++inst) {
    SceneSpec spec;
    spec.num_points = 10 + static_cast<int>(uniform_index(rng, 41));
    spec.pixel_noise = 1.0;
    spec.feature_dim = 4;
    spec.seed = rng();
    const Scene scene = generate_scene(spec);
    const auto& corr = scene.correspondences;
    const Pose pose = tight_refine(corr, scene.K, scene.gt_pose);
    const Vec6 gz = random_vec6(rng);
    const auto g = bpnp_backward(pose, corr, scene.K, gz);

    const std::size_t n = corr.size();
    const double h = 1e-5;
    auto resolve = [&](const CorrespondenceSet& c) { return gz.dot(tight_refine(c, scene.K, pose).tangent()); };
    Eigen::VectorXd fd_x(3 * n), an_x(3 * n), fd_y(2 * n), an_y(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
      for (int c = 0; c < 3; ++c) {
        CorrespondenceSet p = corr, m = corr;
        p.pairs[i].point[c] += h;
        m.pairs[i].point[c] -= h;
        fd_x[3 * i + c] = (resolve(p) - resolve(m)) / (2 * h);
        an_x[3 * i + c] = sign * g.grad_points(i, c);
      }
      for (int c = 0; c < 2; ++c) {
        CorrespondenceSet p = corr, m = corr;
        p.pairs[i].pixel[c] += h;
        m.pairs[i].pixel[c] -= h;
        fd_y[2 * i + c] = (resolve(p) - resolve(m)) / (2 * h);
        an_y[2 * i + c] = sign * g.grad_pixels(i, c);
      }
    }
    out.max_relative_error = std::max({out.max_relative_error, rel_error(an_x, fd_x), rel_error(an_y, fd_y)});
    ++out.instances;
  }
}

void check_circle(GradcheckResult& out, const GradcheckOptions& opt) {
  const double sign = opt.flip_sign ? -1.0 : 1.0;
  const CircleLossParams params;
  std::mt19937_64 rng(derive_seed(opt.seed, "gradcheck-circle"));
  for (int inst = 0; inst < 20; ++inst) {
    CircleAnchor a;
    const int np = 1 + static_cast<int>(uniform_index(rng, 6));
    const int nn = 1 + static_cast<int>(uniform_index(rng, 10));
    // Distances stay clear of the margins where the clamp has a kink.
    for (int i = 0; i < np; ++i) {
      a.pos_distances.push_back(uniform(rng, 0.15, 1.2));
      a.pos_weights.push_back(uniform(rng, 0.2, 1.0));
    }
    for (int i = 0; i < nn; ++i) {
      a.neg_distances.push_back(uniform(rng, 0.2, 1.35));
      a.neg_weights.push_back(uniform(rng, 0.2, 1.0));
    }
    const auto res = circle_loss(a, params);
    Eigen::VectorXd x(np + nn), an(np + nn);
    for (int i = 0; i < np; ++i) {
      x[i] = a.pos_distances[i];
      an[i] = sign * res.grad_pos[i];
    }
    for (int i = 0; i < nn; ++i) {
      x[np + i] = a.neg_distances[i];
      an[np + i] = sign * res.grad_neg[i];
    }
    const Fn f = [&](const Eigen::VectorXd& v) {
      CircleAnchor b = a;
      for (int i = 0; i < np; ++i) b.pos_distances[i] = v[i];
      for (int i = 0; i < nn; ++i) b.neg_distances[i] = v[np + i];
      return circle_loss(b, params).loss;
    };
    out.max_relative_error = std::max(out.max_relative_error, rel_error(an, central_differences(f, x, 1e-6)));
    ++out.instances;
  }
}

// Offset loss w.r.t. the offsets, and the network's vector-Jacobian product
// w.r.t. its inputs and parameters.
void check_offset(GradcheckResult& out, const GradcheckOptions& opt) {
  const double sign = opt.flip_sign ? -1.0 : 1.0;
  std::mt19937_64 rng(derive_seed(opt.seed, "gradcheck-offset"));
  for (int inst = 0; inst < 20; ++inst) {
    SceneSpec spec;
    spec.num_points = 8;
    spec.feature_dim = 4;
    spec.pixel_noise = 0.5;
    spec.seed = rng();
    const Scene scene = generate_scene(spec);
    std::vector<Vec3> dp(scene.correspondences.size());
    // Away from dp = 0, where |dp| is not differentiable.
    for (auto& v : dp) v = Vec3(uniform(rng, -0.1, 0.1), uniform(rng, -0.1, 0.1), uniform(rng, 0.02, 0.1));
    const double mu = 0.1;
    const auto res = offset_loss(scene.correspondences, dp, scene.gt_pose, scene.K, mu);
    const Fn f = [&](const Eigen::VectorXd& v) {
      return offset_loss(scene.correspondences, unflatten(v), scene.gt_pose, scene.K, mu).loss;
    };
    const Eigen::VectorXd fd = central_differences(f, flatten(dp), 1e-6);
    out.max_relative_error = std::max(out.max_relative_error, rel_error(sign * flatten(res.grad), fd));
    ++out.instances;
  }
  for (int inst = 0; inst < 5; ++inst) {
    OffsetNetworkConfig cfg;
    cfg.hidden = {12, 12};
    cfg.seed = rng();
    // The stock initialization zeroes the output layer; randomize every
    // parameter so all paths carry gradient.
    const OffsetNetwork base = OffsetNetwork::initialize(9, cfg);
    Eigen::VectorXd params = base.parameters();
    for (Eigen::Index i = 0; i < params.size(); ++i) params[i] = uniform(rng, -0.5, 0.5);
    const OffsetNetwork net = base.with_parameters(params);
    Eigen::MatrixXd x(4, 9), up(4, 3);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = uniform(rng, -1.0, 1.0);
    for (Eigen::Index i = 0; i < up.size(); ++i) up.data()[i] = uniform(rng, -1.0, 1.0);
    const auto g = net.backward(x, up);

    const Eigen::VectorXd x_flat = Eigen::Map<const Eigen::VectorXd>(x.data(), x.size());
    const Fn fx = [&](const Eigen::VectorXd& v) {
      return (net.forward(Eigen::Map<const Eigen::MatrixXd>(v.data(), x.rows(), x.cols())).array() * up.array()).sum();
    };
    const Eigen::VectorXd gx = Eigen::Map<const Eigen::VectorXd>(g.inputs.data(), g.inputs.size());
    const Fn fw = [&](const Eigen::VectorXd& p) { return (net.with_parameters(p).forward(x).array() * up.array()).sum(); };
    out.max_relative_error =
        std::max({out.max_relative_error, rel_error(sign * gx, central_differences(fx, x_flat, 1e-6)),
                  rel_error(sign * OffsetNetwork::flatten(g.layers), central_differences(fw, params, 1e-6))});
    ++out.instances;
  }
}

// Small scenes on an 80x60 camera with a 15x20 latent grid. Instances whose
// projections sit within 0.01 px of a pixel boundary are redrawn: there the
// splat footprint changes and the forward map is not differentiable.
constexpr CameraIntrinsics kSmallCamera{80.0, 80.0, 40.0, 30.0, 80, 60};

DepthChainConfig small_chain() {
  DepthChainConfig cfg;
  cfg.latent_height = 15;
  cfg.latent_width = 20;
  return cfg;
}

bool near_pixel_boundary(const std::vector<Vec3>& pts, const Pose& pose) {
  for (const auto& x : pts) {
    const Vec2 uv = project(pose.apply(x), kSmallCamera).pixel;
    for (int a = 0; a < 2; ++a) {
      const double frac = uv[a] - std::floor(uv[a]);
      if (frac < 0.01 || frac > 0.99) return true;
    }
  }
  return false;
}

std::vector<Vec3> random_points(std::mt19937_64& rng, int n) {
  std::vector<Vec3> pts(static_cast<std::size_t>(n));
  for (auto& p : pts) p = unproject(Vec2(uniform(rng, 8, 72), uniform(rng, 8, 52)), uniform(rng, 1.5, 4.0), kSmallCamera);
  return pts;
}

Pose small_pose(std::mt19937_64& rng) {
  Vec6 t;
  t << uniform(rng, -0.05, 0.05), uniform(rng, -0.05, 0.05), uniform(rng, -0.05, 0.05), 0.0, 0.0, 0.05;
  return Pose::from_tangent(t);
}

Eigen::VectorXd latent_vector(const std::vector<Vec3>& pts, const Pose& pose, const DepthChainConfig& cfg) {
  const auto r = render_depth_chain(pts, pose, kSmallCamera, cfg);
  return Eigen::Map<const Eigen::VectorXd>(r.latent.values.data(), static_cast<Eigen::Index>(r.latent.values.size()));
}

Eigen::MatrixXd as_grid(const Eigen::VectorXd& v, int h, int w) {
  Eigen::MatrixXd g(h, w);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) g(i, j) = v[i * w + j];
  }
  return g;
}

void check_depth(GradcheckResult& out, const GradcheckOptions& opt) {
  const double sign = opt.flip_sign ? -1.0 : 1.0;
  const DepthChainConfig cfg = small_chain();
  std::mt19937_64 rng(derive_seed(opt.seed, "gradcheck-depth"));
  while (out.instances < 15) {
    const int n = out.instances < 10 ? 1 : 6;
    const auto pts = random_points(rng, n);
    const Pose pose = small_pose(rng);
    if (near_pixel_boundary(pts, pose)) continue;
    const auto fwd = render_depth_chain(pts, pose, kSmallCamera, cfg);
    Eigen::VectorXd up(15 * 20);
    for (Eigen::Index i = 0; i < up.size(); ++i) up[i] = fwd.latent.mask[i] ? uniform(rng, -1, 1) : 0.0;
    const auto g = depth_backward(as_grid(up, 15, 20), fwd.provenance);

    const Eigen::VectorXd x0 = flatten(pts);
    const Fn f_pts = [&](const Eigen::VectorXd& v) { return up.dot(latent_vector(unflatten(v), pose, cfg)); };
    const Eigen::VectorXd fd_pts = central_differences(f_pts, x0, 1e-6);
    Eigen::VectorXd an_pts(3 * n);
    for (int i = 0; i < n; ++i) an_pts.segment<3>(3 * i) = sign * g.points.row(i).transpose();
    const Fn f_pose = [&](const Eigen::VectorXd& v) { return up.dot(latent_vector(pts, Pose::from_tangent(v), cfg)); };
    const Eigen::VectorXd fd_pose = central_differences(f_pose, pose.tangent(), 1e-7);
    out.max_relative_error =
        std::max({out.max_relative_error, rel_error(an_pts, fd_pts), rel_error(sign * Eigen::VectorXd(g.pose), fd_pose)});
    ++out.instances;
  }
}

// With the depth_target mock the residual is m * (d - d*), so csd_gradient
// is the gradient of w/2 |m * (d - d*)|^2 with the mask held fixed.
void check_csd(GradcheckResult& out, const GradcheckOptions& opt) {
  const double sign = opt.flip_sign ? -1.0 : 1.0;
  const DepthChainConfig cfg = small_chain();
  std::mt19937_64 rng(derive_seed(opt.seed, "gradcheck-csd"));
  while (out.instances < 10) {
    const auto pts = random_points(rng, 8);
    const Pose goal_pose = small_pose(rng);
    const Pose pose = perturb_pose(goal_pose, 1.0, 0.02, rng());
    if (near_pixel_boundary(pts, pose)) continue;
    const DepthMap goal = render_depth_chain(pts, goal_pose, kSmallCamera, cfg).latent;
    auto provider = make_mock_provider(MockKind::DepthTarget, goal);
    const auto chain = render_depth_chain(pts, pose, kSmallCamera, cfg);
    ScoreRequest req;
    req.depth = chain.dense;
    req.t = uniform(rng, 0.02, 0.98);
    req.latent_height = 15;
    req.latent_width = 20;
    const auto res = provider->score(req);
    const double w = uniform(rng, 0.1, 1.0);
    const auto g = csd_gradient(res, chain.latent.mask, w, chain.provenance, pose);

    std::vector<std::uint8_t> m(goal.mask.size());
    int shared = 0;
    for (std::size_t i = 0; i < m.size(); ++i) shared += (m[i] = chain.latent.mask[i] && goal.mask[i]);
    if (shared == 0) continue;
    const Fn f = [&](const Eigen::VectorXd& v) {
      const Eigen::VectorXd d = latent_vector(pts, Pose::from_tangent(v), cfg);
      double sum = 0.0;
      for (std::size_t i = 0; i < m.size(); ++i) {
        if (m[i]) sum += 0.5 * w * (d[i] - goal.values[i]) * (d[i] - goal.values[i]);
      }
      return sum;
    };
    const Eigen::VectorXd fd = central_differences(f, pose.tangent(), 1e-7);
    out.max_relative_error = std::max(out.max_relative_error, rel_error(sign * Eigen::VectorXd(g.pose), fd));
    ++out.instances;
  }
}

struct SuiteDef {
  const char* name;
  double tolerance;
  void (*run)(GradcheckResult&, const GradcheckOptions&);
};

constexpr SuiteDef kSuites[] = {
    {"bpnp", 1e-3, check_bpnp},   {"circle", 1e-6, check_circle}, {"offset", 1e-6, check_offset},
    {"depth", 1e-3, check_depth}, {"csd", 1e-3, check_csd},
};

}  // namespace

const std::vector<std::string>& gradcheck_suites() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& s : kSuites) v.emplace_back(s.name);
    return v;
  }();
  return names;
}

GradcheckResult run_gradcheck_suite(std::string_view suite, const GradcheckOptions& options) {
  for (const auto& s : kSuites) {
    if (suite != s.name) continue;
    GradcheckResult r;
    r.suite = s.name;
    r.tolerance = s.tolerance;
    const auto t0 = std::chrono::steady_clock::now();
    s.run(r, options);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown gradcheck suite '" + std::string(suite) + "'");
}

std::string format_gradcheck_table(const std::vector<GradcheckResult>& results) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-8s %9s %14s %10s %s\n", "suite", "instances", "max_rel_error", "tolerance",
                "status");
  os << line;
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%-8s %9d %14.3e %10.0e %s\n", r.suite.c_str(), r.instances,
                  r.max_relative_error, r.tolerance, r.passed() ? "PASS" : "FAIL");
    os << line;
  }
  return os.str();
}

}  // namespace diffreg
