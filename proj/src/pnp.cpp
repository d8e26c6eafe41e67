#include "diffreg/pnp.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <random>

#include "diffreg/parallel.hpp"

namespace diffreg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Contribution of a single pair to the constraint function f.
Vec6 pair_constraint(const Pose& pose, const Vec3& x, const Vec2& y, const CameraIntrinsics& K) {
  const Vec3 pc = pose.apply(x);
  if (!(pc.z() > kMinDepth)) throw Error(ErrorCode::NumericalFailure, "point behind camera in constraint");
  const Vec2 r = project(pc, K).pixel - y;
  const Eigen::Matrix<double, 2, 6> J = project_jacobian(pc, K) * pose.point_jacobian(x);
  return 2.0 * J.transpose() * r;
}

constexpr double kCostTieBand = 1e-13;

double finite_step(double value) { return 1e-6 * std::max(1.0, std::abs(value)); }

}  // namespace

double reprojection_cost(const Pose& pose, const CorrespondenceSet& corr, const CameraIntrinsics& K) {
  double cost = 0.0;
  for (const auto& c : corr.pairs) {
    const Vec3 pc = pose.apply(c.point);
    if (!(pc.z() > kMinDepth)) return kInf;
    cost += (project(pc, K).pixel - c.pixel).squaredNorm();
  }
  return cost;
}

double reprojection_rmse(const Pose& pose, const CorrespondenceSet& corr, const CameraIntrinsics& K) {
  if (corr.empty()) return 0.0;
  return std::sqrt(reprojection_cost(pose, corr, K) / (2.0 * static_cast<double>(corr.size())));
}

Vec6 constraint_function(const Pose& pose, const CorrespondenceSet& corr, const CameraIntrinsics& K) {
  Vec6 f = Vec6::Zero();
  for (const auto& c : corr.pairs) f += pair_constraint(pose, c.point, c.pixel, K);
  return f;
}

// ---------------------------------------------------------------------------
// EPnP
// ---------------------------------------------------------------------------

namespace {

using Mat12 = Eigen::Matrix<double, 12, 12>;
using Vec12 = Eigen::Matrix<double, 12, 1>;
using Vec4 = Eigen::Vector4d;
using L6x10 = Eigen::Matrix<double, 6, 10>;
using Vec6d = Eigen::Matrix<double, 6, 1>;

constexpr std::array<std::pair<int, int>, 6> kControlPairs{{{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}}};

struct EpnpCandidate {
  Pose pose;
  double rmse = kInf;
};

L6x10 compute_l6x10(const std::array<Vec12, 4>& v) {
  L6x10 L;
  for (int r = 0; r < 6; ++r) {
    const auto [a, b] = kControlPairs[r];
    std::array<Vec3, 4> dv;
    for (int k = 0; k < 4; ++k) dv[k] = v[k].segment<3>(3 * a) - v[k].segment<3>(3 * b);
    L(r, 0) = dv[0].dot(dv[0]);
    L(r, 1) = 2.0 * dv[0].dot(dv[1]);
    L(r, 2) = dv[1].dot(dv[1]);
    L(r, 3) = 2.0 * dv[0].dot(dv[2]);
    L(r, 4) = 2.0 * dv[1].dot(dv[2]);
    L(r, 5) = dv[2].dot(dv[2]);
    L(r, 6) = 2.0 * dv[0].dot(dv[3]);
    L(r, 7) = 2.0 * dv[1].dot(dv[3]);
    L(r, 8) = 2.0 * dv[2].dot(dv[3]);
    L(r, 9) = dv[3].dot(dv[3]);
  }
  return L;
}

Vec4 betas_n4(const L6x10& L, const Vec6d& rho) {
  Eigen::Matrix<double, 6, 4> A;
  A << L.col(0), L.col(1), L.col(3), L.col(6);
  const Vec4 b = A.jacobiSvd(Eigen::ComputeFullU | Eigen::ComputeFullV).solve(rho);
  Vec4 betas;
  if (b[0] < 0.0) {
    betas[0] = std::sqrt(-b[0]);
    for (int k = 1; k < 4; ++k) betas[k] = -b[k] / betas[0];
  } else {
    betas[0] = std::sqrt(b[0]);
    for (int k = 1; k < 4; ++k) betas[k] = betas[0] > 0.0 ? b[k] / betas[0] : 0.0;
  }
  return betas;
}

Vec4 betas_n2(const L6x10& L, const Vec6d& rho) {
  Eigen::Matrix<double, 6, 3> A;
  A << L.col(0), L.col(1), L.col(2);
  const Eigen::Vector3d b = A.jacobiSvd(Eigen::ComputeFullU | Eigen::ComputeFullV).solve(rho);
  Vec4 betas = Vec4::Zero();
  if (b[0] < 0.0) {
    betas[0] = std::sqrt(-b[0]);
    betas[1] = b[2] < 0.0 ? std::sqrt(-b[2]) : 0.0;
  } else {
    betas[0] = std::sqrt(b[0]);
    betas[1] = b[2] > 0.0 ? std::sqrt(b[2]) : 0.0;
  }
  if (b[1] < 0.0) betas[0] = -betas[0];
  return betas;
}

Vec4 betas_n3(const L6x10& L, const Vec6d& rho) {
  Eigen::Matrix<double, 6, 5> A;
  A << L.col(0), L.col(1), L.col(2), L.col(3), L.col(4);
  const Eigen::Matrix<double, 5, 1> b = A.jacobiSvd(Eigen::ComputeFullU | Eigen::ComputeFullV).solve(rho);
  Vec4 betas = Vec4::Zero();
  if (b[0] < 0.0) {
    betas[0] = std::sqrt(-b[0]);
    betas[1] = b[2] < 0.0 ? std::sqrt(-b[2]) : 0.0;
  } else {
    betas[0] = std::sqrt(b[0]);
    betas[1] = b[2] > 0.0 ? std::sqrt(b[2]) : 0.0;
  }
  if (b[1] < 0.0) betas[0] = -betas[0];
  betas[2] = betas[0] != 0.0 ? b[3] / betas[0] : 0.0;
  return betas;
}

// Gauss-Newton on the six inter-control-point distance constraints.
void refine_betas(const L6x10& L, const Vec6d& rho, Vec4& betas) {
  for (int iter = 0; iter < 10; ++iter) {
    Eigen::Matrix<double, 6, 4> A;
    Vec6d r;
    const double b0 = betas[0], b1 = betas[1], b2 = betas[2], b3 = betas[3];
    for (int i = 0; i < 6; ++i) {
      const auto l = L.row(i);
      A(i, 0) = 2 * l[0] * b0 + l[1] * b1 + l[3] * b2 + l[6] * b3;
      A(i, 1) = l[1] * b0 + 2 * l[2] * b1 + l[4] * b2 + l[7] * b3;
      A(i, 2) = l[3] * b0 + l[4] * b1 + 2 * l[5] * b2 + l[8] * b3;
      A(i, 3) = l[6] * b0 + l[7] * b1 + l[8] * b2 + 2 * l[9] * b3;
      r[i] = rho[i] - (l[0] * b0 * b0 + l[1] * b0 * b1 + l[2] * b1 * b1 + l[3] * b0 * b2 + l[4] * b1 * b2 +
                       l[5] * b2 * b2 + l[6] * b0 * b3 + l[7] * b1 * b3 + l[8] * b2 * b3 + l[9] * b3 * b3);
    }
    const Vec4 step = A.colPivHouseholderQr().solve(r);
    if (!step.allFinite()) return;
    betas += step;
    if (step.norm() < 1e-15 * std::max(1.0, betas.norm())) return;
  }
}

EpnpCandidate recover_pose(const Vec4& betas, const std::array<Vec12, 4>& v,
                           const std::vector<Eigen::Vector4d>& alphas, const CorrespondenceSet& corr,
                           const CameraIntrinsics& K) {
  Vec12 ccs = Vec12::Zero();
  for (int k = 0; k < 4; ++k) ccs += betas[k] * v[k];
  const std::size_t n = corr.size();
  Eigen::Matrix3Xd pcs(3, n);
  Eigen::Matrix3Xd pws(3, n);
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 pc = Vec3::Zero();
    for (int j = 0; j < 4; ++j) pc += alphas[i][j] * ccs.segment<3>(3 * j);
    pcs.col(i) = pc;
    pws.col(i) = corr.pairs[i].point;
  }
  if (pcs.row(2).sum() < 0.0) pcs = -pcs;
  EpnpCandidate out;
  if (!pcs.allFinite()) return out;
  const Mat4 T = Eigen::umeyama(pws, pcs, false);
  if (!T.allFinite()) return out;
  out.pose = Pose::from_matrix(T);
  out.rmse = reprojection_rmse(out.pose, corr, K);
  if (!std::isfinite(out.rmse)) out.rmse = kInf;
  return out;
}

}  // namespace

PnPResult epnp_solve(const CorrespondenceSet& corr, const CameraIntrinsics& K) {
  const std::size_t n = corr.size();
  if (n < 4) throw Error(ErrorCode::TooFewCorrespondences, std::to_string(n) + " pairs, need at least 4");

  // Control points: centroid plus the principal axes of the 3D points.
  Vec3 c0 = Vec3::Zero();
  for (const auto& c : corr.pairs) c0 += c.point;
  c0 /= static_cast<double>(n);
  Mat3 cov = Mat3::Zero();
  for (const auto& c : corr.pairs) cov += (c.point - c0) * (c.point - c0).transpose();
  const Eigen::SelfAdjointEigenSolver<Mat3> pca(cov);
  const Vec3 ev = pca.eigenvalues();
  if (!(ev[2] > 0.0) || ev[0] <= 1e-12 * ev[2]) {
    throw Error(ErrorCode::DegenerateConfiguration, "3D points are (nearly) coplanar or collinear");
  }
  std::array<Vec3, 4> cws;
  cws[0] = c0;
  for (int k = 0; k < 3; ++k) cws[k + 1] = c0 + std::sqrt(ev[k] / static_cast<double>(n)) * pca.eigenvectors().col(k);

  Mat3 basis;
  for (int k = 0; k < 3; ++k) basis.col(k) = cws[k + 1] - c0;
  const Mat3 basis_inv = basis.inverse();
  std::vector<Eigen::Vector4d> alphas(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 a = basis_inv * (corr.pairs[i].point - c0);
    alphas[i] << 1.0 - a.sum(), a[0], a[1], a[2];
  }

  Eigen::MatrixXd M(2 * n, 12);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = corr.pairs[i].pixel.x();
    const double v = corr.pairs[i].pixel.y();
    for (int j = 0; j < 4; ++j) {
      const double a = alphas[i][j];
      M(2 * i, 3 * j) = a * K.fx;
      M(2 * i, 3 * j + 1) = 0.0;
      M(2 * i, 3 * j + 2) = a * (K.cx - u);
      M(2 * i + 1, 3 * j) = 0.0;
      M(2 * i + 1, 3 * j + 1) = a * K.fy;
      M(2 * i + 1, 3 * j + 2) = a * (K.cy - v);
    }
  }
  // SVD of M itself rather than eigenvectors of M^T M, which would square the
  // condition number and cap the noiseless accuracy near 1e-8.
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(M, Eigen::ComputeFullV);
  if (svd.info() != Eigen::Success) throw Error(ErrorCode::NumericalFailure, "EPnP SVD failed");
  std::array<Vec12, 4> v;
  for (int k = 0; k < 4; ++k) v[k] = svd.matrixV().col(11 - k);

  const L6x10 L = compute_l6x10(v);
  Vec6d rho;
  for (int r = 0; r < 6; ++r) {
    const auto [a, b] = kControlPairs[r];
    rho[r] = (cws[a] - cws[b]).squaredNorm();
  }

  EpnpCandidate best;
  for (auto* approx : {&betas_n4, &betas_n2, &betas_n3}) {
    Vec4 betas = approx(L, rho);
    refine_betas(L, rho, betas);
    EpnpCandidate cand = recover_pose(betas, v, alphas, corr, K);
    if (cand.rmse < best.rmse) best = cand;
  }
  if (!std::isfinite(best.rmse)) throw Error(ErrorCode::DegenerateConfiguration, "no EPnP candidate in front of the camera");

  PnPResult out;
  out.pose = best.pose;
  out.reprojection_rmse = best.rmse;
  out.iterations = 0;
  out.converged = false;
  return out;
}

// ---------------------------------------------------------------------------
// Gauss-Newton refinement
// ---------------------------------------------------------------------------

PnPResult refine_pose(const Pose& init, const CorrespondenceSet& corr, const CameraIntrinsics& K,
                      const RefineOptions& options) {
  if (!init.matrix().allFinite()) throw Error(ErrorCode::InvalidArgument, "initial pose is not finite");
  if (corr.empty()) throw Error(ErrorCode::TooFewCorrespondences, "no correspondences to refine on");
  const std::size_t n = corr.size();

  Pose pose = init;
  double cost = reprojection_cost(pose, corr, K);
  if (!std::isfinite(cost)) throw Error(ErrorCode::NumericalFailure, "initial pose puts points behind the camera");
  double damping = options.initial_damping;
  PnPResult out;

  Eigen::MatrixXd J(2 * n, 6);
  Eigen::VectorXd r(2 * n);
  for (int iter = 0; iter < options.max_iters; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 pc = pose.apply(corr.pairs[i].point);
      r.segment<2>(2 * i) = project(pc, K).pixel - corr.pairs[i].pixel;
      J.middleRows<2>(2 * i) = project_jacobian(pc, K) * pose.point_jacobian(corr.pairs[i].point);
    }
    const Vec6 g = J.transpose() * r;
    if ((2.0 * g).lpNorm<Eigen::Infinity>() <= options.tol) break;
    const Mat6 H = J.transpose() * J;
    const double diag_floor = 1e-12 * std::max(1.0, H.diagonal().maxCoeff());

    bool accepted = false;
    while (damping <= options.max_damping) {
      Mat6 A = H;
      for (int k = 0; k < 6; ++k) A(k, k) += damping * std::max(H(k, k), diag_floor);
      const Vec6 step = -A.ldlt().solve(g);
      if (!step.allFinite()) {
        damping *= 10.0;
        continue;
      }
      const Pose trial = Pose::from_tangent(pose.tangent() + step);
      const double trial_cost = reprojection_cost(trial, corr, K);
      // Near the optimum the true decrease drops below the rounding noise of
      // the summed cost; inside that band the gradient norm decides.
      const bool better = trial_cost < cost ||
                          (trial_cost <= cost * (1.0 + kCostTieBand) &&
                           constraint_function(trial, corr, K).lpNorm<Eigen::Infinity>() < 2.0 * g.lpNorm<Eigen::Infinity>());
      if (better) {
        pose = trial;
        cost = trial_cost;
        damping = std::max(damping / 10.0, 1e-12);
        accepted = true;
        break;
      }
      damping *= 10.0;
    }
    if (!accepted) {
      if (!H.allFinite()) throw Error(ErrorCode::NumericalFailure, "normal equations are not finite");
      break;
    }
    ++out.iterations;
  }

  out.pose = pose;
  out.reprojection_rmse = std::sqrt(cost / (2.0 * static_cast<double>(n)));
  out.converged = constraint_function(pose, corr, K).lpNorm<Eigen::Infinity>() <= options.tol;
  return out;
}

PnPResult solve_pnp(const CorrespondenceSet& corr, const CameraIntrinsics& K, const RefineOptions& options) {
  const PnPResult init = epnp_solve(corr, K);
  return refine_pose(init.pose, corr, K, options);
}

// ---------------------------------------------------------------------------
// RANSAC
// ---------------------------------------------------------------------------

namespace {

struct Hypothesis {
  int inliers = 0;
  double rmse = kInf;
  Pose pose;
};

// Squared reprojection errors; points behind the camera count as infinite.
std::vector<double> squared_errors(const Pose& pose, const CorrespondenceSet& corr, const CameraIntrinsics& K) {
  std::vector<double> e(corr.size(), kInf);
  for (std::size_t i = 0; i < corr.size(); ++i) {
    const Vec3 pc = pose.apply(corr.pairs[i].point);
    if (pc.z() > kMinDepth) e[i] = (project(pc, K).pixel - corr.pairs[i].pixel).squaredNorm();
  }
  return e;
}

CorrespondenceSet subset(const CorrespondenceSet& corr, const std::vector<bool>& mask) {
  CorrespondenceSet out;
  for (std::size_t i = 0; i < corr.size(); ++i) {
    if (mask[i]) out.pairs.push_back(corr.pairs[i]);
  }
  return out;
}

}  // namespace

RansacResult ransac_pnp(const CorrespondenceSet& corr, const CameraIntrinsics& K, const RansacOptions& options) {
  const std::size_t n = corr.size();
  if (n < 4) throw Error(ErrorCode::TooFewCorrespondences, std::to_string(n) + " pairs, need at least 4");
  const double thr2 = options.threshold_px * options.threshold_px;

  // Minimal samples are drawn up front so the outcome never depends on the
  // evaluation schedule.
  std::mt19937_64 rng(options.seed);
  std::vector<std::array<std::size_t, 4>> samples(static_cast<std::size_t>(std::max(0, options.max_iters)));
  for (auto& s : samples) {
    for (int k = 0; k < 4; ++k) {
      std::size_t idx;
      do {
        idx = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
      } while (std::find(s.begin(), s.begin() + k, idx) != s.begin() + k);
      s[k] = idx;
    }
  }

  std::vector<Hypothesis> hyps(samples.size());
  parallel_for(samples.size(), [&](std::size_t h) {
    CorrespondenceSet minimal;
    for (auto idx : samples[h]) minimal.pairs.push_back(corr.pairs[idx]);
    try {
      hyps[h].pose = epnp_solve(minimal, K).pose;
    } catch (const Error&) {
      return;
    }
    const auto e = squared_errors(hyps[h].pose, corr, K);
    double sum = 0.0;
    for (double v : e) {
      if (v < thr2) {
        ++hyps[h].inliers;
        sum += v;
      }
    }
    hyps[h].rmse = hyps[h].inliers > 0 ? std::sqrt(sum / hyps[h].inliers) : kInf;
  });

  std::size_t best = 0;
  for (std::size_t h = 1; h < hyps.size(); ++h) {
    if (hyps[h].inliers > hyps[best].inliers ||
        (hyps[h].inliers == hyps[best].inliers && hyps[h].rmse < hyps[best].rmse)) {
      best = h;
    }
  }
  if (hyps.empty() || hyps[best].inliers < 4) {
    throw Error(ErrorCode::NoConsensus, "best hypothesis has " + std::to_string(hyps.empty() ? 0 : hyps[best].inliers) +
                                            " inliers");
  }

  auto mask_for = [&](const Pose& pose) {
    const auto e = squared_errors(pose, corr, K);
    std::vector<bool> mask(n);
    for (std::size_t i = 0; i < n; ++i) mask[i] = e[i] < thr2;
    return mask;
  };

  RansacResult out;
  Pose pose = hyps[best].pose;
  std::vector<bool> mask = mask_for(pose);
  PnPResult refined;
  for (int round = 0; round < 5; ++round) {
    const CorrespondenceSet inliers = subset(corr, mask);
    if (inliers.size() < 4) throw Error(ErrorCode::NoConsensus, "inlier set collapsed below 4 pairs");
    refined = refine_pose(pose, inliers, K, options.refine);
    pose = refined.pose;
    std::vector<bool> next = mask_for(pose);
    if (next == mask) break;
    mask = std::move(next);
  }
  out.inlier_mask = mask;
  out.num_inliers = static_cast<int>(std::count(mask.begin(), mask.end(), true));
  if (out.num_inliers < 4) throw Error(ErrorCode::NoConsensus, "refined pose keeps fewer than 4 inliers");
  out.result = refined;
  out.result.reprojection_rmse = reprojection_rmse(pose, subset(corr, mask), K);
  return out;
}

// ---------------------------------------------------------------------------
// Implicit-function backward
// ---------------------------------------------------------------------------

Mat6 constraint_jacobian_pose(const Pose& pose, const CorrespondenceSet& corr, const CameraIntrinsics& K) {
  Mat6 H;
  const Vec6 theta = pose.tangent();
  for (int k = 0; k < 6; ++k) {
    const double h = finite_step(theta[k]);
    Vec6 plus = theta;
    Vec6 minus = theta;
    plus[k] += h;
    minus[k] -= h;
    H.col(k) = (constraint_function(Pose::from_tangent(plus), corr, K) -
                constraint_function(Pose::from_tangent(minus), corr, K)) /
               (2.0 * h);
  }
  return H;
}

PnPGradients bpnp_backward(const Pose& pose, const CorrespondenceSet& corr, const CameraIntrinsics& K,
                           const Vec6& grad_pose, const BackwardOptions& options) {
  const std::size_t n = corr.size();
  const Vec6 f = constraint_function(pose, corr, K);
  const double residual = f.lpNorm<Eigen::Infinity>();
  if (residual > options.stationarity_tol) {
    throw Error(ErrorCode::NotStationary, "|f|_inf = " + std::to_string(residual));
  }
  const Mat6 H = constraint_jacobian_pose(pose, corr, K);
  const Eigen::JacobiSVD<Mat6> svd(H);
  const auto& sv = svd.singularValues();
  if (!(sv[5] > 0.0) || sv[0] / sv[5] > options.max_condition) {
    throw Error(ErrorCode::SingularHessian, "condition number " + std::to_string(sv[0] / sv[5]));
  }
  // grad_in = -(df/din)^T H^{-T} grad_pose
  const Vec6 u = H.transpose().fullPivLu().solve(grad_pose);

  PnPGradients out;
  out.grad_points = Eigen::MatrixX3d::Zero(static_cast<Eigen::Index>(n), 3);
  out.grad_pixels = Eigen::MatrixX2d::Zero(static_cast<Eigen::Index>(n), 2);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3& x = corr.pairs[i].point;
    const Vec2& y = corr.pairs[i].pixel;
    for (int c = 0; c < 3; ++c) {
      const double h = finite_step(x[c]);
      Vec3 xp = x;
      Vec3 xm = x;
      xp[c] += h;
      xm[c] -= h;
      const Vec6 df = (pair_constraint(pose, xp, y, K) - pair_constraint(pose, xm, y, K)) / (2.0 * h);
      out.grad_points(static_cast<Eigen::Index>(i), c) = -df.dot(u);
    }
    for (int c = 0; c < 2; ++c) {
      const double h = finite_step(y[c]);
      Vec2 yp = y;
      Vec2 ym = y;
      yp[c] += h;
      ym[c] -= h;
      const Vec6 df = (pair_constraint(pose, x, yp, K) - pair_constraint(pose, x, ym, K)) / (2.0 * h);
      out.grad_pixels(static_cast<Eigen::Index>(i), c) = -df.dot(u);
    }
  }
  return out;
}

}  // namespace diffreg
