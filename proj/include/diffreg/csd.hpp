#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "diffreg/correspondence.hpp"
#include "diffreg/depth.hpp"
#include "diffreg/geometry.hpp"

namespace diffreg {

enum class TimestepWeighting {
  Constant,  // w(t) = 1
  Sigma,     // w(t) = sigma_t^2 = sin^2(pi t / 2)
};

struct CSDConfig {
  TimestepWeighting weighting = TimestepWeighting::Constant;
  double t_min = 0.02;
  double t_max = 0.98;
  int samples = 1;
  std::uint64_t seed = 0;
  /// Rendering, densification and the latent dims (chain.latent_*).
  DepthChainConfig chain;
  /// Also descend on per-point offsets alongside the pose.
  bool optimize_offsets = false;
  /// Backtracking: halvings tried before a step is declared rejected.
  int max_backtracks = 20;
  /// Stop early after this many consecutive rejected steps (0: never).
  int patience = 10;

  void validate() const;
  double weight(double t) const;
};

struct ScoreRequest {
  std::uint64_t id = 0;
  /// Densified depth at image resolution.
  DepthMap depth;
  std::string image_ref;
  double t = 0.5;
  std::uint64_t seed = 0;
  int latent_height = 0;
  int latent_width = 0;
};

/// eps_hat - eps on the latent grid.
struct ScoreResidual {
  Eigen::MatrixXd values;  // h x w
};

class ScoreProvider {
 public:
  virtual ~ScoreProvider() = default;
  /// Throws ProviderFailure when no valid residual can be produced.
  virtual ScoreResidual score(const ScoreRequest& request) = 0;
};

enum class MockKind { Zero, RandomSeeded, DepthTarget };

/// `target` is the latent depth rendered at the designated pose; the
/// depth_target kind throws MissingTarget without one. Its residual is
/// m * (d - d*) with m the intersection of the current and target masks.
std::unique_ptr<ScoreProvider> make_mock_provider(MockKind kind, std::optional<DepthMap> target = std::nullopt);

/// w_t * |m * residual|^2, for monitoring only.
double surrogate_csd_loss(const ScoreResidual& residual, const std::vector<std::uint8_t>& mask, double w_t);

/// depth_backward(w_t * (m * residual)). Throws DimMismatch when the residual
/// or mask does not match the provenance's latent grid, StaleProvenance when
/// the provenance was recorded at a pose other than `current`.
DepthGradients csd_gradient(const ScoreResidual& residual, const std::vector<std::uint8_t>& mask, double w_t,
                            const DepthProvenance& provenance, const Pose& current);

struct CSDStep {
  int step = 0;
  Pose pose;
  /// Surrogate at the pose this step started from.
  double surrogate = 0.0;
  double t = 0.0;
  double w_t = 0.0;
  double lr = 0.0;
  bool accepted = false;
};

struct CSDTrajectory {
  std::vector<CSDStep> steps;
  Pose final_pose;
  std::vector<Vec3> offsets;
  double final_surrogate = 0.0;
};

/// Render, densify, resize, query the provider, descend on the pose tangent.
/// A step is kept only when the surrogate (re-evaluated with the same
/// timestep and noise seed) strictly drops; rejected trials halve the rate,
/// accepted ones grow it by 1.5. A step whose search fails keeps the pose
/// and restores the rate; `patience` such steps in a row end the run early.
CSDTrajectory csd_optimize(const Pose& initial_pose, const std::vector<Vec3>& points, const std::string& image_ref,
                           const CameraIntrinsics& K, ScoreProvider& provider, const CSDConfig& config, int steps,
                           double lr);

struct TranslationLossResult {
  double loss = 0.0;
  Vec6 grad_pose = Vec6::Zero();
};

/// sum_i |R x_i + t - K^-1(y_i, d_i)|^2 with its pose-tangent gradient. A
/// diagnostic; never used as an optimization objective here.
TranslationLossResult translation_loss(const CorrespondenceSet& corr, const Pose& pose, const CameraIntrinsics& K);

// Score-provider wire protocol: one JSON object per line.

struct ScoreResponse {
  std::uint64_t id = 0;
  std::optional<std::string> residual_b64;
  std::optional<std::string> err;
};

std::string encode_score_request(const ScoreRequest& request);
/// Throws ParseError on malformed lines.
ScoreRequest decode_score_request(const std::string& line);
std::string encode_score_response(const ScoreResponse& response);
ScoreResponse decode_score_response(const std::string& line);
/// Residual payload of a response; ProviderFailure on err or bad length.
ScoreResidual residual_from_response(const ScoreResponse& response, int height, int width);
ScoreResponse response_from_residual(std::uint64_t id, const ScoreResidual& residual);

/// Speaks the wire protocol to a bridge process. `address` is either
/// "host:port" (TCP) or "stdio:<shell command>" (child process on pipes).
/// Every failure surfaces as ProviderFailure; a request with no answer
/// within `timeout` fails too.
class BridgeProvider : public ScoreProvider {
 public:
  BridgeProvider(const std::string& address, std::chrono::milliseconds timeout);
  ~BridgeProvider() override;
  BridgeProvider(const BridgeProvider&) = delete;
  BridgeProvider& operator=(const BridgeProvider&) = delete;

  ScoreResidual score(const ScoreRequest& request) override;

 private:
  void send_line(const std::string& line);
  std::string read_line(std::chrono::steady_clock::time_point deadline);

  int read_fd_ = -1;
  int write_fd_ = -1;
  int child_ = -1;
  std::chrono::milliseconds timeout_;
  std::string buffer_;
  std::uint64_t next_id_ = 1;
  /// Answers that arrived while waiting for a different id.
  std::map<std::uint64_t, ScoreResponse> early_;
};

}  // namespace diffreg
