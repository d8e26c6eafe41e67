#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "diffreg/correspondence.hpp"
#include "diffreg/geometry.hpp"

namespace diffreg {

/// [point feature; pixel feature; point; unprojected pixel], length 2F + 6.
/// The pixel is unprojected with the pair's own pixel_depth.
Eigen::VectorXd assemble_pair_feature(const Correspondence& pair, const CameraIntrinsics& K);

/// One row per pair.
Eigen::MatrixXd assemble_pair_features(const CorrespondenceSet& corr, const CameraIntrinsics& K);

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out
};

struct OffsetNetworkConfig {
  std::vector<int> hidden{128, 128};
  std::uint64_t seed = 0;
};

struct OffsetNetworkGradients {
  std::vector<DenseLayer> layers;
  Eigen::MatrixXd inputs;  // B x D
};

/// Dense network with tanh between layers and a linear 3-wide output.
class OffsetNetwork {
 public:
  /// Throws ShapeMismatch unless the layers chain and end in 3 outputs.
  explicit OffsetNetwork(std::vector<DenseLayer> layers);

  /// Uniform Glorot weights, zero biases, and a zero output layer so a new
  /// network predicts no offset.
  static OffsetNetwork initialize(int input_dim, const OffsetNetworkConfig& config = {});

  int input_dim() const { return static_cast<int>(layers_.front().weight.cols()); }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  /// B x D -> B x 3.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& inputs) const;

  /// Vector-Jacobian product of forward at `inputs` with upstream B x 3.
  OffsetNetworkGradients backward(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& upstream) const;

  /// Parameters flattened layer by layer (weight row-major, then bias).
  Eigen::VectorXd parameters() const;
  OffsetNetwork with_parameters(const Eigen::VectorXd& params) const;
  static Eigen::VectorXd flatten(const std::vector<DenseLayer>& layers);

  /// JSON manifest plus one raw little-endian f32 blob per tensor, written
  /// next to the manifest.
  void save(const std::filesystem::path& manifest) const;
  static OffsetNetwork load(const std::filesystem::path& manifest);

 private:
  std::vector<DenseLayer> layers_;
};

std::vector<Vec3> predict_offsets(const OffsetNetwork& net, const Eigen::MatrixXd& features);

/// Shifts each point by its offset; everything else is copied.
CorrespondenceSet apply_offsets(const CorrespondenceSet& corr, const std::vector<Vec3>& offsets);

struct OffsetLossResult {
  double loss = 0.0;
  /// Mean of |R(x + dp) + t - K^-1(y)|^2 alone.
  double distance_loss = 0.0;
  std::vector<Vec3> grad;
};

/// mean_i(|R(x_i + dp_i) + t - K^-1(y_i, d_i)|^2 + mu |dp_i|). The norm's
/// subgradient at dp = 0 is taken as 0.
OffsetLossResult offset_loss(const CorrespondenceSet& corr, const std::vector<Vec3>& offsets, const Pose& gt_pose,
                             const CameraIntrinsics& K, double mu);

struct TuneResult {
  std::vector<Vec3> offsets;
  /// Loss before the first step and after every step.
  std::vector<double> losses;
  double distance_loss = 0.0;
};

/// Gradient descent on offset_loss from zero offsets. A step is kept only
/// if the loss does not increase; rejected steps halve the rate, accepted
/// ones grow it by 1.5.
TuneResult tune_offsets(const CorrespondenceSet& corr, const Pose& gt_pose, const CameraIntrinsics& K, double mu,
                        int steps, double lr = 1.0);

}  // namespace diffreg
