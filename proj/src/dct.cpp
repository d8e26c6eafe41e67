#include "diffreg/dct.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <string>

#include <json.hpp>

#include "diffreg/io.hpp"
#include "diffreg/random.hpp"

namespace diffreg {

Eigen::VectorXd assemble_pair_feature(const Correspondence& pair, const CameraIntrinsics& K) {
  if (pair.point_feature.size() == 0 || pair.pixel_feature.size() == 0) {
    throw Error(ErrorCode::MissingFeature, "pair feature needs both point and pixel descriptors");
  }
  if (pair.point_feature.size() != pair.pixel_feature.size()) {
    throw Error(ErrorCode::ShapeMismatch, "point and pixel descriptors differ in length");
  }
  if (!pair.pixel_depth) throw Error(ErrorCode::MissingDepth, "pair feature needs the pixel depth");
  const Eigen::Index F = pair.point_feature.size();
  Eigen::VectorXd out(2 * F + 6);
  out.head(F) = pair.point_feature;
  out.segment(F, F) = pair.pixel_feature;
  out.segment<3>(2 * F) = pair.point;
  out.tail<3>() = unproject(pair.pixel, *pair.pixel_depth, K);
  return out;
}

Eigen::MatrixXd assemble_pair_features(const CorrespondenceSet& corr, const CameraIntrinsics& K) {
  if (corr.empty()) return {};
  const Eigen::VectorXd first = assemble_pair_feature(corr.pairs[0], K);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(corr.size()), first.size());
  out.row(0) = first.transpose();
  for (std::size_t i = 1; i < corr.size(); ++i) {
    const Eigen::VectorXd row = assemble_pair_feature(corr.pairs[i], K);
    if (row.size() != first.size()) throw Error(ErrorCode::ShapeMismatch, "ragged pair features");
    out.row(static_cast<Eigen::Index>(i)) = row.transpose();
  }
  return out;
}

OffsetNetwork::OffsetNetwork(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw Error(ErrorCode::ShapeMismatch, "offset network has no layers");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& L = layers_[l];
    if (L.weight.rows() == 0 || L.weight.cols() == 0 || L.bias.size() != L.weight.rows()) {
      throw Error(ErrorCode::ShapeMismatch, "layer " + std::to_string(l) + " weight/bias shapes disagree");
    }
    if (l > 0 && L.weight.cols() != layers_[l - 1].weight.rows()) {
      throw Error(ErrorCode::ShapeMismatch, "layer " + std::to_string(l) + " does not chain");
    }
  }
  if (layers_.back().weight.rows() != 3) throw Error(ErrorCode::ShapeMismatch, "output layer must have 3 units");
}

OffsetNetwork OffsetNetwork::initialize(int input_dim, const OffsetNetworkConfig& config) {
  if (input_dim < 1) throw Error(ErrorCode::InvalidArgument, "input_dim must be >= 1");
  std::mt19937_64 rng(config.seed);
  std::vector<DenseLayer> layers;
  int in = input_dim;
  for (int width : config.hidden) {
    if (width < 1) throw Error(ErrorCode::InvalidArgument, "hidden widths must be >= 1");
    DenseLayer L;
    const double bound = std::sqrt(6.0 / (in + width));
    L.weight.resize(width, in);
    for (Eigen::Index r = 0; r < L.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < L.weight.cols(); ++c) L.weight(r, c) = uniform(rng, -bound, bound);
    }
    L.bias = Eigen::VectorXd::Zero(width);
    layers.push_back(std::move(L));
    in = width;
  }
  layers.push_back({Eigen::MatrixXd::Zero(3, in), Eigen::VectorXd::Zero(3)});
  return OffsetNetwork(std::move(layers));
}

Eigen::MatrixXd OffsetNetwork::forward(const Eigen::MatrixXd& inputs) const {
  if (inputs.cols() != input_dim()) {
    throw Error(ErrorCode::ShapeMismatch, "expected " + std::to_string(input_dim()) + " input columns, got " +
                                              std::to_string(inputs.cols()));
  }
  Eigen::MatrixXd a = inputs;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Eigen::MatrixXd z = a * layers_[l].weight.transpose();
    z.rowwise() += layers_[l].bias.transpose();
    a = l + 1 < layers_.size() ? Eigen::MatrixXd(z.array().tanh()) : z;
  }
  return a;
}

OffsetNetworkGradients OffsetNetwork::backward(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& upstream) const {
  if (inputs.cols() != input_dim() || upstream.rows() != inputs.rows() || upstream.cols() != 3) {
    throw Error(ErrorCode::ShapeMismatch, "backward shapes do not match the network");
  }
  // Keep every activation; the batch is small.
  std::vector<Eigen::MatrixXd> acts{inputs};
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Eigen::MatrixXd z = acts.back() * layers_[l].weight.transpose();
    z.rowwise() += layers_[l].bias.transpose();
    acts.push_back(l + 1 < layers_.size() ? Eigen::MatrixXd(z.array().tanh()) : z);
  }
  OffsetNetworkGradients g;
  g.layers.resize(layers_.size());
  Eigen::MatrixXd delta = upstream;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    g.layers[l].weight = delta.transpose() * acts[l];
    g.layers[l].bias = delta.colwise().sum().transpose();
    delta = delta * layers_[l].weight;
    if (l > 0) delta = (delta.array() * (1.0 - acts[l].array().square())).matrix();
  }
  g.inputs = delta;
  return g;
}

Eigen::VectorXd OffsetNetwork::flatten(const std::vector<DenseLayer>& layers) {
  Eigen::Index n = 0;
  for (const auto& L : layers) n += L.weight.size() + L.bias.size();
  Eigen::VectorXd out(n);
  Eigen::Index k = 0;
  for (const auto& L : layers) {
    for (Eigen::Index r = 0; r < L.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < L.weight.cols(); ++c) out[k++] = L.weight(r, c);
    }
    for (Eigen::Index r = 0; r < L.bias.size(); ++r) out[k++] = L.bias[r];
  }
  return out;
}

Eigen::VectorXd OffsetNetwork::parameters() const { return flatten(layers_); }

OffsetNetwork OffsetNetwork::with_parameters(const Eigen::VectorXd& params) const {
  if (params.size() != parameters().size()) throw Error(ErrorCode::ShapeMismatch, "parameter count mismatch");
  std::vector<DenseLayer> layers = layers_;
  Eigen::Index k = 0;
  for (auto& L : layers) {
    for (Eigen::Index r = 0; r < L.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < L.weight.cols(); ++c) L.weight(r, c) = params[k++];
    }
    for (Eigen::Index r = 0; r < L.bias.size(); ++r) L.bias[r] = params[k++];
  }
  return OffsetNetwork(std::move(layers));
}

namespace {

void write_f32(const std::filesystem::path& path, const Eigen::MatrixXd& m) {
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) flat.push_back(m(r, c));
  }
  write_file(path, encode_f32_le(flat));
}

Eigen::MatrixXd read_f32(const std::filesystem::path& path, Eigen::Index rows, Eigen::Index cols) {
  const std::vector<double> flat = decode_f32_le(read_file(path));
  if (static_cast<Eigen::Index>(flat.size()) != rows * cols) {
    throw Error(ErrorCode::ShapeMismatch, path.string() + " holds " + std::to_string(flat.size()) +
                                              " floats, expected " + std::to_string(rows * cols));
  }
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = flat[static_cast<std::size_t>(r * cols + c)];
  }
  return m;
}

}  // namespace

void OffsetNetwork::save(const std::filesystem::path& manifest) const {
  const auto dir = manifest.parent_path();
  const std::string stem = manifest.stem().string();
  nlohmann::json j;
  j["activation"] = "tanh";
  j["layers"] = nlohmann::json::array();
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string w = stem + ".layer" + std::to_string(l) + ".weight.f32";
    const std::string b = stem + ".layer" + std::to_string(l) + ".bias.f32";
    write_f32(dir / w, layers_[l].weight);
    write_f32(dir / b, layers_[l].bias);
    j["layers"].push_back({{"in", layers_[l].weight.cols()}, {"out", layers_[l].weight.rows()}, {"weight", w}, {"bias", b}});
  }
  std::ofstream out(manifest);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + manifest.string());
  out << j.dump(2) << "\n";
}

OffsetNetwork OffsetNetwork::load(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + manifest.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, manifest.string() + ": " + e.what());
  }
  if (j.value("activation", "tanh") != "tanh") throw Error(ErrorCode::ParseError, "only tanh networks are supported");
  const auto dir = manifest.parent_path();
  std::vector<DenseLayer> layers;
  try {
    for (const auto& L : j.at("layers")) {
      const Eigen::Index rows = L.at("out").get<Eigen::Index>();
      const Eigen::Index cols = L.at("in").get<Eigen::Index>();
      DenseLayer layer;
      layer.weight = read_f32(dir / L.at("weight").get<std::string>(), rows, cols);
      layer.bias = read_f32(dir / L.at("bias").get<std::string>(), rows, 1).col(0);
      layers.push_back(std::move(layer));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, manifest.string() + ": " + e.what());
  }
  return OffsetNetwork(std::move(layers));
}

std::vector<Vec3> predict_offsets(const OffsetNetwork& net, const Eigen::MatrixXd& features) {
  const Eigen::MatrixXd out = net.forward(features);
  std::vector<Vec3> offsets(static_cast<std::size_t>(out.rows()));
  for (Eigen::Index i = 0; i < out.rows(); ++i) offsets[static_cast<std::size_t>(i)] = out.row(i).transpose();
  return offsets;
}

CorrespondenceSet apply_offsets(const CorrespondenceSet& corr, const std::vector<Vec3>& offsets) {
  if (offsets.size() != corr.size()) {
    throw Error(ErrorCode::LengthMismatch, std::to_string(offsets.size()) + " offsets for " +
                                               std::to_string(corr.size()) + " pairs");
  }
  CorrespondenceSet out = corr;
  for (std::size_t i = 0; i < offsets.size(); ++i) out.pairs[i].point += offsets[i];
  return out;
}

OffsetLossResult offset_loss(const CorrespondenceSet& corr, const std::vector<Vec3>& offsets, const Pose& gt_pose,
                             const CameraIntrinsics& K, double mu) {
  if (mu < 0.0 || !std::isfinite(mu)) throw Error(ErrorCode::InvalidArgument, "mu must be finite and >= 0");
  if (offsets.size() != corr.size()) throw Error(ErrorCode::LengthMismatch, "one offset per pair required");
  if (corr.empty()) throw Error(ErrorCode::EmptyCorrespondences, "offset loss over an empty set");
  const double inv_n = 1.0 / static_cast<double>(corr.size());
  const Mat3& R = gt_pose.rotation();
  OffsetLossResult res;
  res.grad.resize(corr.size());
  double dist_sum = 0.0;
  double reg_sum = 0.0;
  for (std::size_t i = 0; i < corr.size(); ++i) {
    const auto& c = corr.pairs[i];
    if (!c.pixel_depth) throw Error(ErrorCode::MissingDepth, "pair " + std::to_string(i) + " has no pixel depth");
    const Vec3 r = gt_pose.apply(c.point + offsets[i]) - unproject(c.pixel, *c.pixel_depth, K);
    const double norm = offsets[i].norm();
    dist_sum += r.squaredNorm();
    reg_sum += norm;
    Vec3 g = 2.0 * R.transpose() * r;
    if (norm > 0.0) g += mu * offsets[i] / norm;
    res.grad[i] = inv_n * g;
  }
  res.distance_loss = inv_n * dist_sum;
  res.loss = inv_n * (dist_sum + mu * reg_sum);
  return res;
}

TuneResult tune_offsets(const CorrespondenceSet& corr, const Pose& gt_pose, const CameraIntrinsics& K, double mu,
                        int steps, double lr) {
  if (steps < 1) throw Error(ErrorCode::InvalidArgument, "steps must be >= 1");
  if (!(lr > 0.0)) throw Error(ErrorCode::InvalidArgument, "lr must be positive");
  TuneResult out;
  out.offsets.assign(corr.size(), Vec3::Zero());
  auto cur = offset_loss(corr, out.offsets, gt_pose, K, mu);
  out.losses.push_back(cur.loss);
  for (int s = 0; s < steps; ++s) {
    bool stationary = true;
    for (const auto& g : cur.grad) stationary = stationary && g.isZero(0.0);
    if (stationary) break;
    bool accepted = false;
    for (int attempt = 0; attempt < 60 && !accepted; ++attempt) {
      std::vector<Vec3> trial(out.offsets.size());
      for (std::size_t i = 0; i < trial.size(); ++i) trial[i] = out.offsets[i] - lr * cur.grad[i];
      auto next = offset_loss(corr, trial, gt_pose, K, mu);
      if (next.loss <= cur.loss) {
        out.offsets = std::move(trial);
        cur = std::move(next);
        lr *= 1.5;
        accepted = true;
      } else {
        lr *= 0.5;
      }
    }
    out.losses.push_back(cur.loss);
    if (!accepted) break;
  }
  out.distance_loss = cur.distance_loss;
  return out;
}

}  // namespace diffreg
