#include "diffreg/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <unordered_map>

namespace diffreg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(sum exp(v)) and the softmax weights.
double log_sum_exp(const std::vector<double>& v, std::vector<double>& softmax) {
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  softmax.resize(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    softmax[i] = std::exp(v[i] - mx);
    sum += softmax[i];
  }
  for (auto& s : softmax) s /= sum;
  return mx + std::log(sum);
}

double weight_at(const std::vector<double>& w, std::size_t i) { return w.empty() ? 1.0 : w[i]; }

}  // namespace

void Keypoints::validate() const {
  if (features.rows() != static_cast<Eigen::Index>(pixels.size())) {
    throw Error(ErrorCode::ShapeMismatch, "keypoint feature rows differ from the pixel count");
  }
  if (!depths.empty() && depths.size() != pixels.size()) {
    throw Error(ErrorCode::ShapeMismatch, "keypoint depths differ from the pixel count");
  }
}

Keypoints keypoints_from_dense(const Image& image) {
  image.validate();
  if (image.features.cols() == 0) throw Error(ErrorCode::MissingFeature, "image carries no feature map");
  Keypoints kp;
  kp.features = image.features;
  kp.pixels.reserve(static_cast<std::size_t>(image.width) * image.height);
  for (int r = 0; r < image.height; ++r) {
    for (int c = 0; c < image.width; ++c) kp.pixels.emplace_back(c, r);
  }
  return kp;
}

Eigen::MatrixXd normalize_rows(const Eigen::MatrixXd& m) {
  Eigen::MatrixXd out = m;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (n > 0.0) out.row(i) /= n;
  }
  return out;
}

double feature_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw Error(ErrorCode::ShapeMismatch, "descriptor dimensions differ");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw Error(ErrorCode::InvalidArgument, "zero descriptor has no direction");
  return (a / na - b / nb).norm();
}

PatchPyramid build_patch_pyramid(const Keypoints& keypoints, int width, int height, const PyramidConfig& config) {
  keypoints.validate();
  if (config.cell_size < 1 || config.scales.empty()) throw Error(ErrorCode::InvalidArgument, "bad pyramid config");
  const Eigen::Index F = keypoints.features.cols();
  PatchPyramid out;
  std::vector<Eigen::VectorXd> rows;
  for (int scale : config.scales) {
    if (scale < 1) throw Error(ErrorCode::InvalidArgument, "pyramid scales must be >= 1");
    const int cell = config.cell_size * scale;
    const int gx = (width + cell - 1) / cell;
    const int gy = (height + cell - 1) / cell;
    std::vector<std::vector<int>> bins(static_cast<std::size_t>(gx) * gy);
    for (std::size_t i = 0; i < keypoints.size(); ++i) {
      const int cx = std::clamp(static_cast<int>(std::floor(keypoints.pixels[i].x() / cell)), 0, gx - 1);
      const int cy = std::clamp(static_cast<int>(std::floor(keypoints.pixels[i].y() / cell)), 0, gy - 1);
      bins[static_cast<std::size_t>(cy) * gx + cx].push_back(static_cast<int>(i));
    }
    for (int r = 0; r < gy; ++r) {
      for (int c = 0; c < gx; ++c) {
        auto& members = bins[static_cast<std::size_t>(r) * gx + c];
        if (members.empty()) continue;
        ImagePatch p;
        p.scale = scale;
        p.x0 = c * cell;
        p.y0 = r * cell;
        p.x1 = std::min(width, (c + 1) * cell);
        p.y1 = std::min(height, (r + 1) * cell);
        Eigen::VectorXd f = Eigen::VectorXd::Zero(F);
        for (int m : members) f += keypoints.features.row(m).transpose();
        p.members = std::move(members);
        out.patches.push_back(std::move(p));
        rows.push_back(f);
      }
    }
  }
  out.features.resize(static_cast<Eigen::Index>(rows.size()), F);
  for (std::size_t i = 0; i < rows.size(); ++i) out.features.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  out.features = normalize_rows(out.features);
  return out;
}

SuperpointSet build_superpoints(const PointCloud& cloud, int count) {
  const auto n = cloud.points.size();
  if (n == 0) throw Error(ErrorCode::EmptyInput, "cannot build superpoints of an empty cloud");
  const std::size_t k = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(count, 1)), 1, n);
  std::vector<std::size_t> seeds{0};
  std::vector<double> dist(n, kInf);
  while (seeds.size() < k) {
    const Vec3& last = cloud.points[seeds.back()];
    std::size_t far = 0;
    for (std::size_t i = 0; i < n; ++i) {
      dist[i] = std::min(dist[i], (cloud.points[i] - last).squaredNorm());
      if (dist[i] > dist[far]) far = i;
    }
    seeds.push_back(far);
  }
  SuperpointSet out;
  out.nodes.resize(k);
  for (std::size_t s = 0; s < k; ++s) out.nodes[s].center = cloud.points[seeds[s]];
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    double best_d = kInf;
    for (std::size_t s = 0; s < k; ++s) {
      const double d = (cloud.points[i] - out.nodes[s].center).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = s;
      }
    }
    out.nodes[best].members.push_back(static_cast<int>(i));
  }
  const Eigen::Index F = cloud.features.cols();
  out.features = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), F);
  if (F > 0) {
    for (std::size_t s = 0; s < k; ++s) {
      for (int m : out.nodes[s].members) out.features.row(static_cast<Eigen::Index>(s)) += cloud.features.row(m);
    }
    out.features = normalize_rows(out.features);
  }
  return out;
}

std::vector<PatchMatch> coarse_match(const Eigen::MatrixXd& patch_features, const Eigen::MatrixXd& superpoint_features,
                                     int k, bool normalize, const std::vector<int>& patch_scales) {
  if (patch_features.rows() == 0 || superpoint_features.rows() == 0) {
    throw Error(ErrorCode::EmptyInput, "coarse matching needs patches and superpoints");
  }
  if (patch_features.cols() != superpoint_features.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "patch and superpoint descriptors differ in dimension");
  }
  if (k < 1) throw Error(ErrorCode::InvalidArgument, "k must be >= 1");
  const Eigen::MatrixXd P = normalize ? normalize_rows(patch_features) : patch_features;
  const Eigen::MatrixXd S = normalize ? normalize_rows(superpoint_features) : superpoint_features;
  const Eigen::MatrixXd scores = S * P.transpose();
  const auto num_patches = static_cast<std::size_t>(P.rows());
  const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), num_patches);
  std::vector<PatchMatch> out;
  std::vector<int> order(num_patches);
  for (Eigen::Index s = 0; s < S.rows(); ++s) {
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(kk), order.end(), [&](int a, int b) {
      const double sa = scores(s, a);
      const double sb = scores(s, b);
      return sa != sb ? sa > sb : a < b;
    });
    for (std::size_t j = 0; j < kk; ++j) {
      PatchMatch m;
      m.superpoint = static_cast<int>(s);
      m.patch = order[j];
      m.scale = patch_scales.empty() ? 1 : patch_scales[static_cast<std::size_t>(order[j])];
      m.score = scores(s, order[j]);
      out.push_back(m);
    }
  }
  return out;
}

FinePatch gather_fine_patch(const PointCloud& cloud, const SuperpointSet& superpoints, int sp,
                            const Keypoints& keypoints, const PatchPyramid& pyramid, int patch) {
  const auto& node = superpoints.nodes.at(static_cast<std::size_t>(sp));
  const auto& ip = pyramid.patches.at(static_cast<std::size_t>(patch));
  FinePatch fp;
  fp.point_features.resize(static_cast<Eigen::Index>(node.members.size()), cloud.features.cols());
  for (std::size_t i = 0; i < node.members.size(); ++i) {
    const int m = node.members[i];
    fp.points.push_back(cloud.points[static_cast<std::size_t>(m)]);
    fp.point_features.row(static_cast<Eigen::Index>(i)) = cloud.features.row(m);
    fp.point_ids.push_back(m);
  }
  fp.pixel_features.resize(static_cast<Eigen::Index>(ip.members.size()), keypoints.features.cols());
  for (std::size_t j = 0; j < ip.members.size(); ++j) {
    const int m = ip.members[j];
    fp.pixels.push_back(keypoints.pixels[static_cast<std::size_t>(m)]);
    fp.pixel_features.row(static_cast<Eigen::Index>(j)) = keypoints.features.row(m);
    fp.pixel_ids.push_back(m);
    if (!keypoints.depths.empty()) fp.pixel_depths.push_back(keypoints.depths[static_cast<std::size_t>(m)]);
  }
  return fp;
}

std::vector<FinePair> fine_match_pairs(const FinePatch& patch, int k) {
  const auto P = patch.points.size();
  const auto Q = patch.pixels.size();
  if (P == 0 || Q == 0) throw Error(ErrorCode::EmptyPatch, "patch pair has no points or no pixels");
  if (k < 1) throw Error(ErrorCode::InvalidArgument, "k must be >= 1");
  if (patch.point_features.rows() != static_cast<Eigen::Index>(P) ||
      patch.pixel_features.rows() != static_cast<Eigen::Index>(Q)) {
    throw Error(ErrorCode::MissingFeature, "fine features missing for the patch members");
  }
  if (patch.point_features.cols() != patch.pixel_features.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "point and pixel descriptors differ in dimension");
  }
  auto point_id = [&](int i) { return patch.point_ids.empty() ? i : patch.point_ids[static_cast<std::size_t>(i)]; };
  auto pixel_id = [&](int j) { return patch.pixel_ids.empty() ? j : patch.pixel_ids[static_cast<std::size_t>(j)]; };

  const Eigen::MatrixXd scores = normalize_rows(patch.point_features) * normalize_rows(patch.pixel_features).transpose();
  const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), Q);
  std::vector<FinePair> out;
  std::vector<int> order(Q);
  for (std::size_t i = 0; i < P; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(kk), order.end(), [&](int a, int b) {
      const double sa = scores(row, a);
      const double sb = scores(row, b);
      return sa != sb ? sa > sb : pixel_id(a) < pixel_id(b);
    });
    for (std::size_t t = 0; t < kk; ++t) out.push_back({static_cast<int>(i), order[t], scores(row, order[t])});
  }
  std::sort(out.begin(), out.end(), [&](const FinePair& a, const FinePair& b) {
    if (a.score != b.score) return a.score > b.score;
    if (point_id(a.point) != point_id(b.point)) return point_id(a.point) < point_id(b.point);
    return pixel_id(a.pixel) < pixel_id(b.pixel);
  });
  return out;
}

CorrespondenceSet fine_match(const FinePatch& patch, int k, int patch_index) {
  CorrespondenceSet out;
  for (const auto& fp : fine_match_pairs(patch, k)) {
    const auto i = static_cast<std::size_t>(fp.point);
    const auto j = static_cast<std::size_t>(fp.pixel);
    Correspondence c;
    c.point = patch.points[i];
    c.pixel = patch.pixels[j];
    c.point_feature = patch.point_features.row(fp.point).transpose();
    c.pixel_feature = patch.pixel_features.row(fp.pixel).transpose();
    c.score = fp.score;
    if (!patch.pixel_depths.empty()) c.pixel_depth = patch.pixel_depths[j];
    c.patch_index = patch_index;
    out.pairs.push_back(std::move(c));
  }
  return out;
}

CoarseToFineResult match_coarse_to_fine(const PointCloud& cloud, const Keypoints& keypoints, int width, int height,
                                        const CoarseToFineConfig& config) {
  cloud.validate();
  keypoints.validate();
  if (cloud.features.cols() == 0 || keypoints.features.cols() == 0) {
    throw Error(ErrorCode::MissingFeature, "matching needs point and pixel features");
  }
  CoarseToFineResult out;
  const int num_sp = config.num_superpoints > 0 ? config.num_superpoints
                                                : std::max(1, static_cast<int>(cloud.points.size() / 8));
  out.superpoints = build_superpoints(cloud, num_sp);
  out.pyramid = build_patch_pyramid(keypoints, width, height, config.pyramid);
  std::vector<int> scales;
  for (const auto& p : out.pyramid.patches) scales.push_back(p.scale);
  out.patch_matches = coarse_match(out.pyramid.features, out.superpoints.features, config.coarse_k, false, scales);

  struct Tagged {
    Correspondence c;
    int point_id, pixel_id;
  };
  std::vector<Tagged> all;
  for (std::size_t m = 0; m < out.patch_matches.size(); ++m) {
    const auto& pm = out.patch_matches[m];
    const FinePatch fp = gather_fine_patch(cloud, out.superpoints, pm.superpoint, keypoints, out.pyramid, pm.patch);
    if (fp.points.empty() || fp.pixels.empty()) continue;
    const CorrespondenceSet fine = fine_match(fp, config.fine_k, static_cast<int>(m));
    const auto pairs = fine_match_pairs(fp, config.fine_k);
    for (std::size_t t = 0; t < pairs.size(); ++t) {
      all.push_back({fine.pairs[t], fp.point_ids[static_cast<std::size_t>(pairs[t].point)],
                     fp.pixel_ids[static_cast<std::size_t>(pairs[t].pixel)]});
    }
  }
  std::stable_sort(all.begin(), all.end(), [](const Tagged& a, const Tagged& b) {
    if (a.c.score != b.c.score) return a.c.score > b.c.score;
    if (a.point_id != b.point_id) return a.point_id < b.point_id;
    return a.pixel_id < b.pixel_id;
  });
  std::set<std::pair<int, int>> seen;
  for (auto& t : all) {
    if (!seen.insert({t.point_id, t.pixel_id}).second) continue;
    out.correspondences.pairs.push_back(std::move(t.c));
    out.point_ids.push_back(t.point_id);
    out.pixel_ids.push_back(t.pixel_id);
  }
  return out;
}

void PairLabelThresholds::validate() const {
  if (!(fine_neg_3d > fine_pos_3d && fine_neg_2d > fine_pos_2d && coarse_pos_overlap > coarse_neg_overlap)) {
    throw Error(ErrorCode::InvalidArgument, "negative thresholds must lie strictly beyond the positive ones");
  }
}

std::vector<PairLabel> label_pairs(const CorrespondenceSet& corr, const Pose& gt_pose, const CameraIntrinsics& K,
                                   const PairLabelThresholds& thresholds) {
  thresholds.validate();
  std::vector<PairLabel> labels;
  labels.reserve(corr.size());
  for (const auto& c : corr.pairs) {
    if (!c.pixel_depth) throw Error(ErrorCode::MissingDepth, "labeling needs pixel depths");
    const Vec3 pc = gt_pose.apply(c.point);
    const double d3 = (pc - unproject(c.pixel, *c.pixel_depth, K)).norm();
    const double d2 = pc.z() > kMinDepth ? (project(pc, K).pixel - c.pixel).norm() : kInf;
    if (d3 < thresholds.fine_pos_3d && d2 < thresholds.fine_pos_2d) {
      labels.push_back(PairLabel::Positive);
    } else if (d3 > thresholds.fine_neg_3d || d2 > thresholds.fine_neg_2d) {
      labels.push_back(PairLabel::Negative);
    } else {
      labels.push_back(PairLabel::Ignored);
    }
  }
  return labels;
}

PairLabel label_patch_pair(double image_overlap, double point_overlap, const PairLabelThresholds& thresholds) {
  if (image_overlap >= thresholds.coarse_pos_overlap && point_overlap >= thresholds.coarse_pos_overlap) {
    return PairLabel::Positive;
  }
  if (image_overlap < thresholds.coarse_neg_overlap && point_overlap < thresholds.coarse_neg_overlap) {
    return PairLabel::Negative;
  }
  return PairLabel::Ignored;
}

void CircleLossParams::validate() const {
  if (!(neg_margin > pos_margin)) throw Error(ErrorCode::InvalidArgument, "negative margin must exceed positive margin");
  if (!(scale > 0.0)) throw Error(ErrorCode::InvalidArgument, "circle loss scale must be positive");
}

CircleLossResult circle_loss(const CircleAnchor& a, const CircleLossParams& params) {
  params.validate();
  if (!a.pos_weights.empty() && a.pos_weights.size() != a.pos_distances.size()) {
    throw Error(ErrorCode::LengthMismatch, "positive weights differ from positive distances");
  }
  if (!a.neg_weights.empty() && a.neg_weights.size() != a.neg_distances.size()) {
    throw Error(ErrorCode::LengthMismatch, "negative weights differ from negative distances");
  }
  CircleLossResult out;
  out.grad_pos.assign(a.pos_distances.size(), 0.0);
  out.grad_neg.assign(a.neg_distances.size(), 0.0);
  if (a.pos_distances.empty() || a.neg_distances.empty()) return out;

  const double s = params.scale;
  std::vector<double> lp(a.pos_distances.size());
  std::vector<double> ln(a.neg_distances.size());
  for (std::size_t i = 0; i < lp.size(); ++i) {
    const double c = std::max(0.0, a.pos_distances[i] - params.pos_margin);
    lp[i] = s * weight_at(a.pos_weights, i) * c * c;
  }
  for (std::size_t i = 0; i < ln.size(); ++i) {
    const double c = std::max(0.0, params.neg_margin - a.neg_distances[i]);
    ln[i] = s * weight_at(a.neg_weights, i) * c * c;
  }
  std::vector<double> sp;
  std::vector<double> sn;
  const double z = log_sum_exp(lp, sp) + log_sum_exp(ln, sn);
  out.loss = softplus(z) / s;
  const double outer = sigmoid(z);
  for (std::size_t i = 0; i < lp.size(); ++i) {
    const double c = std::max(0.0, a.pos_distances[i] - params.pos_margin);
    out.grad_pos[i] = outer * sp[i] * 2.0 * weight_at(a.pos_weights, i) * c;
  }
  for (std::size_t i = 0; i < ln.size(); ++i) {
    const double c = std::max(0.0, params.neg_margin - a.neg_distances[i]);
    out.grad_neg[i] = -outer * sn[i] * 2.0 * weight_at(a.neg_weights, i) * c;
  }
  return out;
}

CircleBatchResult circle_loss_batch(const std::vector<CircleAnchor>& anchors, const CircleLossParams& params) {
  CircleBatchResult out;
  out.per_anchor.reserve(anchors.size());
  for (const auto& a : anchors) {
    out.per_anchor.push_back(circle_loss(a, params));
    if (!a.pos_distances.empty() && !a.neg_distances.empty()) {
      out.loss += out.per_anchor.back().loss;
      ++out.active_anchors;
    }
  }
  if (out.active_anchors > 0) {
    const double inv = 1.0 / out.active_anchors;
    out.loss *= inv;
    for (auto& r : out.per_anchor) {
      for (auto& g : r.grad_pos) g *= inv;
      for (auto& g : r.grad_neg) g *= inv;
    }
  }
  return out;
}

CircleBatchResult scaled_circle_loss_coarse(const std::vector<CircleAnchor>& anchors,
                                            const std::vector<std::vector<double>>& pos_overlaps,
                                            const CircleLossParams& params) {
  if (pos_overlaps.size() != anchors.size()) throw Error(ErrorCode::LengthMismatch, "one overlap list per anchor");
  std::vector<CircleAnchor> scaled = anchors;
  for (std::size_t i = 0; i < scaled.size(); ++i) {
    if (pos_overlaps[i].size() != scaled[i].pos_distances.size()) {
      throw Error(ErrorCode::LengthMismatch, "one overlap per positive pair");
    }
    for (double o : pos_overlaps[i]) {
      if (!(o >= 0.0 && o <= 1.0)) throw Error(ErrorCode::InvalidArgument, "overlap ratios must lie in [0,1]");
    }
    scaled[i].pos_weights = pos_overlaps[i];
    scaled[i].neg_weights.clear();
  }
  return circle_loss_batch(scaled, params);
}

CoarseToFineResult mutual_best(const CoarseToFineResult& matches) {
  const auto& pairs = matches.correspondences.pairs;
  if (matches.point_ids.size() != pairs.size() || matches.pixel_ids.size() != pairs.size()) {
    throw Error(ErrorCode::LengthMismatch, "one point id and one pixel id per pair");
  }
  std::unordered_map<int, std::size_t> best_point, best_pixel;
  auto claim = [&](std::unordered_map<int, std::size_t>& best, int id, std::size_t i) {
    const auto [it, fresh] = best.emplace(id, i);
    if (!fresh && pairs[i].score > pairs[it->second].score) it->second = i;
  };
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    claim(best_point, matches.point_ids[i], i);
    claim(best_pixel, matches.pixel_ids[i], i);
  }
  CoarseToFineResult out = matches;
  out.correspondences.pairs.clear();
  out.point_ids.clear();
  out.pixel_ids.clear();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (best_point[matches.point_ids[i]] != i || best_pixel[matches.pixel_ids[i]] != i) continue;
    out.correspondences.pairs.push_back(pairs[i]);
    out.point_ids.push_back(matches.point_ids[i]);
    out.pixel_ids.push_back(matches.pixel_ids[i]);
  }
  return out;
}

double matching_loss(double augmented_coarse_loss, double fine_loss, double lambda) {
  return augmented_coarse_loss + lambda * fine_loss;
}

}  // namespace diffreg
