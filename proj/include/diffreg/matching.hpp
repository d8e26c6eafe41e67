#pragma once

#include <vector>

#include "diffreg/correspondence.hpp"
#include "diffreg/geometry.hpp"

namespace diffreg {

/// Sparse image-side feature set: pixels with descriptors and, when known,
/// the depth along each pixel's ray.
struct Keypoints {
  std::vector<Vec2> pixels;
  Eigen::MatrixXd features;    // M x F
  std::vector<double> depths;  // empty or one per pixel

  std::size_t size() const { return pixels.size(); }
  void validate() const;
};

/// Every pixel of a dense (H*W) x F feature map as a keypoint.
Keypoints keypoints_from_dense(const Image& image);

/// Rows scaled to unit length; zero rows stay zero.
Eigen::MatrixXd normalize_rows(const Eigen::MatrixXd& m);

/// One pooled image patch of the multi-scale grid.
struct ImagePatch {
  int scale = 1;
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // pixel box [x0,x1) x [y0,y1)
  std::vector<int> members;           // keypoint indices
};

struct PatchPyramid {
  std::vector<ImagePatch> patches;
  Eigen::MatrixXd features;  // one normalized pooled row per patch
};

struct PyramidConfig {
  int cell_size = 32;
  std::vector<int> scales{1, 2, 4};
};

/// Average-pools keypoint features over square cells of cell_size * scale
/// pixels. Empty cells produce no patch; patches are ordered by scale, then
/// row, then column.
PatchPyramid build_patch_pyramid(const Keypoints& keypoints, int width, int height, const PyramidConfig& config = {});

/// A point-cloud superpoint: a node and the points assigned to it.
struct Superpoint {
  Vec3 center = Vec3::Zero();
  std::vector<int> members;
};

struct SuperpointSet {
  std::vector<Superpoint> nodes;
  Eigen::MatrixXd features;  // one normalized pooled row per node
};

/// Farthest-point sampling of `count` nodes (starting from point 0), each
/// point joined to its nearest node (lowest index on ties).
SuperpointSet build_superpoints(const PointCloud& cloud, int count);

struct PatchMatch {
  int superpoint = 0;
  int patch = 0;  // row of the patch feature matrix
  int scale = 1;
  double score = 0.0;
};

/// Top-k patches per superpoint by cosine similarity. Rows are normalized
/// internally when `normalize` is set. Ties go to the lower patch index.
std::vector<PatchMatch> coarse_match(const Eigen::MatrixXd& patch_features, const Eigen::MatrixXd& superpoint_features,
                                     int k, bool normalize = true, const std::vector<int>& patch_scales = {});

/// Members of one matched patch pair at the fine level.
struct FinePatch {
  std::vector<Vec3> points;
  Eigen::MatrixXd point_features;  // P x F
  std::vector<int> point_ids;      // global indices, used for ordering
  std::vector<Vec2> pixels;
  Eigen::MatrixXd pixel_features;  // Q x F
  std::vector<int> pixel_ids;
  std::vector<double> pixel_depths;  // empty or Q entries
};

/// Gathers the members of superpoint `sp` and patch `patch` into a FinePatch.
FinePatch gather_fine_patch(const PointCloud& cloud, const SuperpointSet& superpoints, int sp,
                            const Keypoints& keypoints, const PatchPyramid& pyramid, int patch);

struct FinePair {
  int point = 0;  // local index into FinePatch::points
  int pixel = 0;  // local index into FinePatch::pixels
  double score = 0.0;
};

/// Index form of fine_match.
std::vector<FinePair> fine_match_pairs(const FinePatch& patch, int k);

/// Top-k pixels per point by cosine similarity. Output ordered by
/// (score desc, point id asc, pixel id asc); each pair carries patch_index.
CorrespondenceSet fine_match(const FinePatch& patch, int k, int patch_index = -1);

struct CoarseToFineConfig {
  PyramidConfig pyramid;
  int num_superpoints = 0;  // 0: one per 8 points
  int coarse_k = 3;
  int fine_k = 1;
};

struct CoarseToFineResult {
  SuperpointSet superpoints;
  PatchPyramid pyramid;
  std::vector<PatchMatch> patch_matches;
  /// Merged fine correspondences; duplicates of a (point, pixel) pair keep
  /// the first occurrence in (score desc, point, pixel) order.
  CorrespondenceSet correspondences;
  std::vector<int> point_ids;
  std::vector<int> pixel_ids;
};

CoarseToFineResult match_coarse_to_fine(const PointCloud& cloud, const Keypoints& keypoints, int width, int height,
                                        const CoarseToFineConfig& config = {});

/// Keeps the pairs that score highest among all pairs sharing their point
/// and among all pairs sharing their pixel (earlier pair wins ties).
/// Order is preserved.
CoarseToFineResult mutual_best(const CoarseToFineResult& matches);

struct PairLabelThresholds {
  double fine_pos_3d = 0.0375;
  double fine_pos_2d = 8.0;
  double fine_neg_3d = 0.10;
  double fine_neg_2d = 12.0;
  double coarse_pos_overlap = 0.30;
  double coarse_neg_overlap = 0.20;

  void validate() const;
};

enum class PairLabel { Positive, Negative, Ignored };

/// 3D distance |T(x) - K^-1(y, depth)| and 2D distance |K(T(x)) - y|.
/// Pairs behind the camera have infinite 2D distance.
std::vector<PairLabel> label_pairs(const CorrespondenceSet& corr, const Pose& gt_pose, const CameraIntrinsics& K,
                                   const PairLabelThresholds& thresholds = {});

/// Coarse label from bilateral overlap ratios.
PairLabel label_patch_pair(double image_overlap, double point_overlap, const PairLabelThresholds& thresholds = {});

struct CircleLossParams {
  double pos_margin = 0.1;
  double neg_margin = 1.4;
  /// Log-sum-exp scale; 24 as in the reference matcher configuration.
  double scale = 24.0;

  void validate() const;
};

/// Distances and per-pair scaling factors of one anchor descriptor. Empty
/// weight vectors mean 1 for every pair.
struct CircleAnchor {
  std::vector<double> pos_distances;
  std::vector<double> neg_distances;
  std::vector<double> pos_weights;
  std::vector<double> neg_weights;
};

struct CircleLossResult {
  double loss = 0.0;
  std::vector<double> grad_pos;
  std::vector<double> grad_neg;
};

/// (1/s) log(1 + sum_p exp(a_p) * sum_n exp(b_n)) with
/// a_p = s l_p max(0, d_p - m_p)^2 and b_n = s l_n max(0, m_n - d_n)^2,
/// evaluated through log-sum-exp and softplus. The weights clamp at zero
/// so satisfied pairs stop contributing. Gradients are d loss / d distance.
CircleLossResult circle_loss(const CircleAnchor& anchor, const CircleLossParams& params = {});

/// Mean circle loss over anchors holding at least one positive and one
/// negative; gradients are those of the mean.
struct CircleBatchResult {
  double loss = 0.0;
  int active_anchors = 0;
  std::vector<CircleLossResult> per_anchor;
};

CircleBatchResult circle_loss_batch(const std::vector<CircleAnchor>& anchors, const CircleLossParams& params = {});

/// Coarse variant: positive scaling is the pair's overlap ratio, negative
/// scaling is 1.
CircleBatchResult scaled_circle_loss_coarse(const std::vector<CircleAnchor>& anchors,
                                            const std::vector<std::vector<double>>& pos_overlaps,
                                            const CircleLossParams& params = {});

/// L_aug + lambda * L_f; L_aug is the scaled coarse loss on the designated
/// feature level.
double matching_loss(double augmented_coarse_loss, double fine_loss, double lambda);

/// l2 distance between unit-normalized descriptors.
double feature_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

}  // namespace diffreg
