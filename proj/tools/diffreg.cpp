// diffreg command-line front end. Exit codes: 0 success, 1 internal failure,
// 2 bad input, 3 no RANSAC consensus, 4 gradient check failure, 5 score
// provider failure.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "diffreg/csd.hpp"
#include "diffreg/dct.hpp"
#include "diffreg/depth.hpp"
#include "diffreg/gradcheck.hpp"
#include "diffreg/io.hpp"
#include "diffreg/matching.hpp"
#include "diffreg/metrics.hpp"
#include "diffreg/pnp.hpp"
#include "diffreg/synth.hpp"

namespace fs = std::filesystem;
using namespace diffreg;
using ojson = nlohmann::ordered_json;

namespace {

constexpr int kExitBadInput = 2;
constexpr int kExitNoConsensus = 3;
constexpr int kExitGradcheck = 4;
constexpr int kExitProvider = 5;

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::NoConsensus:
      return kExitNoConsensus;
    case ErrorCode::ProviderFailure:
      return kExitProvider;
    case ErrorCode::NumericalFailure:
    case ErrorCode::SingularHessian:
    case ErrorCode::NotStationary:
    case ErrorCode::StaleProvenance:
    case ErrorCode::ProvenanceMissing:
      return 1;
    default:
      return kExitBadInput;
  }
}

std::string csv_number(double v) { return format_double(v); }

// Threshold flags shared by register and metrics.
struct ThresholdFlags {
  std::string preset = "maintext";
  std::map<std::string, double> custom;
  std::vector<CLI::Option*> options;

  void add(CLI::App* cmd) {
    cmd->add_option("--thresholds", preset, "Metric thresholds: maintext (5 cm / 10 %), appendix (10 cm / 5 %) or custom")
        ->check(CLI::IsMember({"maintext", "appendix", "custom"}))
        ->capture_default_str();
    const std::pair<const char*, const char*> taus[] = {
        {"--tau1", "Inlier distance (m), custom thresholds only"},
        {"--tau2", "FMR inlier-ratio cutoff, custom thresholds only"},
        {"--tau3", "Patch overlap 3D distance (m), custom thresholds only"},
        {"--tau4", "Patch overlap 2D distance (px), custom thresholds only"},
        {"--tau5", "Patch overlap cutoff, custom thresholds only"},
        {"--tau6", "Registration recall RMSE cutoff (m), custom thresholds only"},
    };
    for (const auto& [name, help] : taus) {
      options.push_back(cmd->add_option_function<double>(
          name, [this, key = std::string(name)](double v) { custom[key] = v; }, help));
    }
  }

  MetricThresholds resolve() const {
    if (preset != "custom") {
      if (!custom.empty()) throw Error(ErrorCode::InvalidArgument, "--tau* flags need --thresholds custom");
      return MetricThresholds::preset(preset);
    }
    MetricThresholds t = MetricThresholds::maintext();
    auto take = [&](const char* key, double& slot) {
      if (auto it = custom.find(key); it != custom.end()) slot = it->second;
    };
    take("--tau1", t.inlier_distance);
    take("--tau2", t.fmr_inlier_ratio);
    take("--tau3", t.patch_distance_3d);
    take("--tau4", t.patch_distance_2d);
    take("--tau5", t.patch_overlap);
    take("--tau6", t.rmse_recall);
    t.validate();
    return t;
  }
};

void write_reports(const EvalReport& report, const std::string& json_path, const std::string& csv_path,
                   const std::optional<ojson>& extra = std::nullopt) {
  if (!json_path.empty()) {
    ojson j = ojson::parse(report_to_json(report));
    if (extra) {
      for (const auto& [k, v] : extra->items()) j[k] = v;
    }
    write_text(json_path, j.dump(2) + "\n");
  }
  if (!csv_path.empty()) write_text(csv_path, report_to_csv(report));
}

bool all_have_depth(const CorrespondenceSet& corr) {
  return std::all_of(corr.pairs.begin(), corr.pairs.end(), [](const Correspondence& c) { return c.pixel_depth.has_value(); });
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::string out;
  SceneSpec spec;
  std::string layout = "box";
  double focal = 500.0;
  int width = 640, height = 480;
  std::vector<double> init;
};

void add_synth(CLI::App& app, SynthArgs& a, std::function<int()>& run) {
  auto* cmd = app.add_subcommand("synth", "Generate a synthetic scene with ground truth");
  cmd->add_option("--out", a.out, "Output directory")->required();
  cmd->add_option("--seed", a.spec.seed, "Root seed")->capture_default_str();
  cmd->add_option("--points", a.spec.num_points, "Number of points")->check(CLI::Range(1, 1 << 30))->capture_default_str();
  cmd->add_option("--extent", a.spec.extent, "Depth span of the sampled volume (m)")->capture_default_str();
  cmd->add_option("--min-depth", a.spec.min_depth, "Nearest sampled depth (m)")->capture_default_str();
  cmd->add_option("--max-rotation", a.spec.max_rotation_deg, "Largest ground-truth rotation (deg)")->capture_default_str();
  cmd->add_option("--max-translation", a.spec.max_translation, "Largest ground-truth translation (m)")
      ->capture_default_str();
  cmd->add_option("--pixel-noise", a.spec.pixel_noise, "Pixel noise sigma (px)")->capture_default_str();
  cmd->add_option("--point-noise", a.spec.point_noise, "3D point noise sigma (m)")->capture_default_str();
  cmd->add_option("--outliers", a.spec.outlier_fraction, "Outlier fraction in [0,1]")->capture_default_str();
  cmd->add_option("--feature-dim", a.spec.feature_dim, "Descriptor length")->capture_default_str();
  cmd->add_option("--feature-noise", a.spec.feature_noise, "Descriptor perturbation sigma")->capture_default_str();
  cmd->add_option("--layout", a.layout, "Point layout: box or surface")
      ->check(CLI::IsMember({"box", "surface"}))
      ->capture_default_str();
  cmd->add_option("--focal", a.focal, "Focal length (px)")->capture_default_str();
  cmd->add_option("--width", a.width, "Image width (px)")->capture_default_str();
  cmd->add_option("--height", a.height, "Image height (px)")->capture_default_str();
  cmd->add_option("--init", a.init, "Also write init_pose.json: ground truth rotated by DEG and shifted by M")
      ->expected(2)
      ->check(CLI::NonNegativeNumber);
  cmd->callback([&] {
    run = [&] {
      a.spec.layout = a.layout == "surface" ? SceneLayout::Surface : SceneLayout::UniformBox;
      a.spec.intrinsics = {a.focal, a.focal, a.width / 2.0, a.height / 2.0, a.width, a.height};
      const Scene s = generate_scene(a.spec);
      const fs::path dir(a.out);
      fs::create_directories(dir);
      write_point_cloud(dir / "cloud.txt", s.cloud);
      write_intrinsics(dir / "intrinsics.json", s.K);
      write_pose(dir / "gt_pose.json", s.gt_pose);
      write_ppm(dir / "image.ppm", s.image);
      write_keypoints(dir / "keypoints.dfi", dir / "keypoints.json", s.keypoints, s.K.width, s.K.height);
      write_correspondences(dir / "correspondences.csv", s.correspondences, true);
      write_pfm(dir / "sparse_depth.pfm", render_sparse_depth(s.cloud.points, s.gt_pose, s.K).depth);
      if (!a.init.empty()) {
        write_pose(dir / "init_pose.json", perturb_pose(s.gt_pose, a.init[0], a.init[1], derive_seed(a.spec.seed, "synth-init")));
      }

      ojson m;
      m["seed"] = a.spec.seed;
      m["points"] = a.spec.num_points;
      m["layout"] = a.layout;
      m["pixel_noise"] = a.spec.pixel_noise;
      m["point_noise"] = a.spec.point_noise;
      m["outlier_fraction"] = a.spec.outlier_fraction;
      m["feature_dim"] = a.spec.feature_dim;
      m["files"] = {{"cloud", "cloud.txt"},
                    {"intrinsics", "intrinsics.json"},
                    {"gt_pose", "gt_pose.json"},
                    {"image", "image.ppm"},
                    {"keypoints", "keypoints.dfi"},
                    {"keypoints_sidecar", "keypoints.json"},
                    {"correspondences", "correspondences.csv"},
                    {"sparse_depth", "sparse_depth.pfm"}};
      if (!a.init.empty()) m["files"]["init_pose"] = "init_pose.json";
      std::vector<int> outliers;
      for (std::size_t i = 0; i < s.is_outlier.size(); ++i) {
        if (s.is_outlier[i]) outliers.push_back(static_cast<int>(i));
      }
      m["outlier_pairs"] = outliers;
      write_text(dir / "manifest.json", m.dump(2) + "\n");
      std::cout << "wrote scene to " << dir.string() << " (" << s.cloud.size() << " points, " << outliers.size()
                << " outlier pairs)\n";
      return 0;
    };
  });
}

// ---------------------------------------------------------------- match

struct MatchFlags {
  std::string cloud, keypoints, sidecar;
  int superpoints = 0, coarse_k = 3, fine_k = 1, cell_size = 32;
  bool all_pairs = false;

  void add(CLI::App* cmd) {
    cmd->add_option("--cloud", cloud, "Point cloud with per-point features")->required()->check(CLI::ExistingFile);
    cmd->add_option("--keypoints", keypoints, "Image feature blob")->required()->check(CLI::ExistingFile);
    cmd->add_option("--sidecar", sidecar, "Feature blob sidecar JSON")->required()->check(CLI::ExistingFile);
    cmd->add_option("--superpoints", superpoints, "Superpoint count (0: one per 8 points)")->capture_default_str();
    cmd->add_option("--coarse-k", coarse_k, "Patches kept per superpoint")->capture_default_str();
    cmd->add_option("--fine-k", fine_k, "Pixels kept per point inside a patch pair")->capture_default_str();
    cmd->add_option("--cell-size", cell_size, "Finest patch size (px); scales 1, 2, 4")->capture_default_str();
    cmd->add_flag("--all-pairs", all_pairs, "Keep every fine pair instead of mutual best matches");
  }

  struct Loaded {
    PointCloud cloud;
    Keypoints keypoints;
    int width = 0, height = 0;
    CoarseToFineResult raw;
    CoarseToFineResult kept;
  };

  Loaded run() const {
    Loaded l;
    l.cloud = read_point_cloud(cloud);
    l.keypoints = read_keypoints(keypoints, sidecar, l.width, l.height);
    CoarseToFineConfig cfg;
    cfg.num_superpoints = superpoints;
    cfg.coarse_k = coarse_k;
    cfg.fine_k = fine_k;
    cfg.pyramid.cell_size = cell_size;
    l.raw = match_coarse_to_fine(l.cloud, l.keypoints, l.width, l.height, cfg);
    l.kept = all_pairs ? l.raw : mutual_best(l.raw);
    return l;
  }
};

struct MatchArgs {
  MatchFlags flags;
  std::string out;
};

void add_match(CLI::App& app, MatchArgs& a, std::function<int()>& run) {
  auto* cmd = app.add_subcommand("match", "Coarse-to-fine 2D-3D feature matching");
  a.flags.add(cmd);
  cmd->add_option("--out", a.out, "Output correspondence CSV")->required();
  cmd->callback([&] {
    run = [&] {
      const auto l = a.flags.run();
      write_correspondences(a.out, l.kept.correspondences, all_have_depth(l.kept.correspondences));
      std::cout << l.kept.correspondences.size() << " correspondences (" << l.raw.correspondences.size()
                << " before filtering)\n";
      return 0;
    };
  });
}

// ---------------------------------------------------------------- pnp / ransac

struct PnPArgs {
  std::string corr, intrinsics, out, init;
  RefineOptions refine;
};

void add_refine_flags(CLI::App* cmd, RefineOptions& r) {
  cmd->add_option("--max-iters", r.max_iters, "Refinement iteration cap")->capture_default_str();
  cmd->add_option("--tol", r.tol, "Refinement tolerance on the cost gradient")->capture_default_str();
}

void add_pnp(CLI::App& app, PnPArgs& a, std::function<int()>& run) {
  auto* cmd = app.add_subcommand("pnp", "EPnP followed by Gauss-Newton refinement");
  cmd->add_option("--corr", a.corr, "Correspondence CSV")->required()->check(CLI::ExistingFile);
  cmd->add_option("--intrinsics", a.intrinsics, "Camera intrinsics JSON")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", a.out, "Output pose JSON")->required();
  cmd->add_option("--init", a.init, "Start refinement from this pose instead of EPnP")->check(CLI::ExistingFile);
  add_refine_flags(cmd, a.refine);
  cmd->callback([&] {
    run = [&] {
      const auto corr = read_correspondences(a.corr);
      const auto K = read_intrinsics(a.intrinsics);
      const PnPResult r =
          a.init.empty() ? solve_pnp(corr, K, a.refine) : refine_pose(read_pose(a.init), corr, K, a.refine);
      write_pose(a.out, r.pose);
      std::cout << "reprojection_rmse " << format_double(r.reprojection_rmse) << " iterations " << r.iterations
                << (r.converged ? "" : " (not converged)") << "\n";
      return 0;
    };
  });
}

struct RansacArgs {
  std::string corr, intrinsics, out, inliers;
  RansacOptions opt;
};

void add_ransac_flags(CLI::App* cmd, RansacOptions& o) {
  cmd->add_option("--threshold", o.threshold_px, "Inlier reprojection threshold (px)")->capture_default_str();
  cmd->add_option("--ransac-iters", o.max_iters, "RANSAC hypothesis count")->capture_default_str();
}

void add_ransac(CLI::App& app, RansacArgs& a, std::function<int()>& run) {
  auto* cmd = app.add_subcommand("ransac", "Robust PnP with RANSAC and refinement on the inliers");
  cmd->add_option("--corr", a.corr, "Correspondence CSV")->required()->check(CLI::ExistingFile);
  cmd->add_option("--intrinsics", a.intrinsics, "Camera intrinsics JSON")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", a.out, "Output pose JSON")->required();
  cmd->add_option("--inliers", a.inliers, "Write the inlier mask, one 0/1 per pair");
  cmd->add_option("--seed", a.opt.seed, "Root seed")->capture_default_str();
  add_ransac_flags(cmd, a.opt);
  add_refine_flags(cmd, a.opt.refine);
  cmd->callback([&] {
    run = [&] {
      const auto corr = read_correspondences(a.corr);
      const auto K = read_intrinsics(a.intrinsics);
      RansacOptions opt = a.opt;
      opt.seed = derive_seed(a.opt.seed, "ransac");
      const auto r = ransac_pnp(corr, K, opt);
      write_pose(a.out, r.result.pose);
      if (!a.inliers.empty()) {
        std::string mask;
        for (bool b : r.inlier_mask) mask += b ? "1\n" : "0\n";
        write_text(a.inliers, mask);
      }
      std::cout << r.num_inliers << "/" << corr.size() << " inliers, reprojection_rmse "
                << format_double(r.result.reprojection_rmse) << "\n";
      return 0;
    };
  });
}

// ---------------------------------------------------------------- register

struct RegisterArgs {
  MatchFlags match;
  std::string intrinsics, out, gt_pose, report_json, report_csv, offset_weights, corr_out;
  int tune_steps = 0;
  RansacOptions ransac;
  std::uint64_t seed = 0;
  double alpha = 1.0, beta = 1.0, gamma = 1.0, lambda = 1.0, mu = 0.1;
  ThresholdFlags thresholds;
};

// Training-side loss terms at the ground truth: fine circle loss over point
// anchors, overlap-scaled coarse circle loss over superpoint anchors, and the
// offset loss.
ojson training_losses(const RegisterArgs& a, const MatchFlags::Loaded& l, const CameraIntrinsics& K, const Pose& gt,
                      const CorrespondenceSet& matched, const std::vector<Vec3>& offsets) {
  const PairLabelThresholds labels;
  const auto& fine = l.raw.correspondences;
  const auto fine_labels = label_pairs(fine, gt, K, labels);
  std::map<int, CircleAnchor> by_point;
  for (std::size_t i = 0; i < fine.size(); ++i) {
    const double d = feature_distance(fine.pairs[i].point_feature, fine.pairs[i].pixel_feature);
    auto& anchor = by_point[l.raw.point_ids[i]];
    if (fine_labels[i] == PairLabel::Positive) anchor.pos_distances.push_back(d);
    if (fine_labels[i] == PairLabel::Negative) anchor.neg_distances.push_back(d);
  }
  std::vector<CircleAnchor> fine_anchors;
  for (auto& [id, anchor] : by_point) fine_anchors.push_back(std::move(anchor));
  const double fine_loss = circle_loss_batch(fine_anchors).loss;

  std::map<int, std::pair<CircleAnchor, std::vector<double>>> by_node;
  for (const auto& pm : l.raw.patch_matches) {
    PatchPairMembers members;
    for (int m : l.raw.superpoints.nodes[static_cast<std::size_t>(pm.superpoint)].members) {
      members.points.push_back(l.cloud.points[static_cast<std::size_t>(m)]);
    }
    for (int m : l.raw.pyramid.patches[static_cast<std::size_t>(pm.patch)].members) {
      members.pixels.push_back(l.keypoints.pixels[static_cast<std::size_t>(m)]);
      members.pixel_depths.push_back(l.keypoints.depths[static_cast<std::size_t>(m)]);
    }
    const auto ov = patch_overlap(members, gt, K, labels.fine_pos_3d, labels.fine_pos_2d);
    const double d = feature_distance(l.raw.superpoints.features.row(pm.superpoint).transpose(),
                                      l.raw.pyramid.features.row(pm.patch).transpose());
    auto& [anchor, overlaps] = by_node[pm.superpoint];
    switch (label_patch_pair(ov.image_side, ov.point_side, labels)) {
      case PairLabel::Positive:
        anchor.pos_distances.push_back(d);
        overlaps.push_back(std::min(ov.image_side, ov.point_side));
        break;
      case PairLabel::Negative:
        anchor.neg_distances.push_back(d);
        break;
      case PairLabel::Ignored:
        break;
    }
  }
  std::vector<CircleAnchor> coarse_anchors;
  std::vector<std::vector<double>> coarse_overlaps;
  for (auto& [id, entry] : by_node) {
    coarse_anchors.push_back(entry.first);
    coarse_overlaps.push_back(entry.second);
  }
  const double coarse_loss = scaled_circle_loss_coarse(coarse_anchors, coarse_overlaps).loss;
  const double matching = matching_loss(coarse_loss, fine_loss, a.lambda);
  const double offset = offset_loss(matched, offsets, gt, K, a.mu).loss;

  ojson j;
  j["coarse"] = coarse_loss;
  j["fine"] = fine_loss;
  j["matching"] = matching;
  j["offset"] = offset;
  // The CSD term needs a score provider; csd-optimize evaluates it.
  j["csd"] = nullptr;
  j["total"] = a.alpha * matching + a.beta * offset;
  return j;
}

void add_register(CLI::App& app, RegisterArgs& a, std::function<int()>& run) {
  auto* cmd = app.add_subcommand(
      "register", "Full pipeline: matching, optional offset tuning, RANSAC PnP, refinement and evaluation");
  a.match.add(cmd);
  cmd->add_option("--intrinsics", a.intrinsics, "Camera intrinsics JSON")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", a.out, "Output pose JSON")->required();
  cmd->add_option("--corr-out", a.corr_out, "Also write the correspondences handed to RANSAC");
  cmd->add_option("--gt-pose", a.gt_pose, "Ground-truth pose; enables the report and loss terms")
      ->check(CLI::ExistingFile);
  cmd->add_option("--report-json", a.report_json, "Evaluation report (JSON); needs --gt-pose");
  cmd->add_option("--report-csv", a.report_csv, "Evaluation report (CSV); needs --gt-pose");
  cmd->add_option("--offset-weights", a.offset_weights, "Offset network manifest; shifts points before solving")
      ->check(CLI::ExistingFile);
  cmd->add_option("--tune-offsets", a.tune_steps, "Tune per-pair offsets against --gt-pose for this many steps")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  cmd->add_option("--seed", a.seed, "Root seed")->capture_default_str();
  add_ransac_flags(cmd, a.ransac);
  add_refine_flags(cmd, a.ransac.refine);
  cmd->add_option("--alpha", a.alpha, "Weight of the matching loss")->check(CLI::NonNegativeNumber)->capture_default_str();
  cmd->add_option("--beta", a.beta, "Weight of the offset loss")->check(CLI::NonNegativeNumber)->capture_default_str();
  cmd->add_option("--gamma", a.gamma, "Weight of the CSD loss")->check(CLI::NonNegativeNumber)->capture_default_str();
  cmd->add_option("--lambda", a.lambda, "Weight of the fine matching term")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  cmd->add_option("--mu", a.mu, "Offset magnitude regularizer")->check(CLI::NonNegativeNumber)->capture_default_str();
  a.thresholds.add(cmd);
  cmd->callback([&] {
    run = [&] {
      const MetricThresholds thresholds = a.thresholds.resolve();
      const auto K = read_intrinsics(a.intrinsics);
      if (a.gt_pose.empty() && (a.tune_steps > 0 || !a.report_json.empty() || !a.report_csv.empty())) {
        throw Error(ErrorCode::InvalidArgument, "--tune-offsets and the reports need --gt-pose");
      }
      const std::optional<Pose> gt = a.gt_pose.empty() ? std::nullopt : std::optional<Pose>(read_pose(a.gt_pose));
      const auto l = a.match.run();
      const CorrespondenceSet& matched = l.kept.correspondences;

      std::vector<Vec3> offsets(matched.size(), Vec3::Zero());
      if (!a.offset_weights.empty()) {
        offsets = predict_offsets(OffsetNetwork::load(a.offset_weights), assemble_pair_features(matched, K));
      }
      if (a.tune_steps > 0) offsets = tune_offsets(apply_offsets(matched, offsets), *gt, K, a.mu, a.tune_steps).offsets;
      const CorrespondenceSet corr = apply_offsets(matched, offsets);
      if (!a.corr_out.empty()) write_correspondences(a.corr_out, corr, all_have_depth(corr));

      RansacOptions opt = a.ransac;
      opt.seed = derive_seed(a.seed, "register-ransac");
      const auto r = ransac_pnp(corr, K, opt);
      write_pose(a.out, r.result.pose);
      std::cout << r.num_inliers << "/" << corr.size() << " inliers";
      if (gt) {
        PairReport pr;
        pr.name = fs::path(a.match.cloud).stem().string();
        pr.inlier_ratio = all_have_depth(matched) ? inlier_ratio(matched, *gt, K, thresholds.inlier_distance) : 0.0;
        pr.rmse = registration_rmse(l.cloud.points, *gt, r.result.pose);
        const auto err = relative_pose_errors(*gt, r.result.pose);
        pr.rre_deg = err.rre_deg;
        pr.rte = err.rte;
        const EvalReport report = summarize({pr}, thresholds);
        ojson extra;
        extra["weights"] = {{"alpha", a.alpha}, {"beta", a.beta}, {"gamma", a.gamma}, {"lambda", a.lambda}, {"mu", a.mu}};
        if (!l.keypoints.depths.empty() && all_have_depth(matched)) {
          extra["losses"] = training_losses(a, l, K, *gt, matched, offsets);
        }
        write_reports(report, a.report_json, a.report_csv, extra);
        std::cout << ", rmse " << format_double(pr.rmse) << " m, rre " << format_double(pr.rre_deg) << " deg, rte "
                  << format_double(pr.rte) << " m";
      }
      std::cout << "\n";
      return 0;
    };
  });
}

// ---------------------------------------------------------------- densify

struct DensifyArgs {
  std::string in, cloud, pose, intrinsics, out, mask, latent_out;
  std::vector<int> latent;
  DensifyConfig config;
  bool hard = false;
};

void add_densify(CLI::App& app, DensifyArgs& a, std::function<int()>& run) {
  auto* cmd = app.add_subcommand("densify", "Morphological completion of a sparse depth map");
  auto* in = cmd->add_option("--in", a.in, "Sparse depth PFM")->check(CLI::ExistingFile);
  auto* cloud = cmd->add_option("--cloud", a.cloud, "Render the sparse depth from this cloud instead")
                    ->check(CLI::ExistingFile);
  cmd->add_option("--pose", a.pose, "Pose used with --cloud")->check(CLI::ExistingFile)->needs(cloud);
  cmd->add_option("--intrinsics", a.intrinsics, "Intrinsics used with --cloud")->check(CLI::ExistingFile)->needs(cloud);
  cmd->add_flag("--hard", a.hard, "Nearest-pixel rasterization instead of bilinear splats (with --cloud)");
  in->excludes(cloud);
  cmd->add_option("--out", a.out, "Dense depth PFM")->required();
  cmd->add_option("--mask", a.mask, "Occupancy mask PGM of the dense depth");
  cmd->add_option("--latent", a.latent, "Also resize to h w")->expected(2)->check(CLI::Range(1, 1 << 20));
  cmd->add_option("--latent-out", a.latent_out, "Resized depth PFM (default: <out stem>.latent.pfm)");
  cmd->add_option("--threshold", a.config.threshold, "Smallest valid depth (m)")->capture_default_str();
  cmd->add_option("--max-depth", a.config.max_depth, "Inversion constant and largest depth (m)")->capture_default_str();
  cmd->callback([&] {
    run = [&] {
      DepthMap sparse;
      if (!a.in.empty()) {
        sparse = read_pfm(a.in);
      } else if (!a.cloud.empty()) {
        if (a.pose.empty() || a.intrinsics.empty()) {
          throw Error(ErrorCode::InvalidArgument, "--cloud needs --pose and --intrinsics");
        }
        RenderOptions ro;
        ro.mode = a.hard ? RasterMode::Hard : RasterMode::Splat;
        sparse = render_sparse_depth(read_point_cloud(a.cloud).points, read_pose(a.pose), read_intrinsics(a.intrinsics), ro)
                     .depth;
      } else {
        throw Error(ErrorCode::InvalidArgument, "one of --in or --cloud is required");
      }
      const DepthMap dense = densify(sparse, a.config);
      write_pfm(a.out, dense);
      if (!a.mask.empty()) write_mask_pgm(a.mask, dense);
      if (!a.latent.empty()) {
        fs::path lo = a.latent_out;
        if (lo.empty()) lo = fs::path(a.out).replace_extension(".latent.pfm");
        write_pfm(lo, resize_to_latent(dense, a.latent[0], a.latent[1]));
      }
      std::cout << sparse.occupied_count() << " sparse -> " << dense.occupied_count() << " dense pixels\n";
      return 0;
    };
  });
}

// ---------------------------------------------------------------- gradcheck

struct GradcheckArgs {
  std::vector<std::string> suites;
  GradcheckOptions opt;
};

void add_gradcheck(CLI::App& app, GradcheckArgs& a, std::function<int()>& run) {
  auto* cmd = app.add_subcommand("gradcheck", "Finite-difference checks of every analytic gradient");
  cmd->add_option("--suite", a.suites, "Run only these suites (repeatable): bpnp, circle, offset, depth, csd")
      ->check(CLI::IsMember(gradcheck_suites()));
  cmd->add_option("--seed", a.opt.seed, "Root seed")->capture_default_str();
  cmd->add_flag("--inject-sign-flip", a.opt.flip_sign, "Test hook: negate the analytic gradients");
  cmd->callback([&] {
    run = [&] {
      std::vector<GradcheckResult> results;
      for (const auto& name : gradcheck_suites()) {
        if (!a.suites.empty() && std::find(a.suites.begin(), a.suites.end(), name) == a.suites.end()) continue;
        results.push_back(run_gradcheck_suite(name, a.opt));
      }
      std::cout << format_gradcheck_table(results);
      const bool ok = std::all_of(results.begin(), results.end(), [](const GradcheckResult& r) { return r.passed(); });
      return ok ? 0 : kExitGradcheck;
    };
  });
}

// ---------------------------------------------------------------- csd-optimize

struct CSDArgs {
  std::string cloud, intrinsics, init_pose, target_pose, provider, image_ref, trajectory, out, weighting = "constant";
  std::vector<int> latent;
  int steps = 300;
  double lr = 1e-4;
  int timeout_ms = 30000;
  CSDConfig config;
};

void add_csd(CLI::App& app, CSDArgs& a, std::function<int()>& run) {
  auto* cmd = app.add_subcommand("csd-optimize", "Descend on the pose with score-distillation gradients");
  cmd->add_option("--cloud", a.cloud, "Point cloud")->required()->check(CLI::ExistingFile);
  cmd->add_option("--intrinsics", a.intrinsics, "Camera intrinsics JSON")->required()->check(CLI::ExistingFile);
  cmd->add_option("--init-pose", a.init_pose, "Starting pose")->required()->check(CLI::ExistingFile);
  cmd->add_option("--provider", a.provider,
                  "Score provider: mock:zero, mock:random_seeded, mock:depth_target or bridge:<address>")
      ->required()
      ->check(
          [](const std::string& v) -> std::string {
            if (v == "mock:zero" || v == "mock:random_seeded" || v == "mock:depth_target") return "";
            if (v.rfind("bridge:", 0) == 0 && v.size() > 7) return "";
            return "unknown provider '" + v + "'";
          },
          "PROVIDER");
  cmd->add_option("--target-pose", a.target_pose, "Pose whose rendered depth mock:depth_target aims for")
      ->check(CLI::ExistingFile);
  cmd->add_option("--image-ref", a.image_ref, "Image reference passed to the provider")->capture_default_str();
  cmd->add_option("--steps", a.steps, "Optimization steps")->check(CLI::Range(1, 1 << 30))->capture_default_str();
  cmd->add_option("--lr", a.lr, "Initial step size")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--seed", a.config.seed, "Root seed")->capture_default_str();
  cmd->add_option("--latent", a.latent, "Latent grid h w (default: image size / 8)")
      ->expected(2)
      ->check(CLI::Range(1, 1 << 20));
  cmd->add_option("--weighting", a.weighting, "Timestep weighting: constant or sigma")
      ->check(CLI::IsMember({"constant", "sigma"}))
      ->capture_default_str();
  cmd->add_option("--t-min", a.config.t_min, "Smallest sampled timestep")->capture_default_str();
  cmd->add_option("--t-max", a.config.t_max, "Largest sampled timestep")->capture_default_str();
  cmd->add_option("--samples", a.config.samples, "Noise samples averaged per step")->capture_default_str();
  cmd->add_option("--patience", a.config.patience, "Stop after this many rejected steps in a row (0: never)")
      ->capture_default_str();
  cmd->add_option("--max-backtracks", a.config.max_backtracks, "Step halvings tried per step")->capture_default_str();
  cmd->add_flag("--optimize-offsets", a.config.optimize_offsets, "Also descend on per-point offsets");
  cmd->add_option("--timeout-ms", a.timeout_ms, "Bridge request timeout (ms)")->capture_default_str();
  cmd->add_option("--trajectory", a.trajectory, "Per-step trajectory CSV");
  cmd->add_option("--out", a.out, "Final pose JSON")->required();
  cmd->callback([&] {
    run = [&] {
      const auto cloud = read_point_cloud(a.cloud);
      const auto K = read_intrinsics(a.intrinsics);
      const Pose init = read_pose(a.init_pose);
      CSDConfig cfg = a.config;
      cfg.weighting = a.weighting == "sigma" ? TimestepWeighting::Sigma : TimestepWeighting::Constant;
      if (!a.latent.empty()) {
        cfg.chain.latent_height = a.latent[0];
        cfg.chain.latent_width = a.latent[1];
      }
      cfg.validate();

      std::unique_ptr<ScoreProvider> provider;
      if (a.provider == "mock:zero") {
        provider = make_mock_provider(MockKind::Zero);
      } else if (a.provider == "mock:random_seeded") {
        provider = make_mock_provider(MockKind::RandomSeeded);
      } else if (a.provider == "mock:depth_target") {
        if (a.target_pose.empty()) throw Error(ErrorCode::MissingTarget, "mock:depth_target needs --target-pose");
        const auto target = render_depth_chain(cloud.points, read_pose(a.target_pose), K, cfg.chain);
        provider = make_mock_provider(MockKind::DepthTarget, target.latent);
      } else {
        provider = std::make_unique<BridgeProvider>(a.provider.substr(7), std::chrono::milliseconds(a.timeout_ms));
      }

      const auto traj = csd_optimize(init, cloud.points, a.image_ref, K, *provider, cfg, a.steps, a.lr);
      write_pose(a.out, traj.final_pose);
      if (!a.trajectory.empty()) {
        std::ostringstream os;
        os << "step,surrogate,t,w_t,lr,accepted,rx,ry,rz,tx,ty,tz\n";
        for (const auto& s : traj.steps) {
          os << s.step << ',' << csv_number(s.surrogate) << ',' << csv_number(s.t) << ',' << csv_number(s.w_t) << ','
             << csv_number(s.lr) << ',' << (s.accepted ? 1 : 0);
          for (int i = 0; i < 6; ++i) os << ',' << csv_number(s.pose.tangent()[i]);
          os << '\n';
        }
        write_text(a.trajectory, os.str());
      }
      const double first = traj.steps.empty() ? traj.final_surrogate : traj.steps.front().surrogate;
      std::cout << traj.steps.size() << " steps, surrogate " << format_double(first) << " -> "
                << format_double(traj.final_surrogate) << "\n";
      return 0;
    };
  });
}

// ---------------------------------------------------------------- metrics

struct MetricsArgs {
  std::string cloud, gt_pose, pred_pose, corr, intrinsics, name, json, csv;
  ThresholdFlags thresholds;
};

void add_metrics(CLI::App& app, MetricsArgs& a, std::function<int()>& run) {
  auto* cmd = app.add_subcommand("metrics", "Evaluate a predicted pose against ground truth");
  cmd->add_option("--cloud", a.cloud, "Point cloud")->required()->check(CLI::ExistingFile);
  cmd->add_option("--gt-pose", a.gt_pose, "Ground-truth pose")->required()->check(CLI::ExistingFile);
  cmd->add_option("--pred-pose", a.pred_pose, "Predicted pose")->required()->check(CLI::ExistingFile);
  auto* corr = cmd->add_option("--corr", a.corr, "Correspondence CSV with a depth column (for the inlier ratio)")
                   ->check(CLI::ExistingFile);
  cmd->add_option("--intrinsics", a.intrinsics, "Camera intrinsics JSON, required with --corr")
      ->check(CLI::ExistingFile)
      ->needs(corr);
  cmd->add_option("--name", a.name, "Pair name in the report (default: cloud file stem)");
  cmd->add_option("--json", a.json, "Report JSON path (default: stdout)");
  cmd->add_option("--csv", a.csv, "Report CSV path");
  a.thresholds.add(cmd);
  cmd->callback([&] {
    run = [&] {
      const MetricThresholds t = a.thresholds.resolve();
      const auto cloud = read_point_cloud(a.cloud);
      const Pose gt = read_pose(a.gt_pose);
      const Pose pred = read_pose(a.pred_pose);
      PairReport pr;
      pr.name = a.name.empty() ? fs::path(a.cloud).stem().string() : a.name;
      pr.rmse = registration_rmse(cloud.points, gt, pred);
      const auto err = relative_pose_errors(gt, pred);
      pr.rre_deg = err.rre_deg;
      pr.rte = err.rte;
      if (!a.corr.empty()) {
        if (a.intrinsics.empty()) throw Error(ErrorCode::InvalidArgument, "--corr needs --intrinsics");
        pr.inlier_ratio = inlier_ratio(read_correspondences(a.corr), gt, read_intrinsics(a.intrinsics), t.inlier_distance);
      }
      const EvalReport report = summarize({pr}, t);
      if (a.json.empty()) {
        std::cout << report_to_json(report) << "\n";
      }
      write_reports(report, a.json, a.csv);
      return 0;
    };
  });
}

// ---------------------------------------------------------------- convert

struct ConvertArgs {
  std::string in, out;
  int width = 0, height = 0;
};

std::string matrix_to_csv(const Eigen::MatrixXd& m) {
  std::ostringstream os;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) os << (c ? "," : "") << format_double(m(r, c));
    os << '\n';
  }
  return os.str();
}

Eigen::MatrixXd matrix_from_csv(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw Error(ErrorCode::ParseError, path.string() + ": not a number: '" + cell + "'");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw Error(ErrorCode::ParseError, path.string() + ": ragged rows");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw Error(ErrorCode::EmptyInput, path.string() + ": no rows");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  }
  return m;
}

void add_convert(CLI::App& app, ConvertArgs& a, std::function<int()>& run) {
  auto* cmd = app.add_subcommand(
      "convert", "File conversion by extension: pfm->pgm (mask), pfm<->csv (grid), dfi<->csv (feature matrix)");
  cmd->add_option("--in", a.in, "Input file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", a.out, "Output file")->required();
  cmd->callback([&] {
    run = [&] {
      const std::string from = fs::path(a.in).extension().string();
      const std::string to = fs::path(a.out).extension().string();
      if (from == ".pfm" && to == ".pgm") {
        write_mask_pgm(a.out, read_pfm(a.in));
      } else if (from == ".pfm" && to == ".csv") {
        const DepthMap d = read_pfm(a.in);
        Eigen::MatrixXd m(d.height, d.width);
        for (int y = 0; y < d.height; ++y) {
          for (int x = 0; x < d.width; ++x) m(y, x) = d.at(x, y);
        }
        write_text(a.out, matrix_to_csv(m));
      } else if (from == ".csv" && to == ".pfm") {
        const Eigen::MatrixXd m = matrix_from_csv(a.in);
        DepthMap d = DepthMap::empty(static_cast<int>(m.cols()), static_cast<int>(m.rows()));
        for (int y = 0; y < d.height; ++y) {
          for (int x = 0; x < d.width; ++x) {
            d.values[d.index(x, y)] = m(y, x);
            d.mask[d.index(x, y)] = m(y, x) > 0.0;
          }
        }
        d.validate();
        write_pfm(a.out, d);
      } else if (from == ".dfi" && to == ".csv") {
        write_text(a.out, matrix_to_csv(read_feature_blob(a.in)));
      } else if (from == ".csv" && to == ".dfi") {
        write_feature_blob(a.out, matrix_from_csv(a.in));
      } else {
        throw Error(ErrorCode::InvalidArgument, "no conversion from " + from + " to " + to);
      }
      return 0;
    };
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Image-to-point-cloud registration toolkit", "diffreg"};
  app.require_subcommand(1);
  app.footer("Environment: DIFFREG_THREADS caps worker threads.");

  std::function<int()> run;
  SynthArgs synth;
  MatchArgs match;
  PnPArgs pnp;
  RansacArgs ransac;
  RegisterArgs reg;
  DensifyArgs dens;
  GradcheckArgs grad;
  CSDArgs csd;
  MetricsArgs metrics;
  ConvertArgs convert;
  add_synth(app, synth, run);
  add_match(app, match, run);
  add_register(app, reg, run);
  add_pnp(app, pnp, run);
  add_ransac(app, ransac, run);
  add_densify(app, dens, run);
  add_gradcheck(app, grad, run);
  add_csd(app, csd, run);
  add_metrics(app, metrics, run);
  add_convert(app, convert, run);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitBadInput;
  }

  try {
    return run ? run() : kExitBadInput;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
