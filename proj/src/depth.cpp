#include "diffreg/depth.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <limits>
#include <string>

namespace diffreg {

namespace {

std::atomic<std::uint64_t> next_stamp{1};

using Triplets = std::vector<Eigen::Triplet<double>>;

struct Offset {
  int dx;
  int dy;
};

std::vector<Offset> square_kernel(int radius) {
  std::vector<Offset> k;
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) k.push_back({dx, dy});
  }
  return k;
}

std::vector<Offset> diamond_kernel(int radius) {
  std::vector<Offset> k;
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      if (std::abs(dx) + std::abs(dy) <= radius) k.push_back({dx, dy});
    }
  }
  return k;
}

// A value on the inverted grid together with the input pixel it was copied
// from (-1 for empty pixels).
struct Tracked {
  std::vector<double> value;
  std::vector<int> source;
};

// Grey-level dilation (max) or erosion (min) ignoring out-of-image samples.
// The first extremum in kernel order wins ties.
Tracked morph(const Tracked& in, int W, int H, const std::vector<Offset>& kernel, bool dilate) {
  Tracked out{std::vector<double>(in.value.size()), std::vector<int>(in.value.size())};
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double best = dilate ? -std::numeric_limits<double>::infinity() : std::numeric_limits<double>::infinity();
      int src = -1;
      for (const auto& o : kernel) {
        const int xx = x + o.dx, yy = y + o.dy;
        if (xx < 0 || yy < 0 || xx >= W || yy >= H) continue;
        const std::size_t q = static_cast<std::size_t>(yy) * W + xx;
        const double v = in.value[q];
        if (dilate ? v > best : v < best) {
          best = v;
          src = in.source[q];
        }
      }
      const std::size_t p = static_cast<std::size_t>(y) * W + x;
      out.value[p] = best;
      out.source[p] = src;
    }
  }
  return out;
}

int clamp_index(int i, int n) { return std::clamp(i, 0, n - 1); }

int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

// 5x5 median with replicated borders; the 13th smallest sample, ties broken
// by kernel order.
Tracked median5(const Tracked& in, int W, int H) {
  Tracked out{std::vector<double>(in.value.size()), std::vector<int>(in.value.size())};
  std::array<std::pair<double, int>, 25> window;
  std::array<int, 25> source;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      int k = 0;
      bool flat = true;
      for (int dy = -2; dy <= 2; ++dy) {
        for (int dx = -2; dx <= 2; ++dx, ++k) {
          const std::size_t q = static_cast<std::size_t>(clamp_index(y + dy, H)) * W + clamp_index(x + dx, W);
          window[k] = {in.value[q], k};
          source[k] = in.source[q];
          flat = flat && in.value[q] == window[0].first;
        }
      }
      const std::size_t p = static_cast<std::size_t>(y) * W + x;
      if (flat) {
        // All samples tie, so kernel order makes the centre the 13th.
        out.value[p] = window[12].first;
        out.source[p] = source[12];
        continue;
      }
      std::nth_element(window.begin(), window.begin() + 12, window.end());
      out.value[p] = window[12].first;
      out.source[p] = source[window[12].second];
    }
  }
  return out;
}

}  // namespace

DepthMap DepthMap::empty(int width, int height) {
  if (width < 1 || height < 1) throw Error(ErrorCode::BadDims, "depth map dimensions must be >= 1");
  DepthMap d;
  d.width = width;
  d.height = height;
  d.values.assign(static_cast<std::size_t>(width) * height, 0.0);
  d.mask.assign(d.values.size(), 0);
  return d;
}

int DepthMap::occupied_count() const {
  return static_cast<int>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }));
}

void DepthMap::validate() const {
  const auto n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (width < 1 || height < 1 || values.size() != n || mask.size() != n) {
    throw Error(ErrorCode::InvalidArgument, "depth map storage does not match its dimensions");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i] ? !(values[i] > 0.0 && std::isfinite(values[i])) : values[i] != 0.0) {
      throw Error(ErrorCode::InvalidArgument, "depth map pixel " + std::to_string(i) + " violates the mask contract");
    }
  }
}

RenderResult render_sparse_depth(const std::vector<Vec3>& points, const Pose& pose, const CameraIntrinsics& K,
                                 const RenderOptions& options) {
  K.validate();
  if (!(options.blend_band >= 0.0)) throw Error(ErrorCode::InvalidArgument, "blend_band must be >= 0");
  const int W = K.width, H = K.height;
  const std::size_t n_pix = static_cast<std::size_t>(W) * H;

  struct Tap {
    int point;
    double z;
    double w;
    Vec2 dw;  // d w / d pixel
  };
  std::vector<std::vector<Tap>> taps(n_pix);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Vec3 c = pose.apply(points[i]);
    if (!(c.z() > kMinDepth)) continue;
    const Vec2 uv = project(c, K).pixel;
    const int pt = static_cast<int>(i);
    if (options.mode == RasterMode::Hard) {
      const double px = std::floor(uv.x() + 0.5), py = std::floor(uv.y() + 0.5);
      if (px < 0 || py < 0 || px >= W || py >= H) continue;
      taps[static_cast<std::size_t>(py) * W + static_cast<std::size_t>(px)].push_back({pt, c.z(), 1.0, Vec2::Zero()});
      continue;
    }
    const double x0 = std::floor(uv.x()), y0 = std::floor(uv.y());
    const double fx = uv.x() - x0, fy = uv.y() - y0;
    const std::array<Tap, 4> corners{{
        {pt, c.z(), (1 - fx) * (1 - fy), Vec2(-(1 - fy), -(1 - fx))},
        {pt, c.z(), fx * (1 - fy), Vec2(1 - fy, -fx)},
        {pt, c.z(), (1 - fx) * fy, Vec2(-fy, 1 - fx)},
        {pt, c.z(), fx * fy, Vec2(fy, fx)},
    }};
    for (int k = 0; k < 4; ++k) {
      const double px = x0 + (k & 1), py = y0 + (k >> 1);
      if (corners[k].w <= 0.0 || px < 0 || py < 0 || px >= W || py >= H) continue;
      taps[static_cast<std::size_t>(py) * W + static_cast<std::size_t>(px)].push_back(corners[k]);
    }
  }

  RenderResult out;
  out.depth = DepthMap::empty(W, H);
  auto& prov = out.provenance;
  prov.offsets.assign(n_pix + 1, 0);
  for (std::size_t p = 0; p < n_pix; ++p) {
    prov.offsets[p] = prov.contributions.size();
    const auto& list = taps[p];
    if (list.empty()) continue;
    // Nearest tap; lower point index on equal depth.
    const Tap* nearest = &list.front();
    for (const auto& t : list) {
      if (t.z < nearest->z || (t.z == nearest->z && t.point < nearest->point)) nearest = &t;
    }
    out.depth.mask[p] = 1;
    if (options.mode == RasterMode::Hard) {
      out.depth.values[p] = nearest->z;
      prov.contributions.push_back({nearest->point, 1.0, Vec2::Zero()});
      continue;
    }
    const double limit = nearest->z * (1.0 + options.blend_band);
    double sw = 0.0, swz = 0.0;
    int members = 0;
    for (const auto& t : list) {
      if (t.z > limit) continue;
      sw += t.w;
      swz += t.w / t.z;
      ++members;
    }
    if (members == 1) {
      out.depth.values[p] = nearest->z;
      prov.contributions.push_back({nearest->point, 1.0, Vec2::Zero()});
      continue;
    }
    const double v = sw / swz;
    out.depth.values[p] = v;
    for (const auto& t : list) {
      if (t.z > limit) continue;
      const double dv_dz = v * v * t.w / (sw * t.z * t.z);
      const double dv_dw = (v / sw) * (1.0 - v / t.z);
      prov.contributions.push_back({t.point, dv_dz, dv_dw * t.dw});
    }
  }
  prov.offsets[n_pix] = prov.contributions.size();
  prov.valid = true;
  prov.stamp = next_stamp.fetch_add(1);
  prov.mode = options.mode;
  prov.pose = pose;
  prov.K = K;
  prov.points = points;
  prov.latent_height = H;
  prov.latent_width = W;
  return out;
}

DensifyResult densify_with_jacobian(const DepthMap& sparse, const DensifyConfig& config) {
  sparse.validate();
  if (!(config.threshold >= 0.0) || !(config.max_depth > config.threshold)) {
    throw Error(ErrorCode::InvalidArgument, "densify needs 0 <= threshold < max_depth");
  }
  const int W = sparse.width, H = sparse.height;
  const std::size_t n = sparse.values.size();
  const double thr = config.threshold, vmax = config.max_depth;

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  int lo_pixel = -1, hi_pixel = -1;
  Tracked v{std::vector<double>(n, 0.0), std::vector<int>(n, -1)};
  std::vector<double> sign(n, 0.0);  // d v / d input at each source pixel
  for (std::size_t p = 0; p < n; ++p) {
    if (!sparse.mask[p]) continue;
    const double d = sparse.values[p];
    if (d < lo) {
      lo = d;
      lo_pixel = static_cast<int>(p);
    }
    if (d > hi) {
      hi = d;
      hi_pixel = static_cast<int>(p);
    }
    v.source[p] = static_cast<int>(p);
    if (d > thr) {
      v.value[p] = vmax - d;
      sign[p] = -1.0;
    } else {
      v.value[p] = d;
      sign[p] = 1.0;
    }
  }

  DensifyResult out;
  out.depth = DepthMap::empty(W, H);
  out.jacobian.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  if (sparse.occupied_count() == 0) return out;

  Tracked t = morph(v, W, H, diamond_kernel(3), true);
  t = morph(t, W, H, square_kernel(1), false);
  t = morph(t, W, H, square_kernel(2), true);
  const Tracked med = median5(t, W, H);

  static constexpr std::array<double, 5> binom{1.0, 4.0, 6.0, 4.0, 1.0};
  // Mirrored coordinates for offsets -2..2, per row and column.
  std::vector<int> rx(static_cast<std::size_t>(W) * 5), ry(static_cast<std::size_t>(H) * 5);
  for (int x = 0; x < W; ++x) {
    for (int d = -2; d <= 2; ++d) rx[static_cast<std::size_t>(x) * 5 + d + 2] = reflect101(x + d, W);
  }
  for (int y = 0; y < H; ++y) {
    for (int d = -2; d <= 2; ++d) ry[static_cast<std::size_t>(y) * 5 + d + 2] = reflect101(y + d, H);
  }
  Triplets trip;
  trip.reserve(n * 4);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * W + x;
      if (!(med.value[p] > thr)) continue;
      // Blur over the whole median field, zeros included.
      double g = 0.0;
      std::array<std::pair<int, double>, 25> coeff;
      int nc = 0;
      for (int dy = -2; dy <= 2; ++dy) {
        for (int dx = -2; dx <= 2; ++dx) {
          const double k = binom[dy + 2] * binom[dx + 2] / 256.0;
          const std::size_t q = static_cast<std::size_t>(ry[static_cast<std::size_t>(y) * 5 + dy + 2]) * W +
                                rx[static_cast<std::size_t>(x) * 5 + dx + 2];
          g += k * med.value[q];
          if (med.source[q] >= 0) coeff[nc++] = {med.source[q], k};
        }
      }
      double d;
      double dd_dg;
      if (g > thr) {
        d = vmax - g;
        dd_dg = -1.0;
      } else {
        d = g;
        dd_dg = 1.0;
      }
      out.depth.mask[p] = 1;
      // A clamped value is the extreme input depth itself.
      if (d <= lo || d >= hi) {
        out.depth.values[p] = d <= lo ? lo : hi;
        trip.emplace_back(static_cast<int>(p), d <= lo ? lo_pixel : hi_pixel, 1.0);
        continue;
      }
      out.depth.values[p] = d;
      for (int c = 0; c < nc; ++c) {
        const auto [src, k] = coeff[c];
        trip.emplace_back(static_cast<int>(p), src, dd_dg * k * sign[static_cast<std::size_t>(src)]);
      }
    }
  }
  out.jacobian.setFromTriplets(trip.begin(), trip.end());
  return out;
}

DepthMap densify(const DepthMap& sparse, const DensifyConfig& config) {
  return densify_with_jacobian(sparse, config).depth;
}

ResizeResult resize_to_latent_with_jacobian(const DepthMap& depth, int h, int w) {
  depth.validate();
  if (h < 1 || w < 1 || h > depth.height || w > depth.width) {
    throw Error(ErrorCode::BadDims, "latent " + std::to_string(h) + "x" + std::to_string(w) + " does not fit " +
                                        std::to_string(depth.height) + "x" + std::to_string(depth.width));
  }
  const int H = depth.height, W = depth.width;
  // Overlap of pixel row r with cell i, and likewise for columns.
  auto spans = [](int cells, int pixels) {
    std::vector<std::vector<std::pair<int, double>>> out(static_cast<std::size_t>(cells));
    const double step = static_cast<double>(pixels) / cells;
    for (int i = 0; i < cells; ++i) {
      const double a = i * step, b = (i + 1) * step;
      for (int r = static_cast<int>(std::floor(a)); r < pixels && r < b; ++r) {
        const double ov = std::min<double>(r + 1, b) - std::max<double>(r, a);
        if (ov > 0.0) out[static_cast<std::size_t>(i)].emplace_back(r, ov);
      }
    }
    return out;
  };
  const auto rows = spans(h, H);
  const auto cols = spans(w, W);

  ResizeResult out;
  out.latent = DepthMap::empty(w, h);
  out.jacobian.resize(static_cast<Eigen::Index>(h) * w, static_cast<Eigen::Index>(H) * W);
  Triplets trip;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      double area = 0.0, sum = 0.0;
      for (const auto& [r, ar] : rows[static_cast<std::size_t>(i)]) {
        for (const auto& [c, ac] : cols[static_cast<std::size_t>(j)]) {
          const std::size_t p = depth.index(c, r);
          if (!depth.mask[p]) continue;
          area += ar * ac;
          sum += ar * ac * depth.values[p];
        }
      }
      if (area <= 0.0) continue;
      const std::size_t q = out.latent.index(j, i);
      out.latent.values[q] = sum / area;
      out.latent.mask[q] = 1;
      for (const auto& [r, ar] : rows[static_cast<std::size_t>(i)]) {
        for (const auto& [c, ac] : cols[static_cast<std::size_t>(j)]) {
          const std::size_t p = depth.index(c, r);
          if (depth.mask[p]) trip.emplace_back(static_cast<int>(q), static_cast<int>(p), ar * ac / area);
        }
      }
    }
  }
  out.jacobian.setFromTriplets(trip.begin(), trip.end());
  return out;
}

DepthMap resize_to_latent(const DepthMap& depth, int h, int w) {
  return resize_to_latent_with_jacobian(depth, h, w).latent;
}

DepthChainResult render_depth_chain(const std::vector<Vec3>& points, const Pose& pose, const CameraIntrinsics& K,
                                    const DepthChainConfig& config) {
  auto rendered = render_sparse_depth(points, pose, K, config.render);
  DepthChainResult out;
  out.sparse = std::move(rendered.depth);
  out.provenance = std::move(rendered.provenance);
  if (config.densify_enabled) {
    auto dens = densify_with_jacobian(out.sparse, config.densify);
    out.dense = std::move(dens.depth);
    out.provenance.densify_jacobian = std::move(dens.jacobian);
    out.provenance.densified = true;
  } else {
    out.dense = out.sparse;
  }
  const int h = config.latent_height > 0 ? config.latent_height : std::max(1, K.height / 8);
  const int w = config.latent_width > 0 ? config.latent_width : std::max(1, K.width / 8);
  auto res = resize_to_latent_with_jacobian(out.dense, h, w);
  out.latent = std::move(res.latent);
  out.provenance.resize_jacobian = std::move(res.jacobian);
  out.provenance.resized = true;
  out.provenance.latent_height = h;
  out.provenance.latent_width = w;
  return out;
}

DepthGradients depth_backward(const Eigen::MatrixXd& upstream, const DepthProvenance& prov) {
  if (!prov.valid) throw Error(ErrorCode::ProvenanceMissing, "depth_backward needs the provenance of a forward pass");
  if (upstream.rows() != prov.latent_height || upstream.cols() != prov.latent_width) {
    throw Error(ErrorCode::DimMismatch, "upstream is " + std::to_string(upstream.rows()) + "x" +
                                            std::to_string(upstream.cols()) + ", expected " +
                                            std::to_string(prov.latent_height) + "x" +
                                            std::to_string(prov.latent_width));
  }
  // Row-major flattening to match the pixel indexing.
  Eigen::VectorXd g(upstream.size());
  for (Eigen::Index i = 0; i < upstream.rows(); ++i) {
    for (Eigen::Index j = 0; j < upstream.cols(); ++j) g[i * upstream.cols() + j] = upstream(i, j);
  }
  if (prov.resized) g = prov.resize_jacobian.transpose() * g;
  if (prov.densified) g = prov.densify_jacobian.transpose() * g;

  DepthGradients out;
  out.points = Eigen::MatrixX3d::Zero(static_cast<Eigen::Index>(prov.points.size()), 3);
  std::vector<Vec3> g_cam(prov.points.size(), Vec3::Zero());
  for (std::size_t p = 0; p + 1 < prov.offsets.size(); ++p) {
    const double gp = g[static_cast<Eigen::Index>(p)];
    if (gp == 0.0) continue;
    for (std::size_t k = prov.offsets[p]; k < prov.offsets[p + 1]; ++k) {
      const auto& c = prov.contributions[k];
      const Vec3 cam = prov.pose.apply(prov.points[static_cast<std::size_t>(c.point)]);
      Vec3 dc = c.d_depth * Vec3::UnitZ();
      if (!c.d_pixel.isZero(0.0)) dc += project_jacobian(cam, prov.K).transpose() * c.d_pixel;
      g_cam[static_cast<std::size_t>(c.point)] += gp * dc;
    }
  }
  for (std::size_t i = 0; i < g_cam.size(); ++i) {
    if (g_cam[i].isZero(0.0)) continue;
    out.points.row(static_cast<Eigen::Index>(i)) = (prov.pose.rotation().transpose() * g_cam[i]).transpose();
    out.pose += prov.pose.point_jacobian(prov.points[i]).transpose() * g_cam[i];
  }
  return out;
}

}  // namespace diffreg
