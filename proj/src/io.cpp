#include "diffreg/io.hpp"

#include <openssl/evp.h>

#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace diffreg {

namespace {

using nlohmann::json;

json parse_json(const std::filesystem::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
}

void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const Bytes& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | in[at + i];
  return v;
}

void put_f32(Bytes& out, double v) { put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

double get_f32(const Bytes& in, std::size_t at) { return std::bit_cast<float>(get_u32(in, at)); }

double parse_double(std::string_view s, const std::string& where) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) throw Error(ErrorCode::ParseError, where + ": not a number: '" + std::string(s) + "'");
  return v;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

// Reads "P?" header tokens (magic, then `count` integers), skipping comments.
std::vector<long> netpbm_header(const Bytes& bytes, std::size_t& pos, std::string_view magic, int count,
                                const std::string& where) {
  if (bytes.size() < 2 || bytes[0] != magic[0] || bytes[1] != magic[1]) {
    throw Error(ErrorCode::ParseError, where + ": expected " + std::string(magic) + " header");
  }
  pos = 2;
  std::vector<long> vals;
  while (static_cast<int>(vals.size()) < count) {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    if (pos < bytes.size() && bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      continue;
    }
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) tok.push_back(static_cast<char>(bytes[pos++]));
    if (tok.empty()) throw Error(ErrorCode::ParseError, where + ": truncated header");
    vals.push_back(static_cast<long>(parse_double(tok, where)));
  }
  ++pos;  // single whitespace before the raster
  return vals;
}

}  // namespace

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  return Bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::string read_text(const std::filesystem::path& path) {
  const Bytes b = read_file(path);
  return std::string(b.begin(), b.end());
}

void write_file(const std::filesystem::path& path, const Bytes& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  write_file(path, Bytes(text.begin(), text.end()));
}

Bytes encode_f32_le(const std::vector<double>& values) {
  Bytes out;
  out.reserve(values.size() * 4);
  for (double v : values) put_f32(out, v);
  return out;
}

std::vector<double> decode_f32_le(const Bytes& bytes) {
  if (bytes.size() % 4 != 0) throw Error(ErrorCode::ParseError, "float32 payload length is not a multiple of 4");
  std::vector<double> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = get_f32(bytes, 4 * i);
  return out;
}

std::string base64_encode(const Bytes& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

Bytes base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw Error(ErrorCode::ParseError, "base64 length is not a multiple of 4");
  Bytes out(3 * text.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw Error(ErrorCode::ParseError, "malformed base64");
  // EVP_DecodeBlock keeps the padding bytes.
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

std::string format_double(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

PointCloud read_point_cloud(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  PointCloud cloud;
  std::vector<std::vector<double>> feats;
  std::string line;
  int lineno = 0;
  int dim = -1;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    std::vector<double> row;
    std::istringstream ls{std::string(t)};
    std::string tok;
    while (ls >> tok) row.push_back(parse_double(tok, path.string() + ":" + std::to_string(lineno)));
    if (row.size() < 3) throw Error(ErrorCode::ParseError, path.string() + ":" + std::to_string(lineno) + ": need x y z");
    const int f = static_cast<int>(row.size()) - 3;
    if (dim >= 0 && f != dim) {
      throw Error(ErrorCode::ParseError, path.string() + ":" + std::to_string(lineno) + ": ragged feature columns");
    }
    dim = f;
    cloud.points.emplace_back(row[0], row[1], row[2]);
    feats.emplace_back(row.begin() + 3, row.end());
  }
  if (cloud.points.empty()) throw Error(ErrorCode::EmptyInput, path.string() + ": no points");
  cloud.features.resize(static_cast<Eigen::Index>(feats.size()), std::max(dim, 0));
  for (std::size_t i = 0; i < feats.size(); ++i) {
    for (std::size_t j = 0; j < feats[i].size(); ++j) {
      cloud.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = feats[i][j];
    }
  }
  cloud.validate();
  return cloud;
}

void write_point_cloud(const std::filesystem::path& path, const PointCloud& cloud) {
  std::string out;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    out += format_double(p.x()) + " " + format_double(p.y()) + " " + format_double(p.z());
    for (Eigen::Index j = 0; j < cloud.features.cols(); ++j) {
      out += " " + format_double(cloud.features(static_cast<Eigen::Index>(i), j));
    }
    out += "\n";
  }
  write_text(path, out);
}

std::string intrinsics_to_json(const CameraIntrinsics& K) {
  json j = {{"fx", K.fx}, {"fy", K.fy}, {"cx", K.cx}, {"cy", K.cy}, {"width", K.width}, {"height", K.height}};
  return j.dump();
}

CameraIntrinsics read_intrinsics(const std::filesystem::path& path) {
  const json j = parse_json(path);
  CameraIntrinsics K;
  try {
    K.fx = j.at("fx").get<double>();
    K.fy = j.at("fy").get<double>();
    K.cx = j.at("cx").get<double>();
    K.cy = j.at("cy").get<double>();
    K.width = j.at("width").get<int>();
    K.height = j.at("height").get<int>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
  K.validate();
  return K;
}

void write_intrinsics(const std::filesystem::path& path, const CameraIntrinsics& K) {
  write_text(path, intrinsics_to_json(K) + "\n");
}

std::string pose_to_json(const Pose& pose) {
  const Mat4 m = pose.matrix();
  json arr = json::array();
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) arr.push_back(m(r, c));
  }
  return json{{"matrix", arr}}.dump();
}

Pose read_pose(const std::filesystem::path& path) {
  const json j = parse_json(path);
  std::vector<double> v;
  try {
    v = j.at("matrix").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
  if (v.size() != 16) throw Error(ErrorCode::ParseError, path.string() + ": matrix needs 16 values");
  Mat4 m;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) m(r, c) = v[static_cast<std::size_t>(4 * r + c)];
  }
  return Pose::from_matrix(m);
}

void write_pose(const std::filesystem::path& path, const Pose& pose) { write_text(path, pose_to_json(pose) + "\n"); }

CorrespondenceSet read_correspondences(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::ParseError, path.string() + ": missing header");
  const auto header = trim(line);
  bool with_depth = false;
  if (header == "px,py,X,Y,Z,score,depth") {
    with_depth = true;
  } else if (header != "px,py,X,Y,Z,score") {
    throw Error(ErrorCode::ParseError, path.string() + ": header must be px,py,X,Y,Z,score");
  }
  CorrespondenceSet corr;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty()) continue;
    const auto cols = split(t, ',');
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (cols.size() != (with_depth ? 7u : 6u)) throw Error(ErrorCode::ParseError, where + ": wrong column count");
    Correspondence c;
    c.pixel = Vec2(parse_double(trim(cols[0]), where), parse_double(trim(cols[1]), where));
    c.point = Vec3(parse_double(trim(cols[2]), where), parse_double(trim(cols[3]), where),
                   parse_double(trim(cols[4]), where));
    c.score = parse_double(trim(cols[5]), where);
    if (with_depth) c.pixel_depth = parse_double(trim(cols[6]), where);
    corr.pairs.push_back(std::move(c));
  }
  return corr;
}

void write_correspondences(const std::filesystem::path& path, const CorrespondenceSet& corr, bool with_depth) {
  std::string out = with_depth ? "px,py,X,Y,Z,score,depth\n" : "px,py,X,Y,Z,score\n";
  for (const auto& c : corr.pairs) {
    out += format_double(c.pixel.x()) + "," + format_double(c.pixel.y()) + "," + format_double(c.point.x()) + "," +
           format_double(c.point.y()) + "," + format_double(c.point.z()) + "," + format_double(c.score);
    if (with_depth) {
      if (!c.pixel_depth) throw Error(ErrorCode::MissingDepth, "cannot write a depth column without pixel depths");
      out += "," + format_double(*c.pixel_depth);
    }
    out += "\n";
  }
  write_text(path, out);
}

Bytes encode_pfm(const DepthMap& depth) {
  depth.validate();
  const std::string header = "Pf\n" + std::to_string(depth.width) + " " + std::to_string(depth.height) + "\n-1.0\n";
  Bytes out(header.begin(), header.end());
  out.reserve(out.size() + depth.values.size() * 4);
  for (int y = depth.height - 1; y >= 0; --y) {
    for (int x = 0; x < depth.width; ++x) put_f32(out, depth.at(x, y));
  }
  return out;
}

DepthMap decode_pfm(const Bytes& bytes) {
  // "Pf", width, height, scale; the scale token may be fractional.
  std::size_t pos = 0;
  if (bytes.size() < 3 || bytes[0] != 'P' || bytes[1] != 'f') throw Error(ErrorCode::ParseError, "not a greyscale PFM");
  pos = 2;
  std::vector<std::string> toks;
  while (toks.size() < 3) {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) tok.push_back(static_cast<char>(bytes[pos++]));
    if (tok.empty()) throw Error(ErrorCode::ParseError, "truncated PFM header");
    toks.push_back(tok);
  }
  ++pos;
  const int W = static_cast<int>(parse_double(toks[0], "PFM width"));
  const int H = static_cast<int>(parse_double(toks[1], "PFM height"));
  const double scale = parse_double(toks[2], "PFM scale");
  if (scale >= 0.0) throw Error(ErrorCode::ParseError, "big-endian PFM is not supported");
  if (W < 1 || H < 1) throw Error(ErrorCode::ParseError, "PFM dimensions must be positive");
  if (bytes.size() - pos != static_cast<std::size_t>(W) * H * 4) throw Error(ErrorCode::ParseError, "PFM raster size mismatch");
  DepthMap d = DepthMap::empty(W, H);
  for (int y = H - 1; y >= 0; --y) {
    for (int x = 0; x < W; ++x, pos += 4) {
      const double v = get_f32(bytes, pos);
      if (!std::isfinite(v) || v < 0.0) throw Error(ErrorCode::ParseError, "PFM holds a negative or non-finite depth");
      d.values[d.index(x, y)] = v;
      d.mask[d.index(x, y)] = v > 0.0;
    }
  }
  return d;
}

void write_pfm(const std::filesystem::path& path, const DepthMap& depth) { write_file(path, encode_pfm(depth)); }

DepthMap read_pfm(const std::filesystem::path& path) {
  try {
    return decode_pfm(read_file(path));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ParseError) throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
    throw;
  }
}

void write_mask_pgm(const std::filesystem::path& path, const DepthMap& depth) {
  const std::string header = "P5\n" + std::to_string(depth.width) + " " + std::to_string(depth.height) + "\n255\n";
  Bytes out(header.begin(), header.end());
  for (auto m : depth.mask) out.push_back(m ? 255 : 0);
  write_file(path, out);
}

std::vector<std::uint8_t> read_mask_pgm(const std::filesystem::path& path, int& width, int& height) {
  const Bytes bytes = read_file(path);
  std::size_t pos = 0;
  const auto h = netpbm_header(bytes, pos, "P5", 3, path.string());
  width = static_cast<int>(h[0]);
  height = static_cast<int>(h[1]);
  if (h[2] != 255 || width < 1 || height < 1) throw Error(ErrorCode::ParseError, path.string() + ": unsupported PGM");
  if (bytes.size() - pos != static_cast<std::size_t>(width) * height) {
    throw Error(ErrorCode::ParseError, path.string() + ": PGM raster size mismatch");
  }
  std::vector<std::uint8_t> mask(bytes.begin() + static_cast<long>(pos), bytes.end());
  for (auto& m : mask) m = m ? 1 : 0;
  return mask;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  image.validate();
  const std::string header = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  Bytes out(header.begin(), header.end());
  for (double v : image.pixels) out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  write_file(path, out);
}

Image read_ppm(const std::filesystem::path& path) {
  const Bytes bytes = read_file(path);
  std::size_t pos = 0;
  const auto h = netpbm_header(bytes, pos, "P6", 3, path.string());
  Image img;
  img.width = static_cast<int>(h[0]);
  img.height = static_cast<int>(h[1]);
  if (h[2] != 255 || img.width < 1 || img.height < 1) throw Error(ErrorCode::ParseError, path.string() + ": unsupported PPM");
  if (bytes.size() - pos != static_cast<std::size_t>(img.width) * img.height * 3) {
    throw Error(ErrorCode::ParseError, path.string() + ": PPM raster size mismatch");
  }
  img.pixels.reserve(bytes.size() - pos);
  for (std::size_t i = pos; i < bytes.size(); ++i) img.pixels.push_back(bytes[i] / 255.0);
  return img;
}

Bytes encode_feature_blob(const Eigen::MatrixXd& features) {
  Bytes out{'D', 'F', 'I', '1'};
  put_u32(out, 2);
  put_u32(out, static_cast<std::uint32_t>(features.rows()));
  put_u32(out, static_cast<std::uint32_t>(features.cols()));
  for (Eigen::Index r = 0; r < features.rows(); ++r) {
    for (Eigen::Index c = 0; c < features.cols(); ++c) put_f32(out, features(r, c));
  }
  return out;
}

Eigen::MatrixXd decode_feature_blob(const Bytes& bytes) {
  if (bytes.size() < 16 || bytes[0] != 'D' || bytes[1] != 'F' || bytes[2] != 'I' || bytes[3] != '1') {
    throw Error(ErrorCode::ParseError, "not a DFI1 feature blob");
  }
  const std::uint32_t rank = get_u32(bytes, 4);
  if (rank != 1 && rank != 2) throw Error(ErrorCode::ParseError, "feature blob rank must be 1 or 2");
  const std::uint64_t rows = get_u32(bytes, 8);
  const std::uint64_t cols = rank == 2 ? get_u32(bytes, 12) : 1;
  if (bytes.size() - 16 != rows * cols * 4) throw Error(ErrorCode::ParseError, "feature blob payload size mismatch");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  std::size_t pos = 16;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c, pos += 4) m(r, c) = get_f32(bytes, pos);
  }
  return m;
}

void write_feature_blob(const std::filesystem::path& path, const Eigen::MatrixXd& features) {
  write_file(path, encode_feature_blob(features));
}

Eigen::MatrixXd read_feature_blob(const std::filesystem::path& path) {
  try {
    return decode_feature_blob(read_file(path));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ParseError) throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
    throw;
  }
}

void write_keypoints(const std::filesystem::path& blob, const std::filesystem::path& sidecar, const Keypoints& kp,
                     int width, int height) {
  kp.validate();
  write_feature_blob(blob, kp.features);
  json j{{"layout", "sparse"}, {"width", width}, {"height", height}};
  json pixels = json::array();
  for (const auto& p : kp.pixels) pixels.push_back({p.x(), p.y()});
  j["pixels"] = pixels;
  if (!kp.depths.empty()) j["depths"] = kp.depths;
  write_text(sidecar, j.dump() + "\n");
}

Keypoints read_keypoints(const std::filesystem::path& blob, const std::filesystem::path& sidecar, int& width,
                         int& height) {
  const json j = parse_json(sidecar);
  Keypoints kp;
  kp.features = read_feature_blob(blob);
  try {
    width = j.at("width").get<int>();
    height = j.at("height").get<int>();
    const auto layout = j.at("layout").get<std::string>();
    if (layout == "dense") {
      if (kp.features.rows() != static_cast<Eigen::Index>(width) * height) {
        throw Error(ErrorCode::ShapeMismatch, blob.string() + ": dense blob needs one row per pixel");
      }
      for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) kp.pixels.emplace_back(x, y);
      }
    } else if (layout == "sparse") {
      for (const auto& p : j.at("pixels")) kp.pixels.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
      if (j.contains("depths")) kp.depths = j.at("depths").get<std::vector<double>>();
    } else {
      throw Error(ErrorCode::ParseError, sidecar.string() + ": unknown layout '" + layout + "'");
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, sidecar.string() + ": " + e.what());
  }
  kp.validate();
  return kp;
}

}  // namespace diffreg
