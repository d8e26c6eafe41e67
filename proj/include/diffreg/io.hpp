#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "diffreg/correspondence.hpp"
#include "diffreg/depth.hpp"
#include "diffreg/geometry.hpp"
#include "diffreg/matching.hpp"

namespace diffreg {

using Bytes = std::vector<std::uint8_t>;

Bytes read_file(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const Bytes& bytes);
void write_text(const std::filesystem::path& path, std::string_view text);

/// Little-endian float32, narrowing from double.
Bytes encode_f32_le(const std::vector<double>& values);
std::vector<double> decode_f32_le(const Bytes& bytes);

std::string base64_encode(const Bytes& bytes);
/// Throws ParseError on malformed input.
Bytes base64_decode(std::string_view text);

/// Shortest text that parses back to the same double.
std::string format_double(double v);

// Point cloud: one "x y z [f1 ... fF]" row per point.
PointCloud read_point_cloud(const std::filesystem::path& path);
void write_point_cloud(const std::filesystem::path& path, const PointCloud& cloud);

// {fx, fy, cx, cy, width, height}
CameraIntrinsics read_intrinsics(const std::filesystem::path& path);
void write_intrinsics(const std::filesystem::path& path, const CameraIntrinsics& K);
std::string intrinsics_to_json(const CameraIntrinsics& K);

// {"matrix": [16 row-major values]}
Pose read_pose(const std::filesystem::path& path);
void write_pose(const std::filesystem::path& path, const Pose& pose);
std::string pose_to_json(const Pose& pose);

/// Header px,py,X,Y,Z,score. An optional seventh column `depth` carries the
/// pixel depth.
CorrespondenceSet read_correspondences(const std::filesystem::path& path);
void write_correspondences(const std::filesystem::path& path, const CorrespondenceSet& corr, bool with_depth = false);

/// PFM greyscale, little-endian (scale -1), bottom row first. Empty pixels
/// are stored as 0.
Bytes encode_pfm(const DepthMap& depth);
DepthMap decode_pfm(const Bytes& bytes);
void write_pfm(const std::filesystem::path& path, const DepthMap& depth);
DepthMap read_pfm(const std::filesystem::path& path);

/// Binary PGM (P5) with 255 for occupied pixels.
void write_mask_pgm(const std::filesystem::path& path, const DepthMap& depth);
std::vector<std::uint8_t> read_mask_pgm(const std::filesystem::path& path, int& width, int& height);

/// Binary PPM (P6) of an Image's RGB values.
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

/// Feature blob: "DFI1", u32 rank (1 or 2), u32 dims[2], then row-major
/// little-endian float32.
Bytes encode_feature_blob(const Eigen::MatrixXd& features);
Eigen::MatrixXd decode_feature_blob(const Bytes& bytes);
void write_feature_blob(const std::filesystem::path& path, const Eigen::MatrixXd& features);
Eigen::MatrixXd read_feature_blob(const std::filesystem::path& path);

/// Image features with the sidecar JSON that places each row on the grid:
/// {"layout":"sparse","width":W,"height":H,"pixels":[[x,y],...],"depths":[...]}
/// or {"layout":"dense","width":W,"height":H} for one row per pixel.
void write_keypoints(const std::filesystem::path& blob, const std::filesystem::path& sidecar, const Keypoints& kp,
                     int width, int height);
Keypoints read_keypoints(const std::filesystem::path& blob, const std::filesystem::path& sidecar, int& width,
                         int& height);

}  // namespace diffreg
