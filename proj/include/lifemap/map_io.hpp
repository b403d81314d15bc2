#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "lifemap/geom.hpp"

namespace lifemap {

enum class PcdEncoding { Ascii, Binary };

/// Reads a .pcd (v0.7, ascii or binary, fields x y z [label]) or an ascii
/// .ply (vertex element with x y z [label]). Non-finite points are dropped.
PointCloud read_cloud(const std::filesystem::path& path);

/// Writes .pcd in the given encoding, or ascii .ply when the extension is
/// .ply. Coordinates are stored as float32; labels as a uint8 `label` field.
void write_cloud(const PointCloud& cloud, const std::filesystem::path& path,
                 PcdEncoding encoding = PcdEncoding::Binary);

/// Parses PCD bytes; `source` names the input in error messages.
PointCloud parse_pcd(const std::string& bytes, const std::string& source = "<pcd>");
std::string serialize_pcd(const PointCloud& cloud, PcdEncoding encoding);
PointCloud parse_ply(const std::string& text, const std::string& source = "<ply>");
std::string serialize_ply(const PointCloud& cloud);

struct StampedPose {
  double timestamp = 0.0;
  Pose pose;
};

struct PoseFile {
  std::vector<StampedPose> poses;
  std::vector<std::string> warnings;
};

/// Lines `timestamp tx ty tz qx qy qz qw`; blank lines and `#` comments are
/// skipped. Quaternions are normalized; a norm off by more than 1e-3 adds a
/// warning.
PoseFile read_poses(const std::filesystem::path& path);
PoseFile parse_poses(const std::string& text, const std::string& source = "<poses>");
void write_poses(const std::filesystem::path& path, const std::vector<StampedPose>& poses);

/// KITTI odometry pose file: 12 numbers per line, row-major 3x4.
std::vector<Pose> read_kitti_poses(const std::filesystem::path& path);

struct Frame {
  double timestamp = 0.0;
  Pose pose;        // sensor -> world
  PointCloud scan;  // sensor frame
};

struct SessionMap {
  std::string id;
  std::vector<Frame> frames;
  std::map<std::string, std::string> metadata;
};

/// World-frame concatenation of every transformed scan, in frame order.
PointCloud assemble_map(const SessionMap& session);

/// Start offset of each frame's points in assemble_map's output, plus the
/// total as the last entry.
std::vector<std::size_t> frame_offsets(const SessionMap& session);

/// Session directory: session.json (id, frame count, file list, per-file
/// SHA-256), poses.txt and scans/NNNNNN.pcd (binary).
void write_session(const SessionMap& session, const std::filesystem::path& dir);
/// Loads and verifies a session directory; checksum mismatch is a DataError.
SessionMap read_session(const std::filesystem::path& dir);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);
std::string read_file(const std::filesystem::path& path);
/// Writes through a temporary sibling and renames over the target.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

}  // namespace lifemap
