#include "lifemap/map_io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#include <json.hpp>

#include "lifemap/errors.hpp"

namespace lifemap {

namespace fs = std::filesystem;

namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

bool parse_double(std::string_view s, double& out) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  if (res.ec == std::errc() && res.ptr == s.data() + s.size()) return true;
  // from_chars rejects "nan"/"inf" spellings some writers use
  std::string tmp(s);
  char* end = nullptr;
  out = std::strtod(tmp.c_str(), &end);
  return end == tmp.c_str() + tmp.size() && !tmp.empty();
}

bool parse_size(std::string_view s, std::size_t& out) {
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

template <typename T>
T load_le(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  return v;
}

template <typename T>
void store_le(std::string& out, T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

std::string fmt_float(float v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

Label label_from(double v, const std::string& source, std::size_t line) {
  if (v == 0) return Label::Static;
  if (v == 1) return Label::Dynamic;
  if (v == 2) return Label::Unknown;
  throw ParseError(source, line, "label value out of range");
}

struct PcdField {
  std::string name;
  std::size_t size = 4;
  char type = 'F';
  std::size_t count = 1;
  std::size_t offset = 0;
};

double read_scalar(const char* p, const PcdField& f) {
  switch (f.type) {
    case 'F':
      return f.size == 8 ? load_le<double>(p) : static_cast<double>(load_le<float>(p));
    case 'U':
      if (f.size == 1) return static_cast<unsigned char>(*p);
      if (f.size == 2) return load_le<std::uint16_t>(p);
      if (f.size == 4) return load_le<std::uint32_t>(p);
      break;
    case 'I':
      if (f.size == 1) return static_cast<signed char>(*p);
      if (f.size == 2) return load_le<std::int16_t>(p);
      if (f.size == 4) return load_le<std::int32_t>(p);
      break;
    default:
      break;
  }
  return 0.0;
}

}  // namespace

// --- PCD --------------------------------------------------------------------

PointCloud parse_pcd(const std::string& bytes, const std::string& source) {
  std::vector<PcdField> fields;
  std::vector<std::size_t> sizes;
  std::vector<char> types;
  std::vector<std::size_t> counts;
  std::size_t width = 0;
  std::size_t height = 1;
  std::size_t points = 0;
  bool have_width = false;
  bool have_points = false;
  std::string data_kind;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  std::size_t data_line = 0;

  while (pos < bytes.size()) {
    const std::size_t eol = bytes.find('\n', pos);
    const std::size_t end = eol == std::string::npos ? bytes.size() : eol;
    std::string_view line(bytes.data() + pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    pos = eol == std::string::npos ? bytes.size() : eol + 1;
    ++line_no;
    const auto tok = split_ws(line);
    if (tok.empty() || tok[0].front() == '#') continue;
    const std::string key(tok[0]);
    auto need_args = [&](std::size_t n) {
      if (tok.size() < n + 1) throw ParseError(source, line_no, "missing values for " + key);
    };
    if (key == "VERSION" || key == "VIEWPOINT") {
      continue;
    } else if (key == "FIELDS") {
      need_args(1);
      for (std::size_t i = 1; i < tok.size(); ++i) fields.push_back({std::string(tok[i])});
    } else if (key == "SIZE") {
      need_args(1);
      for (std::size_t i = 1; i < tok.size(); ++i) {
        std::size_t s = 0;
        if (!parse_size(tok[i], s)) throw ParseError(source, line_no, "bad SIZE value");
        sizes.push_back(s);
      }
    } else if (key == "TYPE") {
      need_args(1);
      for (std::size_t i = 1; i < tok.size(); ++i) {
        if (tok[i].size() != 1) throw ParseError(source, line_no, "bad TYPE value");
        types.push_back(tok[i][0]);
      }
    } else if (key == "COUNT") {
      need_args(1);
      for (std::size_t i = 1; i < tok.size(); ++i) {
        std::size_t c = 0;
        if (!parse_size(tok[i], c)) throw ParseError(source, line_no, "bad COUNT value");
        counts.push_back(c);
      }
    } else if (key == "WIDTH") {
      need_args(1);
      if (!parse_size(tok[1], width)) throw ParseError(source, line_no, "bad WIDTH");
      have_width = true;
    } else if (key == "HEIGHT") {
      need_args(1);
      if (!parse_size(tok[1], height)) throw ParseError(source, line_no, "bad HEIGHT");
    } else if (key == "POINTS") {
      need_args(1);
      if (!parse_size(tok[1], points)) throw ParseError(source, line_no, "bad POINTS");
      have_points = true;
    } else if (key == "DATA") {
      need_args(1);
      data_kind = std::string(tok[1]);
      data_line = line_no;
      break;
    } else {
      throw ParseError(source, line_no, "unknown header entry '" + key + "'");
    }
  }

  if (data_kind.empty()) throw ParseError(source, line_no, "missing DATA line");
  if (fields.empty()) throw ParseError(source, data_line, "missing FIELDS");
  if (sizes.size() != fields.size() || types.size() != fields.size()) {
    throw ParseError(source, data_line, "FIELDS/SIZE/TYPE length mismatch");
  }
  if (counts.empty()) counts.assign(fields.size(), 1);
  if (counts.size() != fields.size()) throw ParseError(source, data_line, "COUNT length mismatch");
  if (!have_width) throw ParseError(source, data_line, "missing WIDTH");
  if (!have_points) points = width * height;
  if (width * height != points) {
    throw ParseError(source, data_line, "WIDTH*HEIGHT (" + std::to_string(width * height) +
                                            ") != POINTS (" + std::to_string(points) + ")");
  }

  int ix = -1, iy = -1, iz = -1, il = -1;
  std::size_t stride = 0;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    auto& f = fields[i];
    f.size = sizes[i];
    f.type = types[i];
    f.count = counts[i];
    f.offset = stride;
    stride += f.size * f.count;
    const bool valid_type = (f.type == 'F' && (f.size == 4 || f.size == 8)) ||
                            ((f.type == 'U' || f.type == 'I') &&
                             (f.size == 1 || f.size == 2 || f.size == 4));
    if (!valid_type) throw UnsupportedFormat(source + ": unsupported type for field " + f.name);
    if (f.count != 1) throw UnsupportedFormat(source + ": field " + f.name + " has COUNT != 1");
    if (f.name == "x") ix = static_cast<int>(i);
    else if (f.name == "y") iy = static_cast<int>(i);
    else if (f.name == "z") iz = static_cast<int>(i);
    else if (f.name == "label") il = static_cast<int>(i);
    else throw UnsupportedFormat(source + ": unsupported field '" + f.name + "'");
  }
  if (ix < 0 || iy < 0 || iz < 0) throw UnsupportedFormat(source + ": fields x y z are required");

  std::vector<Point3> pts;
  std::vector<Label> labels;
  pts.reserve(points);
  if (il >= 0) labels.reserve(points);

  if (data_kind == "binary") {
    const std::size_t expected = points * stride;
    if (bytes.size() - pos != expected) {
      throw ParseError(source, data_line,
                       "binary payload is " + std::to_string(bytes.size() - pos) +
                           " bytes, header declares " + std::to_string(expected));
    }
    const char* base = bytes.data() + pos;
    for (std::size_t i = 0; i < points; ++i) {
      const char* rec = base + i * stride;
      const Point3 p(read_scalar(rec + fields[ix].offset, fields[ix]),
                     read_scalar(rec + fields[iy].offset, fields[iy]),
                     read_scalar(rec + fields[iz].offset, fields[iz]));
      if (!p.allFinite()) continue;
      pts.push_back(p);
      if (il >= 0) {
        labels.push_back(label_from(read_scalar(rec + fields[il].offset, fields[il]), source,
                                    data_line));
      }
    }
  } else if (data_kind == "ascii") {
    std::size_t read = 0;
    while (pos < bytes.size()) {
      const std::size_t eol = bytes.find('\n', pos);
      const std::size_t end = eol == std::string::npos ? bytes.size() : eol;
      std::string_view line(bytes.data() + pos, end - pos);
      pos = eol == std::string::npos ? bytes.size() : eol + 1;
      ++line_no;
      const auto tok = split_ws(line);
      if (tok.empty()) continue;
      if (read == points) throw ParseError(source, line_no, "more data rows than POINTS");
      if (tok.size() != fields.size()) {
        throw ParseError(source, line_no, "expected " + std::to_string(fields.size()) + " values");
      }
      double v[4] = {0, 0, 0, 0};
      const int idx[4] = {ix, iy, iz, il};
      for (int k = 0; k < (il >= 0 ? 4 : 3); ++k) {
        if (!parse_double(tok[idx[k]], v[k])) throw ParseError(source, line_no, "bad number");
      }
      ++read;
      const Point3 p(v[0], v[1], v[2]);
      if (!p.allFinite()) continue;
      pts.push_back(p);
      if (il >= 0) labels.push_back(label_from(v[3], source, line_no));
    }
    if (read != points) {
      throw ParseError(source, line_no,
                       "found " + std::to_string(read) + " data rows, header declares " +
                           std::to_string(points));
    }
  } else {
    throw UnsupportedFormat(source + ": DATA " + data_kind + " is not supported");
  }

  PointCloud cloud(std::move(pts));
  if (il >= 0) cloud.set_labels(std::move(labels));
  return cloud;
}

std::string serialize_pcd(const PointCloud& cloud, PcdEncoding encoding) {
  const bool lab = cloud.has_labels();
  std::ostringstream h;
  h << "# .PCD v0.7 - Point Cloud Data file format\n"
    << "VERSION 0.7\n"
    << "FIELDS x y z" << (lab ? " label" : "") << "\n"
    << "SIZE 4 4 4" << (lab ? " 1" : "") << "\n"
    << "TYPE F F F" << (lab ? " U" : "") << "\n"
    << "COUNT 1 1 1" << (lab ? " 1" : "") << "\n"
    << "WIDTH " << cloud.size() << "\n"
    << "HEIGHT 1\n"
    << "VIEWPOINT 0 0 0 1 0 0 0\n"
    << "POINTS " << cloud.size() << "\n"
    << "DATA " << (encoding == PcdEncoding::Binary ? "binary" : "ascii") << "\n";
  std::string out = h.str();
  if (encoding == PcdEncoding::Binary) {
    out.reserve(out.size() + cloud.size() * (lab ? 13 : 12));
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const auto& p = cloud[i];
      store_le(out, static_cast<float>(p.x()));
      store_le(out, static_cast<float>(p.y()));
      store_le(out, static_cast<float>(p.z()));
      if (lab) out.push_back(static_cast<char>(cloud.label(i)));
    }
  } else {
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const auto& p = cloud[i];
      out += fmt_float(static_cast<float>(p.x())) + ' ' + fmt_float(static_cast<float>(p.y())) +
             ' ' + fmt_float(static_cast<float>(p.z()));
      if (lab) out += ' ' + std::to_string(static_cast<int>(cloud.label(i)));
      out += '\n';
    }
  }
  return out;
}

// --- PLY --------------------------------------------------------------------

PointCloud parse_ply(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  auto next = [&]() -> bool {
    if (!std::getline(in, line)) return false;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    ++line_no;
    return true;
  };
  if (!next() || line != "ply") throw ParseError(source, line_no, "missing 'ply' magic");
  std::size_t vertices = 0;
  bool in_vertex = false;
  bool seen_element = false;
  std::vector<std::string> props;
  while (true) {
    if (!next()) throw ParseError(source, line_no, "missing end_header");
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok[0] == "end_header") break;
    if (tok[0] == "comment" || tok[0] == "obj_info") continue;
    if (tok[0] == "format") {
      if (tok.size() < 2) throw ParseError(source, line_no, "bad format line");
      if (tok[1] != "ascii") throw UnsupportedFormat(source + ": only ascii PLY is supported");
    } else if (tok[0] == "element") {
      if (tok.size() != 3) throw ParseError(source, line_no, "bad element line");
      if (tok[1] == "vertex") {
        if (seen_element) throw UnsupportedFormat(source + ": vertex element must come first");
        if (!parse_size(tok[2], vertices)) throw ParseError(source, line_no, "bad vertex count");
        in_vertex = true;
      } else {
        in_vertex = false;
      }
      seen_element = true;
    } else if (tok[0] == "property") {
      if (tok.size() < 3) throw ParseError(source, line_no, "bad property line");
      if (in_vertex) {
        if (tok[1] == "list") throw UnsupportedFormat(source + ": list property in vertex element");
        props.emplace_back(tok.back());
      }
    } else {
      throw ParseError(source, line_no, "unknown header entry");
    }
  }
  int ix = -1, iy = -1, iz = -1, il = -1;
  for (std::size_t i = 0; i < props.size(); ++i) {
    if (props[i] == "x") ix = static_cast<int>(i);
    if (props[i] == "y") iy = static_cast<int>(i);
    if (props[i] == "z") iz = static_cast<int>(i);
    if (props[i] == "label") il = static_cast<int>(i);
  }
  if (ix < 0 || iy < 0 || iz < 0) throw UnsupportedFormat(source + ": vertex needs x y z");

  std::vector<Point3> pts;
  std::vector<Label> labels;
  std::size_t read = 0;
  while (read < vertices) {
    if (!next()) throw ParseError(source, line_no, "fewer vertex rows than declared");
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok.size() != props.size()) throw ParseError(source, line_no, "vertex row width mismatch");
    double v[4] = {0, 0, 0, 0};
    const int idx[4] = {ix, iy, iz, il};
    for (int k = 0; k < (il >= 0 ? 4 : 3); ++k) {
      if (!parse_double(tok[idx[k]], v[k])) throw ParseError(source, line_no, "bad number");
    }
    ++read;
    const Point3 p(v[0], v[1], v[2]);
    if (!p.allFinite()) continue;
    pts.push_back(p);
    if (il >= 0) labels.push_back(label_from(v[3], source, line_no));
  }
  PointCloud cloud(std::move(pts));
  if (il >= 0) cloud.set_labels(std::move(labels));
  return cloud;
}

std::string serialize_ply(const PointCloud& cloud) {
  std::string out = "ply\nformat ascii 1.0\nelement vertex " + std::to_string(cloud.size()) +
                    "\nproperty float x\nproperty float y\nproperty float z\n";
  if (cloud.has_labels()) out += "property uchar label\n";
  out += "end_header\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud[i];
    out += fmt_float(static_cast<float>(p.x())) + ' ' + fmt_float(static_cast<float>(p.y())) +
           ' ' + fmt_float(static_cast<float>(p.z()));
    if (cloud.has_labels()) out += ' ' + std::to_string(static_cast<int>(cloud.label(i)));
    out += '\n';
  }
  return out;
}

// --- files ------------------------------------------------------------------

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

PointCloud read_cloud(const fs::path& path) {
  const std::string bytes = read_file(path);
  const std::string ext = path.extension().string();
  if (ext == ".ply") return parse_ply(bytes, path.string());
  if (ext == ".pcd") return parse_pcd(bytes, path.string());
  throw UnsupportedFormat(path.string() + ": unknown extension '" + ext + "'");
}

void write_cloud(const PointCloud& cloud, const fs::path& path, PcdEncoding encoding) {
  const std::string ext = path.extension().string();
  if (ext == ".ply") {
    write_file_atomic(path, serialize_ply(cloud));
  } else if (ext == ".pcd") {
    write_file_atomic(path, serialize_pcd(cloud, encoding));
  } else {
    throw UnsupportedFormat(path.string() + ": unknown extension '" + ext + "'");
  }
}

// --- poses ------------------------------------------------------------------

PoseFile parse_poses(const std::string& text, const std::string& source) {
  PoseFile out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    const auto tok = split_ws(std::string_view(line).substr(0, hash));
    if (tok.empty()) continue;
    if (tok.size() != 8) throw ParseError(source, line_no, "expected 8 values");
    double v[8];
    for (int i = 0; i < 8; ++i) {
      if (!parse_double(tok[i], v[i]) || !std::isfinite(v[i])) {
        throw ParseError(source, line_no, "bad number '" + std::string(tok[i]) + "'");
      }
    }
    const Eigen::Quaterniond q(v[7], v[4], v[5], v[6]);
    const double norm = q.norm();
    if (!(norm > 1e-12)) throw ParseError(source, line_no, "zero quaternion");
    if (std::abs(norm - 1.0) > 1e-3) {
      out.warnings.push_back(source + ":" + std::to_string(line_no) +
                             ": quaternion norm " + fmt_double(norm) + " normalized");
    }
    out.poses.push_back({v[0], Pose(q, Point3(v[1], v[2], v[3]))});
  }
  return out;
}

PoseFile read_poses(const fs::path& path) { return parse_poses(read_file(path), path.string()); }

void write_poses(const fs::path& path, const std::vector<StampedPose>& poses) {
  std::string out = "# timestamp tx ty tz qx qy qz qw\n";
  for (const auto& sp : poses) {
    const auto& t = sp.pose.translation();
    const auto& q = sp.pose.rotation();
    for (double v : {sp.timestamp, t.x(), t.y(), t.z(), q.x(), q.y(), q.z()}) {
      out += fmt_double(v) + ' ';
    }
    out += fmt_double(q.w()) + '\n';
  }
  write_file_atomic(path, out);
}

std::vector<Pose> read_kitti_poses(const fs::path& path) {
  const std::string text = read_file(path);
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::vector<Pose> out;
  while (std::getline(in, line)) {
    ++line_no;
    const auto tok = split_ws(line);
    if (tok.empty() || tok[0].front() == '#') continue;
    if (tok.size() != 12) throw ParseError(path.string(), line_no, "expected 12 values");
    std::array<double, 12> v{};
    for (int i = 0; i < 12; ++i) {
      if (!parse_double(tok[i], v[i])) throw ParseError(path.string(), line_no, "bad number");
    }
    out.push_back(Pose::from_row_major(v));
  }
  return out;
}

// --- sessions ---------------------------------------------------------------

PointCloud assemble_map(const SessionMap& session) {
  const auto offsets = frame_offsets(session);
  std::vector<Point3> pts(offsets.back());
  bool all_labeled = !session.frames.empty();
  for (const auto& f : session.frames) all_labeled = all_labeled && f.scan.has_labels();
  std::vector<Label> labels;
  if (all_labeled) labels.resize(pts.size());
  for (std::size_t fi = 0; fi < session.frames.size(); ++fi) {
    const auto& f = session.frames[fi];
    const Eigen::Matrix3d r = f.pose.rotation_matrix();
    const Eigen::Vector3d t = f.pose.translation();
    for (std::size_t j = 0; j < f.scan.size(); ++j) {
      pts[offsets[fi] + j] = r * f.scan[j] + t;
      if (all_labeled) labels[offsets[fi] + j] = f.scan.label(j);
    }
  }
  PointCloud out(std::move(pts));
  if (all_labeled) out.set_labels(std::move(labels));
  return out;
}

std::vector<std::size_t> frame_offsets(const SessionMap& session) {
  std::vector<std::size_t> off(session.frames.size() + 1, 0);
  for (std::size_t i = 0; i < session.frames.size(); ++i) {
    off[i + 1] = off[i] + session.frames[i].scan.size();
  }
  return off;
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  std::ostringstream ss;
  for (unsigned int i = 0; i < len; ++i) {
    ss << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  }
  return ss.str();
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

void write_session(const SessionMap& session, const fs::path& dir) {
  if (session.frames.empty()) throw DataError("session has no frames");
  fs::create_directories(dir / "scans");
  nlohmann::json j;
  j["schema_version"] = 1;
  j["id"] = session.id;
  j["frame_count"] = session.frames.size();
  j["poses"] = "poses.txt";
  j["metadata"] = session.metadata;
  nlohmann::json scans = nlohmann::json::array();
  nlohmann::json sums = nlohmann::json::object();
  std::vector<StampedPose> poses;
  for (std::size_t i = 0; i < session.frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "scans/%06zu.pcd", i);
    const std::string bytes = serialize_pcd(session.frames[i].scan, PcdEncoding::Binary);
    write_file_atomic(dir / name, bytes);
    scans.push_back(name);
    sums[name] = sha256_hex(bytes);
    poses.push_back({session.frames[i].timestamp, session.frames[i].pose});
  }
  write_poses(dir / "poses.txt", poses);
  sums["poses.txt"] = sha256_file(dir / "poses.txt");
  j["scans"] = scans;
  j["checksums"] = sums;
  write_file_atomic(dir / "session.json", j.dump(2) + "\n");
}

SessionMap read_session(const fs::path& dir) {
  const fs::path manifest = dir / "session.json";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(manifest));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(manifest.string(), 0, e.what());
  }
  SessionMap s;
  try {
    s.id = j.at("id").get<std::string>();
    if (j.contains("metadata")) s.metadata = j["metadata"].get<std::map<std::string, std::string>>();
    const auto& sums = j.at("checksums");
    auto verified = [&](const std::string& rel) {
      const std::string bytes = read_file(dir / rel);
      if (sums.contains(rel) && sums[rel].get<std::string>() != sha256_hex(bytes)) {
        throw DataError((dir / rel).string() + ": checksum mismatch");
      }
      return bytes;
    };
    const std::string pose_rel = j.at("poses").get<std::string>();
    const PoseFile poses = parse_poses(verified(pose_rel), (dir / pose_rel).string());
    const auto scans = j.at("scans").get<std::vector<std::string>>();
    const std::size_t n = j.at("frame_count").get<std::size_t>();
    if (scans.size() != n || poses.poses.size() != n) {
      throw DataError(manifest.string() + ": frame count does not match scans/poses");
    }
    if (n == 0) throw DataError(manifest.string() + ": session has no frames");
    for (std::size_t i = 0; i < n; ++i) {
      Frame f;
      f.timestamp = poses.poses[i].timestamp;
      f.pose = poses.poses[i].pose;
      f.scan = parse_pcd(verified(scans[i]), (dir / scans[i]).string());
      s.frames.push_back(std::move(f));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(manifest.string(), 0, e.what());
  }
  return s;
}

}  // namespace lifemap
