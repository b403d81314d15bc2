#pragma once

#include <unistd.h>

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "lifemap/geom.hpp"

namespace lifemap::test {

inline std::vector<Point3> random_points(std::size_t n, double lo, double hi, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<Point3> pts(n);
  for (auto& p : pts) p = Point3(u(rng), u(rng), u(rng));
  return pts;
}

inline PointCloud random_cloud(std::size_t n, double lo, double hi, std::uint64_t seed) {
  return PointCloud(random_points(n, lo, hi, seed));
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("lifemap_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

// Brute-force point-set helpers used as oracles.
inline std::size_t count_matched(const PointCloud& a, const PointCloud& b, double eps) {
  std::size_t n = 0;
  for (const auto& p : a.points()) {
    for (const auto& q : b.points()) {
      if ((p - q).norm() <= eps) {
        ++n;
        break;
      }
    }
  }
  return n;
}

}  // namespace lifemap::test
