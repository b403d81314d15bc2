#pragma once

#include <cmath>
#include <cstdint>

#include "lifemap/geom.hpp"

namespace lifemap {

/// Integer voxel coordinates floor(p / size).
struct VoxelKey {
  std::int32_t x = 0;
  std::int32_t y = 0;
  std::int32_t z = 0;

  friend bool operator==(const VoxelKey&, const VoxelKey&) = default;
  friend auto operator<=>(const VoxelKey&, const VoxelKey&) = default;

  template <typename H>
  friend H AbslHashValue(H h, const VoxelKey& k) {
    return H::combine(std::move(h), k.x, k.y, k.z);
  }
};

inline VoxelKey voxel_of(const Point3& p, double size) {
  return {static_cast<std::int32_t>(std::floor(p.x() / size)),
          static_cast<std::int32_t>(std::floor(p.y() / size)),
          static_cast<std::int32_t>(std::floor(p.z() / size))};
}

}  // namespace lifemap
