#pragma once

#include <filesystem>
#include <string>

#include <Eigen/Core>

#include "anapred/common.hpp"

namespace anapred {

enum class VolumeKind { Image, Dose, Mask };

std::string kind_name(VolumeKind k);
VolumeKind kind_from_name(const std::string& s);

// Dense 3D scalar grid with physical spacing. Data is float32, x-fastest.
struct Volume {
  Grid3 shape;
  Vec3 spacing_mm = Vec3(1, 1, 1);
  Vec3 origin_mm = Vec3(0, 0, 0);
  VolumeKind kind = VolumeKind::Image;
  std::string channel;
  Eigen::VectorXf data;

  float& at(int ix, int iy, int iz) { return data[shape.flat(ix, iy, iz)]; }
  float at(int ix, int iy, int iz) const { return data[shape.flat(ix, iy, iz)]; }

  static Volume filled(Grid3 shape, float value, VolumeKind kind,
                       Vec3 spacing_mm = Vec3(2, 2, 2));

  // Throws on violated invariants (non-positive spacing, size mismatch,
  // non-binary mask values).
  void validate() const;
};

// On-disk pair: <base>.mvol.json header + <base>.mvol.raw little-endian f32
// payload. `path` may be given with or without the .mvol.json suffix.
Volume read_volume(const std::filesystem::path& path);
void write_volume(const Volume& v, const std::filesystem::path& path);

// Preprocessing operators. All are pure.
Volume resample(const Volume& v, Vec3 target_spacing_mm);
Volume center_crop_pad(const Volume& v, Grid3 target_shape);
Volume clip_minmax_normalize(const Volume& v);
Volume zscore_normalize(const Volume& v);
Volume binarize(const Volume& v, float threshold);

}  // namespace anapred
