#include "anapred/volume.hpp"

#include <bit>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "anapred/sampling.hpp"

static_assert(std::endian::native == std::endian::little,
              "raw volume payloads are little-endian");

namespace anapred {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string kind_name(VolumeKind k) {
  switch (k) {
    case VolumeKind::Image: return "image";
    case VolumeKind::Dose: return "dose";
    case VolumeKind::Mask: return "mask";
  }
  throw std::runtime_error("bad volume kind");
}

VolumeKind kind_from_name(const std::string& s) {
  if (s == "image") return VolumeKind::Image;
  if (s == "dose") return VolumeKind::Dose;
  if (s == "mask") return VolumeKind::Mask;
  throw std::runtime_error("unknown volume kind: " + s);
}

Volume Volume::filled(Grid3 shape, float value, VolumeKind kind,
                      Vec3 spacing_mm) {
  Volume v;
  v.shape = shape;
  v.spacing_mm = spacing_mm;
  v.kind = kind;
  v.data = Eigen::VectorXf::Constant(shape.count(), value);
  return v;
}

void Volume::validate() const {
  if (shape.x < 1 || shape.y < 1 || shape.z < 1)
    throw std::runtime_error("non-positive volume shape " + shape.str());
  if (spacing_mm.minCoeff() <= 0.0)
    throw std::runtime_error("non-positive voxel spacing");
  if (data.size() != shape.count())
    throw std::runtime_error("volume data size " + std::to_string(data.size()) +
                             " does not match shape " + shape.str());
  if (kind == VolumeKind::Mask) {
    for (Eigen::Index i = 0; i < data.size(); ++i)
      if (data[i] != 0.0f && data[i] != 1.0f)
        throw std::runtime_error("non-binary mask value " +
                                 std::to_string(data[i]));
  }
}

namespace {

// Strip any of .mvol/.mvol.json/.mvol.raw so callers can pass either form.
std::string base_path(const fs::path& path) {
  std::string s = path.string();
  for (const char* suffix : {".mvol.json", ".mvol.raw", ".mvol"}) {
    std::string suf(suffix);
    if (s.size() > suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0)
      return s.substr(0, s.size() - suf.size());
  }
  return s;
}

void write_file_atomic(const fs::path& target, const char* bytes,
                       std::size_t n) {
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string());
    out.write(bytes, std::streamsize(n));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, target);
}

}  // namespace

void write_volume(const Volume& v, const fs::path& path) {
  v.validate();
  std::string base = base_path(path);

  json h;
  h["shape"] = {v.shape.x, v.shape.y, v.shape.z};
  h["spacing_mm"] = {v.spacing_mm[0], v.spacing_mm[1], v.spacing_mm[2]};
  h["origin_mm"] = {v.origin_mm[0], v.origin_mm[1], v.origin_mm[2]};
  h["kind"] = kind_name(v.kind);
  h["dtype"] = "f32";
  h["order"] = "xyz-le";
  h["channel"] = v.channel;
  std::string htext = h.dump(2);
  htext += '\n';

  // Payload first, header last: the header's presence marks a complete pair.
  write_file_atomic(base + ".mvol.raw",
                    reinterpret_cast<const char*>(v.data.data()),
                    std::size_t(v.data.size()) * sizeof(float));
  write_file_atomic(base + ".mvol.json", htext.data(), htext.size());
}

Volume read_volume(const fs::path& path) {
  std::string base = base_path(path);
  fs::path hpath = base + ".mvol.json";
  fs::path rpath = base + ".mvol.raw";

  if (!fs::exists(hpath))
    throw MissingInputError("missing volume header: " + hpath.string());
  if (!fs::exists(rpath))
    throw MissingInputError("missing volume payload: " + rpath.string());

  json h;
  try {
    std::ifstream in(hpath);
    h = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("corrupt volume header " + hpath.string() + ": " +
                             e.what());
  }

  Volume v;
  try {
    v.shape = {h.at("shape").at(0).get<int>(), h.at("shape").at(1).get<int>(),
               h.at("shape").at(2).get<int>()};
    for (int d = 0; d < 3; ++d) {
      v.spacing_mm[d] = h.at("spacing_mm").at(d).get<double>();
      v.origin_mm[d] = h.at("origin_mm").at(d).get<double>();
    }
    v.kind = kind_from_name(h.at("kind").get<std::string>());
    if (h.at("dtype").get<std::string>() != "f32" ||
        h.at("order").get<std::string>() != "xyz-le")
      throw std::runtime_error("unsupported dtype/order");
    v.channel = h.value("channel", std::string());
  } catch (const json::exception& e) {
    throw std::runtime_error("corrupt volume header " + hpath.string() + ": " +
                             e.what());
  }

  std::uintmax_t expect = std::uintmax_t(v.shape.count()) * sizeof(float);
  std::uintmax_t actual = fs::file_size(rpath);
  if (actual != expect)
    throw std::runtime_error("payload size mismatch for " + rpath.string() +
                             ": got " + std::to_string(actual) + " bytes, want " +
                             std::to_string(expect));

  v.data.resize(v.shape.count());
  std::ifstream in(rpath, std::ios::binary);
  in.read(reinterpret_cast<char*>(v.data.data()), std::streamsize(expect));
  if (!in) throw std::runtime_error("short read: " + rpath.string());

  if (v.kind == VolumeKind::Mask)
    for (Eigen::Index i = 0; i < v.data.size(); ++i)
      if (v.data[i] != 0.0f && v.data[i] != 1.0f)
        throw std::runtime_error("non-binary mask in " + rpath.string());
  return v;
}

Volume resample(const Volume& v, Vec3 target_spacing_mm) {
  if (target_spacing_mm.minCoeff() <= 0.0)
    throw std::runtime_error("non-positive target spacing");
  if ((v.spacing_mm - target_spacing_mm).cwiseAbs().maxCoeff() == 0.0)
    return v;

  Grid3 out_shape;
  int* dims[3] = {&out_shape.x, &out_shape.y, &out_shape.z};
  int in_dims[3] = {v.shape.x, v.shape.y, v.shape.z};
  for (int d = 0; d < 3; ++d) {
    double extent = in_dims[d] * v.spacing_mm[d];
    *dims[d] = std::max(1, int(std::lround(extent / target_spacing_mm[d])));
  }

  Volume out;
  out.shape = out_shape;
  out.spacing_mm = target_spacing_mm;
  out.origin_mm = v.origin_mm;
  out.kind = v.kind;
  out.channel = v.channel;
  out.data.resize(out_shape.count());

  // Voxel-center mapping: output voxel i sits at input coordinate
  // (i + 0.5) * s_out / s_in - 0.5.
  Vec3 ratio = target_spacing_mm.cwiseQuotient(v.spacing_mm);
  const float* src = v.data.data();
  bool nearest = v.kind == VolumeKind::Mask;
  for (int iz = 0; iz < out_shape.z; ++iz) {
    double uz = (iz + 0.5) * ratio[2] - 0.5;
    for (int iy = 0; iy < out_shape.y; ++iy) {
      double uy = (iy + 0.5) * ratio[1] - 0.5;
      for (int ix = 0; ix < out_shape.x; ++ix) {
        double ux = (ix + 0.5) * ratio[0] - 0.5;
        float val = nearest ? sample_nearest(src, v.shape, ux, uy, uz)
                            : float(sample_trilinear<double>(src, v.shape, ux, uy, uz));
        out.data[out_shape.flat(ix, iy, iz)] = val;
      }
    }
  }
  if (v.kind == VolumeKind::Mask) out = binarize(out, 0.5f);
  return out;
}

Volume center_crop_pad(const Volume& v, Grid3 target_shape) {
  if (target_shape.x < 1 || target_shape.y < 1 || target_shape.z < 1)
    throw std::runtime_error("non-positive target shape");
  if (v.shape == target_shape) return v;

  float pad = v.kind == VolumeKind::Image ? -1000.0f : 0.0f;

  // Per axis: src index = dst index + off. Truncating division puts the odd
  // voxel of a crop or a pad on the high-index side in both directions.
  int in_dims[3] = {v.shape.x, v.shape.y, v.shape.z};
  int out_dims[3] = {target_shape.x, target_shape.y, target_shape.z};
  int off[3];
  for (int d = 0; d < 3; ++d) off[d] = (in_dims[d] - out_dims[d]) / 2;

  Volume out;
  out.shape = target_shape;
  out.spacing_mm = v.spacing_mm;
  out.origin_mm = v.origin_mm + Vec3(off[0] * v.spacing_mm[0],
                                     off[1] * v.spacing_mm[1],
                                     off[2] * v.spacing_mm[2]);
  out.kind = v.kind;
  out.channel = v.channel;
  out.data.resize(target_shape.count());

  for (int iz = 0; iz < target_shape.z; ++iz) {
    int sz = iz + off[2];
    for (int iy = 0; iy < target_shape.y; ++iy) {
      int sy = iy + off[1];
      bool in_yz = sz >= 0 && sz < v.shape.z && sy >= 0 && sy < v.shape.y;
      for (int ix = 0; ix < target_shape.x; ++ix) {
        int sx = ix + off[0];
        bool inside = in_yz && sx >= 0 && sx < v.shape.x;
        out.data[target_shape.flat(ix, iy, iz)] =
            inside ? v.data[v.shape.flat(sx, sy, sz)] : pad;
      }
    }
  }
  return out;
}

Volume clip_minmax_normalize(const Volume& v) {
  if (v.kind != VolumeKind::Image)
    throw std::runtime_error("clip_minmax_normalize expects an image volume");
  Volume out = v;
  for (Eigen::Index i = 0; i < out.data.size(); ++i)
    out.data[i] = std::clamp(out.data[i], -1000.0f, 1000.0f) / 1000.0f;
  return out;
}

Volume zscore_normalize(const Volume& v) {
  if (v.kind != VolumeKind::Dose)
    throw std::runtime_error("zscore_normalize expects a dose volume");
  double n = double(v.data.size());
  double mean = 0.0;
  for (Eigen::Index i = 0; i < v.data.size(); ++i) mean += v.data[i];
  mean /= n;
  double var = 0.0;
  for (Eigen::Index i = 0; i < v.data.size(); ++i) {
    double d = v.data[i] - mean;
    var += d * d;
  }
  double sd = std::sqrt(var / n);

  Volume out = v;
  if (sd < 1e-8) {
    out.data.setZero();
  } else {
    for (Eigen::Index i = 0; i < out.data.size(); ++i)
      out.data[i] = float((out.data[i] - mean) / sd);
  }
  return out;
}

Volume binarize(const Volume& v, float threshold) {
  Volume out = v;
  out.kind = VolumeKind::Mask;
  for (Eigen::Index i = 0; i < out.data.size(); ++i)
    out.data[i] = out.data[i] >= threshold ? 1.0f : 0.0f;
  return out;
}

}  // namespace anapred
