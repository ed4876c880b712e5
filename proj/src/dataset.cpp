#include "anapred/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace anapred {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

void Dvf::validate() const {
  if (disp.rows() != 3 || disp.cols() != shape.count())
    throw ConfigError("deformation field shape mismatch");
  if (!disp.allFinite()) throw NumericError("non-finite deformation field");
}

namespace {

void check_like(const Volume& v, const Volume& ref, const char* name,
                VolumeKind kind) {
  v.validate();
  if (v.kind != kind)
    throw ConfigError(std::string("bundle volume ") + name +
                      " has kind " + kind_name(v.kind) + ", expected " +
                      kind_name(kind));
  if (!(v.shape == ref.shape) || !v.spacing_mm.isApprox(ref.spacing_mm) ||
      !v.origin_mm.isApprox(ref.origin_mm))
    throw ConfigError(std::string("bundle volume ") + name +
                      " is not aligned with the planning image");
}

}  // namespace

void CaseBundle::validate() const {
  if (case_id.empty()) throw ConfigError("bundle has an empty case id");
  check_like(ct, ct, "ct", VolumeKind::Image);
  check_like(dose, ct, "dose", VolumeKind::Dose);
  check_like(cbct01, ct, "cbct01", VolumeKind::Image);
  check_like(gtvp01, ct, "gtvp01", VolumeKind::Mask);
  check_like(gtvn01, ct, "gtvn01", VolumeKind::Mask);
  int targets = int(cbct21.has_value()) + int(gtvp21.has_value()) +
                int(gtvn21.has_value());
  if (targets != 0 && targets != 3)
    throw ConfigError("bundle targets must be all present or all absent");
  if (cbct21) {
    check_like(*cbct21, ct, "cbct21", VolumeKind::Image);
    check_like(*gtvp21, ct, "gtvp21", VolumeKind::Mask);
    check_like(*gtvn21, ct, "gtvn21", VolumeKind::Mask);
  }
  if (gt_dvf) {
    if (!cbct21)
      throw ConfigError("bundle has a reference deformation but no targets");
    gt_dvf->validate();
    if (!(gt_dvf->shape == ct.shape) ||
        !gt_dvf->spacing_mm.isApprox(ct.spacing_mm))
      throw ConfigError("reference deformation is not aligned with the case");
  }
}

const Volume& baseline_image(const CaseBundle& c, const InputSelection& sel) {
  return sel.baseline == BaselineKind::CT ? c.ct : c.cbct01;
}

Mat<float> stack_input(const CaseBundle& c, const InputSelection& sel) {
  c.validate();
  std::int64_t v = c.ct.shape.count();
  Mat<float> out = Mat<float>::Zero(7, v);
  const Volume& first =
      sel.baseline == BaselineKind::CT ? c.cbct01 : c.ct;
  if (sel.use_ct) out.row(0) = first.data.transpose();
  if (sel.use_gtv_masks) {
    out.row(1) = c.gtvp01.data.transpose();
    out.row(2) = c.gtvn01.data.transpose();
    out.row(5) = c.gtvp01.data.transpose();
    out.row(6) = c.gtvn01.data.transpose();
  }
  if (sel.use_dose) out.row(3) = c.dose.data.transpose();
  out.row(4) = baseline_image(c, sel).data.transpose();
  return out;
}

namespace {

// Combined voxel-space transform: flip about the x center, rotate about the
// z axis through the volume center, then shift by whole voxels.
struct Transform {
  bool flip_x = false;
  double angle_rad = 0;
  std::array<double, 3> shift{0, 0, 0};

  bool identity() const {
    return !flip_x && angle_rad == 0 && shift[0] == 0 && shift[1] == 0 &&
           shift[2] == 0;
  }
};

constexpr float kImagePad = -1.0f;
constexpr double kPi = 3.14159265358979323846;

float pad_value(VolumeKind k) {
  return k == VolumeKind::Image ? kImagePad : 0.0f;
}

// Pull-sample position in the source grid for output voxel (x, y, z).
std::array<double, 3> pull_position(const Transform& t, Grid3 g, int x, int y,
                                    int z) {
  double cx = 0.5 * (g.x - 1), cy = 0.5 * (g.y - 1), cz = 0.5 * (g.z - 1);
  double wx = x - t.shift[0] - cx;
  double wy = y - t.shift[1] - cy;
  double wz = z - t.shift[2] - cz;
  double c = std::cos(t.angle_rad), s = std::sin(t.angle_rad);
  double rx = c * wx + s * wy;   // rotation by -angle
  double ry = -s * wx + c * wy;
  if (t.flip_x) rx = -rx;
  return {rx + cx, ry + cy, wz + cz};
}

float sample_trilinear(const Eigen::VectorXf& d, Grid3 g,
                       const std::array<double, 3>& p, float pad) {
  int x0 = int(std::floor(p[0])), y0 = int(std::floor(p[1])),
      z0 = int(std::floor(p[2]));
  double fx = p[0] - x0, fy = p[1] - y0, fz = p[2] - z0;
  float acc = 0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
        if (w == 0) continue;
        int xi = x0 + dx, yi = y0 + dy, zi = z0 + dz;
        float v = (xi >= 0 && xi < g.x && yi >= 0 && yi < g.y && zi >= 0 &&
                   zi < g.z)
                      ? d[g.flat(xi, yi, zi)]
                      : pad;
        acc += float(w * v);
      }
  return acc;
}

float sample_nearest(const Eigen::VectorXf& d, Grid3 g,
                     const std::array<double, 3>& p, float pad) {
  int xi = int(std::llround(p[0])), yi = int(std::llround(p[1])),
      zi = int(std::llround(p[2]));
  if (xi < 0 || xi >= g.x || yi < 0 || yi >= g.y || zi < 0 || zi >= g.z)
    return pad;
  return d[g.flat(xi, yi, zi)];
}

Volume resample_volume(const Volume& v, const Transform& t) {
  Volume out = v;
  Grid3 g = v.shape;
  float pad = pad_value(v.kind);
  bool nearest = v.kind == VolumeKind::Mask;
  for (int z = 0; z < g.z; ++z)
    for (int y = 0; y < g.y; ++y)
      for (int x = 0; x < g.x; ++x) {
        auto p = pull_position(t, g, x, y, z);
        out.data[g.flat(x, y, z)] =
            nearest ? sample_nearest(v.data, g, p, pad)
                    : sample_trilinear(v.data, g, p, pad);
      }
  return out;
}

// Displacement fields resample like images, then each vector is mapped by
// the transform's linear part (flip then rotation).
Dvf resample_dvf(const Dvf& f, const Transform& t) {
  Dvf out = f;
  Grid3 g = f.shape;
  double c = std::cos(t.angle_rad), s = std::sin(t.angle_rad);
  std::array<Eigen::VectorXf, 3> comp;
  for (int r = 0; r < 3; ++r)
    comp[std::size_t(r)] = f.disp.row(r).transpose();
  for (int z = 0; z < g.z; ++z)
    for (int y = 0; y < g.y; ++y)
      for (int x = 0; x < g.x; ++x) {
        auto p = pull_position(t, g, x, y, z);
        std::int64_t o = g.flat(x, y, z);
        std::array<double, 3> d;
        for (int r = 0; r < 3; ++r)
          d[std::size_t(r)] = sample_trilinear(comp[std::size_t(r)], g, p, 0.0f);
        if (t.flip_x) d[0] = -d[0];
        out.disp(0, o) = float(c * d[0] - s * d[1]);
        out.disp(1, o) = float(s * d[0] + c * d[1]);
        out.disp(2, o) = float(d[2]);
      }
  return out;
}

void add_noise(Volume& v, std::uint64_t seed, double sigma) {
  Rng rng(seed);
  for (Eigen::Index i = 0; i < v.data.size(); ++i)
    v.data[i] += float(rng.normal() * sigma);
}

}  // namespace

CaseBundle augment(const CaseBundle& c, const AugmentSpec& spec) {
  c.validate();
  if (spec.max_shift_voxels < 0 || spec.max_rotation_deg < 0 ||
      spec.noise_sigma < 0 || spec.probability < 0 || spec.probability > 1)
    throw ConfigError("augmentation parameters out of range");
  Rng rng(spec.seed);
  // Fixed draw order keeps results stable across flag combinations.
  bool want_flip = rng.bernoulli(spec.probability);
  bool want_shift = rng.bernoulli(spec.probability);
  bool want_rot = rng.bernoulli(spec.probability);
  bool want_noise = rng.bernoulli(spec.probability);

  Transform t;
  t.flip_x = want_flip && spec.flip_x;
  if (want_shift && spec.max_shift_voxels > 0)
    for (int a = 0; a < 3; ++a)
      t.shift[std::size_t(a)] = double(
          rng.uniform_int(-std::int64_t(spec.max_shift_voxels),
                          std::int64_t(spec.max_shift_voxels)));
  if (want_rot && spec.max_rotation_deg > 0)
    t.angle_rad = rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg) *
                  (kPi / 180.0);
  bool noisy = want_noise && spec.noise_sigma > 0;

  CaseBundle out = c;
  if (!t.identity()) {
    out.ct = resample_volume(c.ct, t);
    out.dose = resample_volume(c.dose, t);
    out.cbct01 = resample_volume(c.cbct01, t);
    out.gtvp01 = resample_volume(c.gtvp01, t);
    out.gtvn01 = resample_volume(c.gtvn01, t);
    if (c.cbct21) out.cbct21 = resample_volume(*c.cbct21, t);
    if (c.gtvp21) out.gtvp21 = resample_volume(*c.gtvp21, t);
    if (c.gtvn21) out.gtvn21 = resample_volume(*c.gtvn21, t);
    if (c.gt_dvf) out.gt_dvf = resample_dvf(*c.gt_dvf, t);
  }
  if (noisy) {
    add_noise(out.ct, Rng::derive(spec.seed, 101), spec.noise_sigma);
    add_noise(out.cbct01, Rng::derive(spec.seed, 102), spec.noise_sigma);
    if (out.cbct21)
      add_noise(*out.cbct21, Rng::derive(spec.seed, 103), spec.noise_sigma);
  }
  return out;
}

SplitIds split_cases(const std::vector<std::string>& ids, double train_frac,
                     double val_frac, double test_frac, std::uint64_t seed) {
  if (ids.empty()) throw ConfigError("split needs at least one case id");
  if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1");
  if (train_frac < 0 || val_frac < 0 || test_frac < 0)
    throw ConfigError("split fractions must be non-negative");
  std::vector<std::string> pool = ids;
  Rng rng(seed);
  for (std::size_t i = pool.size(); i > 1; --i)
    std::swap(pool[i - 1], pool[std::size_t(rng.uniform_int(std::uint64_t(i)))]);
  std::int64_t n = std::int64_t(pool.size());
  std::int64_t n_val = std::lround(double(n) * val_frac);
  std::int64_t n_test = std::lround(double(n) * test_frac);
  std::int64_t n_train = n - n_val - n_test;
  if (n_train < 0) throw ConfigError("split fractions leave no training cases");
  SplitIds out;
  out.train.assign(pool.begin(), pool.begin() + n_train);
  out.val.assign(pool.begin() + n_train, pool.begin() + n_train + n_val);
  out.test.assign(pool.begin() + n_train + n_val, pool.end());
  return out;
}

namespace {

const char* const kRequiredChannels[] = {"ct", "dose", "cbct01", "gtvp01",
                                         "gtvn01"};
const char* const kTargetChannels[] = {"cbct21", "gtvp21", "gtvn21"};
const char* const kDvfChannels[] = {"dvf_x", "dvf_y", "dvf_z"};

void write_json_file(const fs::path& path, const ordered_json& j) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out.good()) throw ConfigError("failed writing " + path.string());
}

ordered_json read_json_file(const fs::path& path) {
  if (!fs::exists(path))
    throw MissingInputError("missing file: " + path.string());
  std::ifstream in(path);
  return ordered_json::parse(in);
}

}  // namespace

CaseEntry write_case(const fs::path& dir, const CaseBundle& c) {
  c.validate();
  fs::path case_dir = dir / c.case_id;
  fs::create_directories(case_dir);
  CaseEntry entry;
  entry.case_id = c.case_id;
  auto emit = [&](const char* channel, const Volume& v) {
    std::string rel = c.case_id + "/" + channel + ".mvol";
    write_volume(v, dir / rel);
    entry.paths[channel] = rel;
  };
  emit("ct", c.ct);
  emit("dose", c.dose);
  emit("cbct01", c.cbct01);
  emit("gtvp01", c.gtvp01);
  emit("gtvn01", c.gtvn01);
  if (c.cbct21) {
    emit("cbct21", *c.cbct21);
    emit("gtvp21", *c.gtvp21);
    emit("gtvn21", *c.gtvn21);
  }
  if (c.gt_dvf) {
    for (int r = 0; r < 3; ++r) {
      Volume comp;
      comp.shape = c.gt_dvf->shape;
      comp.spacing_mm = c.gt_dvf->spacing_mm;
      comp.origin_mm = c.ct.origin_mm;
      comp.kind = VolumeKind::Image;
      comp.channel = kDvfChannels[r];
      comp.data = c.gt_dvf->disp.row(r).transpose();
      emit(kDvfChannels[r], comp);
    }
  }
  return entry;
}

CaseBundle read_case(const fs::path& base_dir, const CaseEntry& entry) {
  auto load = [&](const char* channel) {
    auto it = entry.paths.find(channel);
    if (it == entry.paths.end())
      throw MissingInputError("case " + entry.case_id +
                              " has no channel " + channel);
    return read_volume(base_dir / it->second);
  };
  CaseBundle c;
  c.case_id = entry.case_id;
  c.ct = load("ct");
  c.dose = load("dose");
  c.cbct01 = load("cbct01");
  c.gtvp01 = load("gtvp01");
  c.gtvn01 = load("gtvn01");
  if (entry.paths.count("cbct21")) {
    c.cbct21 = load("cbct21");
    c.gtvp21 = load("gtvp21");
    c.gtvn21 = load("gtvn21");
  }
  if (entry.paths.count("dvf_x")) {
    Dvf f;
    f.shape = c.ct.shape;
    f.spacing_mm = c.ct.spacing_mm;
    f.disp.resize(3, c.ct.shape.count());
    for (int r = 0; r < 3; ++r) {
      Volume comp = load(kDvfChannels[r]);
      if (!(comp.shape == c.ct.shape))
        throw ConfigError("deformation component shape mismatch in case " +
                          entry.case_id);
      f.disp.row(r) = comp.data.transpose();
    }
    c.gt_dvf = std::move(f);
  }
  c.validate();
  return c;
}

CaseBundle read_case_dir(const fs::path& case_dir) {
  if (!fs::is_directory(case_dir))
    throw MissingInputError("case directory not found: " + case_dir.string());
  CaseEntry entry;
  entry.case_id = case_dir.filename().string();
  auto pick_up = [&](const char* channel) {
    if (fs::exists(case_dir / (std::string(channel) + ".mvol.json")))
      entry.paths[channel] = entry.case_id + "/" + channel + ".mvol";
  };
  for (const char* c : kRequiredChannels) pick_up(c);
  for (const char* c : kTargetChannels) pick_up(c);
  for (const char* c : kDvfChannels) pick_up(c);
  return read_case(case_dir.parent_path(), entry);
}

void write_manifest(const fs::path& path,
                    const std::vector<CaseEntry>& entries) {
  ordered_json j = ordered_json::array();
  for (const auto& e : entries) {
    ordered_json paths = ordered_json::object();
    for (const char* ch : kRequiredChannels) paths[ch] = e.paths.at(ch);
    for (const char* ch : kTargetChannels)
      if (e.paths.count(ch)) paths[ch] = e.paths.at(ch);
    for (const char* ch : kDvfChannels)
      if (e.paths.count(ch)) paths[ch] = e.paths.at(ch);
    j.push_back(ordered_json{{"case_id", e.case_id}, {"paths", paths}});
  }
  write_json_file(path, j);
}

std::vector<CaseEntry> read_manifest(const fs::path& path) {
  ordered_json j = read_json_file(path);
  std::vector<CaseEntry> out;
  for (const auto& item : j) {
    CaseEntry e;
    e.case_id = item.at("case_id").get<std::string>();
    for (const auto& [key, value] : item.at("paths").items())
      e.paths[key] = value.get<std::string>();
    out.push_back(std::move(e));
  }
  return out;
}

void write_split(const fs::path& path, const SplitIds& split) {
  write_json_file(path, ordered_json{{"train", split.train},
                                     {"val", split.val},
                                     {"test", split.test}});
}

SplitIds read_split(const fs::path& path) {
  ordered_json j = read_json_file(path);
  SplitIds s;
  s.train = j.at("train").get<std::vector<std::string>>();
  s.val = j.at("val").get<std::vector<std::string>>();
  s.test = j.at("test").get<std::vector<std::string>>();
  return s;
}

namespace {

bool is_dvf_channel(const std::string& channel) {
  for (const char* c : kDvfChannels)
    if (channel == c) return true;
  return false;
}

// Whether the per-kind normalization already holds, so the step can be
// recorded as identity instead of re-applied (re-application is not a no-op
// for images, which would be rescaled a second time).
bool normalized_already(const Volume& v) {
  switch (v.kind) {
    case VolumeKind::Image: {
      if (v.data.size() == 0) return true;
      float lo = v.data.minCoeff(), hi = v.data.maxCoeff();
      return lo >= -1.0f - 1e-6f && hi <= 1.0f + 1e-6f;
    }
    case VolumeKind::Dose: {
      if (v.data.size() == 0) return true;
      double mean = v.data.cast<double>().mean();
      double var =
          (v.data.cast<double>().array() - mean).square().sum() /
          double(v.data.size());
      double std = std::sqrt(var);
      return std::abs(mean) <= 1e-5 &&
             (std::abs(std - 1.0) <= 1e-4 || std <= 1e-8);
    }
    case VolumeKind::Mask:
      for (Eigen::Index i = 0; i < v.data.size(); ++i)
        if (v.data[i] != 0.0f && v.data[i] != 1.0f) return false;
      return true;
  }
  return true;
}

}  // namespace

void preprocess_corpus(const fs::path& in_dir, const fs::path& out_dir,
                       Vec3 target_spacing_mm, Grid3 target_shape) {
  if (!(target_spacing_mm.array() > 0).all())
    throw ConfigError("target spacing must be positive");
  if (target_shape.x < 1 || target_shape.y < 1 || target_shape.z < 1)
    throw ConfigError("target shape must be positive");

  std::vector<CaseEntry> entries = read_manifest(in_dir / "manifest.json");
  fs::create_directories(out_dir);

  ordered_json cases = ordered_json::array();
  for (const CaseEntry& entry : entries) {
    ordered_json channels = ordered_json::object();
    for (const auto& [channel, rel] : entry.paths) {
      Volume v = read_volume(in_dir / rel);
      fs::create_directories((out_dir / rel).parent_path());

      if (is_dvf_channel(channel)) {
        write_volume(v, out_dir / rel);
        channels[channel] = {{"resample", "copied"},
                             {"crop_pad", "copied"},
                             {"normalize", "copied"}};
        continue;
      }

      ordered_json steps;
      if (v.spacing_mm == target_spacing_mm) {
        steps["resample"] = "identity";
      } else {
        v = resample(v, target_spacing_mm);
        steps["resample"] = "applied";
      }
      if (v.shape == target_shape) {
        steps["crop_pad"] = "identity";
      } else {
        v = center_crop_pad(v, target_shape);
        steps["crop_pad"] = "applied";
      }
      if (normalized_already(v)) {
        steps["normalize"] = "identity";
      } else {
        switch (v.kind) {
          case VolumeKind::Image: v = clip_minmax_normalize(v); break;
          case VolumeKind::Dose: v = zscore_normalize(v); break;
          case VolumeKind::Mask: v = binarize(v, 0.5f); break;
        }
        steps["normalize"] = "applied";
      }
      write_volume(v, out_dir / rel);
      channels[channel] = steps;
    }
    cases.push_back(
        ordered_json{{"case_id", entry.case_id}, {"channels", channels}});
  }

  write_manifest(out_dir / "manifest.json", entries);
  if (fs::exists(in_dir / "split.json"))
    fs::copy_file(in_dir / "split.json", out_dir / "split.json",
                  fs::copy_options::overwrite_existing);

  ordered_json prov = {
      {"target",
       {{"spacing_mm",
         {target_spacing_mm.x(), target_spacing_mm.y(),
          target_spacing_mm.z()}},
        {"shape", {target_shape.x, target_shape.y, target_shape.z}}}},
      {"cases", cases}};
  write_json_file(out_dir / "provenance.json", prov);
}

}  // namespace anapred
