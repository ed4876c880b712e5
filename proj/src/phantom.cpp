#include "anapred/phantom.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

#include "anapred/graph.hpp"
#include "anapred/graph_spatial.hpp"

namespace anapred {

namespace {

constexpr double kPi = 3.14159265358979323846;
// Compact quintic falloff: 1 at 0, 0 at 1, with zero slope at both ends.
double quintic(double t) {
  if (t <= 0) return 1.0;
  if (t >= 1) return 0.0;
  return 1.0 - 10 * t * t * t + 15 * t * t * t * t - 6 * t * t * t * t * t;
}

double smoothstep01(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

// Tumor support extends this factor beyond the tumor radius.
constexpr double kSupportFactor = 2.5;
// Body-surface band half-width in units of the ellipsoid level value.
constexpr double kBodyBandRho = 0.28;
// Largest value of t*quintic(t) on [0,1], used for displacement bounds.
constexpr double kMaxRadialGain = 0.275;

// Radial pull strength that maps the tumor boundary from the shrunk radius
// back to the original one: r_t * (1 + alpha*q(r_t/R_s)) == R.
double shrink_alpha(double volume_ratio) {
  if (volume_ratio >= 1.0) return 0.0;
  double r_t = std::cbrt(volume_ratio);
  return (1.0 / r_t - 1.0) / quintic(r_t / kSupportFactor);
}

struct Cosine {
  Vec3 freq;  // radians per mm
  double phase = 0;
  double amp = 0;
};

std::vector<Cosine> draw_cosines(Rng& rng, int count, int max_cycles,
                                 double amp_lo, double amp_hi,
                                 const Vec3& extent_mm) {
  std::vector<Cosine> out;
  for (int i = 0; i < count; ++i) {
    Cosine c;
    std::array<std::int64_t, 3> k{};
    for (auto& v : k) v = rng.uniform_int(-max_cycles, max_cycles);
    if (k[0] == 0 && k[1] == 0 && k[2] == 0) k[0] = 1;
    for (int a = 0; a < 3; ++a)
      c.freq[a] = 2.0 * kPi * double(k[std::size_t(a)]) / extent_mm[a];
    c.phase = rng.uniform(0, 2 * kPi);
    c.amp = rng.uniform(amp_lo, amp_hi);
    out.push_back(c);
  }
  return out;
}

double eval_cosines(const std::vector<Cosine>& cs, const Vec3& p) {
  double acc = 0;
  for (const auto& c : cs) acc += c.amp * std::cos(c.freq.dot(p) + c.phase);
  return acc;
}

}  // namespace

void PhantomSpec::validate() const {
  if (shape.x < 8 || shape.y < 8 || shape.z < 8)
    throw ConfigError("phantom grid must be at least 8 voxels per axis");
  if (spacing_mm.minCoeff() <= 0)
    throw ConfigError("phantom spacing must be positive");
  for (int a = 0; a < 3; ++a) {
    double center_vox = 0.5 * ((a == 0 ? shape.x : a == 1 ? shape.y : shape.z) - 1);
    double room_mm = (center_vox - 2.0) * spacing_mm[a];
    if (body_semiaxes_mm[a] <= 0 || body_semiaxes_mm[a] > room_mm)
      throw ConfigError(
          "body does not fit inside the grid with a 2-voxel margin");
  }
  if (gtvp_radius_mm <= 0 || gtvn_radius_mm <= 0)
    throw ConfigError("tumor radii must be positive");
  if (shrink_factor <= 0 || shrink_factor > 1)
    throw ConfigError("shrink factor must lie in (0, 1]");
  double alpha = shrink_alpha(shrink_factor);
  if (alpha * kSupportFactor * kMaxRadialGain >= 0.25)
    throw ConfigError(
        "shrink factor too aggressive for a well-behaved deformation");
  if (body_shrink_mm < 0)
    throw ConfigError("body shrink must be non-negative");
  double band_slope = body_shrink_mm * 1.875 /
                      (body_semiaxes_mm.minCoeff() * kBodyBandRho);
  if (band_slope >= 0.9)
    throw ConfigError(
        "body shrink too aggressive for a well-behaved deformation");
  if (noise_sigma_image < 0) throw ConfigError("noise sigma must be >= 0");
  if (dose_peak < 0) throw ConfigError("dose peak must be >= 0");
}

namespace {

struct Placement {
  Vec3 gtvp_mm;
  Vec3 gtvn_mm;
};

// Draws tumor centers until both spheres sit inside the body and the grid
// margin and do not touch each other.
Placement place_tumors(const PhantomSpec& spec, const Vec3& body_center_mm) {
  Rng rng(Rng::derive(spec.seed, 4));
  const Vec3& ax = spec.body_semiaxes_mm;
  auto fits = [&](const Vec3& c, double r) {
    Vec3 rel = c - body_center_mm;
    double plane = 1.0 - (rel[0] / ax[0]) * (rel[0] / ax[0]) -
                   (rel[1] / ax[1]) * (rel[1] / ax[1]);
    if (plane <= 0) return false;
    double z_room = ax[2] * std::sqrt(plane);
    if (std::abs(rel[2]) + r > z_room - 1.0) return false;
    for (int a = 0; a < 3; ++a) {
      double n = a == 0 ? spec.shape.x : a == 1 ? spec.shape.y : spec.shape.z;
      double vox = c[a] / spec.spacing_mm[a];
      double r_vox = r / spec.spacing_mm[a];
      if (vox - r_vox < 2.0 || vox + r_vox > n - 3.0) return false;
    }
    return true;
  };
  for (int attempt = 0; attempt < 64; ++attempt) {
    Placement p;
    p.gtvp_mm = body_center_mm + Vec3(-7 + rng.uniform(-6, 6),
                                      -4 + rng.uniform(-6, 6),
                                      rng.uniform(-1, 1));
    p.gtvn_mm = body_center_mm + Vec3(9 + rng.uniform(-6, 6),
                                      6 + rng.uniform(-6, 6),
                                      rng.uniform(-1, 1));
    if (!fits(p.gtvp_mm, spec.gtvp_radius_mm)) continue;
    if (!fits(p.gtvn_mm, spec.gtvn_radius_mm)) continue;
    if ((p.gtvp_mm - p.gtvn_mm).norm() <
        spec.gtvp_radius_mm + spec.gtvn_radius_mm + 2.0)
      continue;
    return p;
  }
  throw ConfigError("structures out of bounds for the requested geometry");
}

}  // namespace

CaseBundle generate_case(const PhantomSpec& spec) {
  spec.validate();
  Grid3 g = spec.shape;
  const Vec3& sp = spec.spacing_mm;
  Vec3 extent_mm(g.x * sp[0], g.y * sp[1], g.z * sp[2]);
  Vec3 body_c(0.5 * (g.x - 1) * sp[0], 0.5 * (g.y - 1) * sp[1],
              0.5 * (g.z - 1) * sp[2]);
  const Vec3& ax = spec.body_semiaxes_mm;
  Placement tumors = place_tumors(spec, body_c);

  Rng tex_rng(Rng::derive(spec.seed, 1));
  auto texture = draw_cosines(tex_rng, 6, 3, 0.012, 0.03, extent_mm);
  Rng corr_rng(Rng::derive(spec.seed, 2));
  auto correlated = draw_cosines(corr_rng, 6, 5, 0.0,
                                 spec.noise_sigma_image, extent_mm);
  Rng bias_rng(Rng::derive(spec.seed, 3));
  double bias0 = bias_rng.uniform(-0.02, 0.02);
  Vec3 bias_grad(bias_rng.uniform(-0.06, 0.06), bias_rng.uniform(-0.06, 0.06),
                 bias_rng.uniform(-0.06, 0.06));
  Rng white_rng(Rng::derive(spec.seed, 5));

  CaseBundle c;
  c.case_id = spec.case_id;
  c.ct = Volume::filled(g, 0.0f, VolumeKind::Image, sp);
  c.ct.channel = "ct";
  c.dose = Volume::filled(g, 0.0f, VolumeKind::Dose, sp);
  c.dose.channel = "dose";
  c.cbct01 = Volume::filled(g, 0.0f, VolumeKind::Image, sp);
  c.cbct01.channel = "cbct01";
  c.gtvp01 = Volume::filled(g, 0.0f, VolumeKind::Mask, sp);
  c.gtvp01.channel = "gtvp01";
  c.gtvn01 = Volume::filled(g, 0.0f, VolumeKind::Mask, sp);
  c.gtvn01.channel = "gtvn01";

  double sigma_dose = 1.5 * spec.gtvp_radius_mm;
  double alpha_p = shrink_alpha(spec.shrink_factor);
  double alpha_n = shrink_alpha(spec.shrink_factor);

  Dvf dvf;
  dvf.shape = g;
  dvf.spacing_mm = sp;
  dvf.disp = Mat<float>::Zero(3, g.count());

  for (int z = 0; z < g.z; ++z)
    for (int y = 0; y < g.y; ++y)
      for (int x = 0; x < g.x; ++x) {
        std::int64_t o = g.flat(x, y, z);
        Vec3 p(x * sp[0], y * sp[1], z * sp[2]);
        Vec3 rel = p - body_c;
        double rho = std::sqrt((rel[0] / ax[0]) * (rel[0] / ax[0]) +
                               (rel[1] / ax[1]) * (rel[1] / ax[1]) +
                               (rel[2] / ax[2]) * (rel[2] / ax[2]));
        double s_body = smoothstep01((1.0 - rho) / 0.06 + 0.5);
        double tissue = 1.08 + eval_cosines(texture, p);

        Vec3 dp = p - tumors.gtvp_mm;
        Vec3 dn = p - tumors.gtvn_mm;
        double r_p = dp.norm(), r_n = dn.norm();
        double s_p = smoothstep01((spec.gtvp_radius_mm - r_p) / 2.0 + 0.5);
        double s_n = smoothstep01((spec.gtvn_radius_mm - r_n) / 2.0 + 0.5);

        double ct = -1.0 + s_body * tissue + 0.15 * s_p + 0.12 * s_n;
        c.ct.data[o] = float(std::clamp(ct, -1.0, 1.0));
        c.gtvp01.data[o] = r_p <= spec.gtvp_radius_mm ? 1.0f : 0.0f;
        c.gtvn01.data[o] = r_n <= spec.gtvn_radius_mm ? 1.0f : 0.0f;
        c.dose.data[o] =
            float(spec.dose_peak * std::exp(-0.5 * r_p * r_p /
                                            (sigma_dose * sigma_dose)));

        double noise = eval_cosines(correlated, p) +
                       white_rng.normal() * 0.5 * spec.noise_sigma_image;
        double bias =
            bias0 + bias_grad[0] * (p[0] / extent_mm[0] - 0.5) +
            bias_grad[1] * (p[1] / extent_mm[1] - 0.5) +
            bias_grad[2] * (p[2] / extent_mm[2] - 0.5);
        c.cbct01.data[o] = float(std::clamp(ct + bias + noise, -1.0, 1.0));

        // Synthetic deformation: radial pull around each tumor plus an
        // inward band at the body surface, in voxel units.
        Vec3 u_mm = Vec3::Zero();
        if (alpha_p > 0) {
          double support = kSupportFactor * spec.gtvp_radius_mm;
          if (r_p < support) u_mm += dp * (alpha_p * quintic(r_p / support));
        }
        if (alpha_n > 0) {
          double support = kSupportFactor * spec.gtvn_radius_mm;
          if (r_n < support) u_mm += dn * (alpha_n * quintic(r_n / support));
        }
        if (spec.body_shrink_mm > 0 && rho > 1e-6) {
          double w = quintic(std::abs(rho - 1.0) / kBodyBandRho);
          if (w > 0) {
            Vec3 grad(rel[0] / (ax[0] * ax[0]), rel[1] / (ax[1] * ax[1]),
                      rel[2] / (ax[2] * ax[2]));
            u_mm += grad.normalized() * (spec.body_shrink_mm * w);
          }
        }
        dvf.disp(0, o) = float(u_mm[0] / sp[0]);
        dvf.disp(1, o) = float(u_mm[1] / sp[1]);
        dvf.disp(2, o) = float(u_mm[2] / sp[2]);
      }

  // Later fraction: the baseline image pulled through the synthetic field
  // with the same interpolation the training loss uses; masks with the
  // nearest-neighbor rule inference uses.
  {
    Volume v = c.cbct01;
    v.channel = "cbct21";
    v.data = warp_trilinear_value<float>(c.cbct01.data.transpose(), dvf.disp, g)
                 .row(0)
                 .transpose();
    c.cbct21 = std::move(v);
  }
  auto warp_mask = [&](const Volume& m, const char* channel) {
    Volume out = m;
    out.channel = channel;
    out.data = warp_nearest_value<float>(m.data.transpose(), dvf.disp, g)
                   .row(0)
                   .transpose();
    return out;
  };
  c.gtvp21 = warp_mask(c.gtvp01, "gtvp21");
  c.gtvn21 = warp_mask(c.gtvn01, "gtvn21");
  c.gt_dvf = std::move(dvf);
  c.validate();
  return c;
}

namespace {

double lerp_range(const ParamRange& r, double u) {
  return r.lo + u * (r.hi - r.lo);
}

void check_range(const ParamRange& r, const char* name) {
  if (!(r.lo <= r.hi))
    throw ConfigError(std::string("invalid parameter range for ") + name);
}

}  // namespace

std::vector<PhantomSpec> corpus_specs(int n, const CorpusRanges& ranges,
                                      std::uint64_t seed) {
  if (n < 1) throw ConfigError("corpus size must be at least 1");
  check_range(ranges.gtvp_radius_mm, "gtvp_radius_mm");
  check_range(ranges.gtvn_radius_mm, "gtvn_radius_mm");
  check_range(ranges.shrink_factor, "shrink_factor");
  check_range(ranges.body_shrink_mm, "body_shrink_mm");
  std::vector<PhantomSpec> out;
  out.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(Rng::derive(seed, 1000 + std::uint64_t(i)));
    PhantomSpec spec = ranges.base;
    double u_radius = rng.uniform();
    spec.gtvp_radius_mm = lerp_range(ranges.gtvp_radius_mm, u_radius);
    spec.gtvn_radius_mm = lerp_range(ranges.gtvn_radius_mm, rng.uniform());
    // Larger baseline tumors shrink more: the volume-ratio draw is
    // anti-correlated with the radius draw (plus independent jitter).
    double t = std::clamp(1.0 - u_radius + rng.uniform(-0.15, 0.15), 0.0, 1.0);
    spec.shrink_factor = lerp_range(ranges.shrink_factor, t);
    spec.body_shrink_mm = lerp_range(ranges.body_shrink_mm, rng.uniform());
    spec.seed = Rng::derive(seed, 2000 + std::uint64_t(i));
    char buf[32];
    std::snprintf(buf, sizeof buf, "phantom%03d", i);
    spec.case_id = buf;
    spec.validate();
    out.push_back(std::move(spec));
  }
  return out;
}

std::vector<CaseBundle> generate_corpus(int n, const CorpusRanges& ranges,
                                        std::uint64_t seed) {
  std::vector<PhantomSpec> specs = corpus_specs(n, ranges, seed);
  std::vector<CaseBundle> out;
  out.reserve(specs.size());
  for (const auto& spec : specs) out.push_back(generate_case(spec));
  return out;
}

}  // namespace anapred
