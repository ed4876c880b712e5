#include "anapred/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "anapred/loss.hpp"

namespace anapred {

namespace {

void require_same_shape(const Volume& a, const Volume& b, const char* op) {
  if (!(a.shape == b.shape))
    throw ConfigError(std::string(op) + " operands have different shapes: " +
                      a.shape.str() + " vs " + b.shape.str());
}

bool mask_at(const Volume& m, std::int64_t i) { return m.data[i] >= 0.5f; }

// Flat indices of mask voxels with at least one six-neighbor outside the
// mask; the volume border counts as outside.
std::vector<std::int64_t> surface_voxels(const Volume& m) {
  std::vector<std::int64_t> out;
  Grid3 g = m.shape;
  for (int z = 0; z < g.z; ++z)
    for (int y = 0; y < g.y; ++y)
      for (int x = 0; x < g.x; ++x) {
        std::int64_t o = g.flat(x, y, z);
        if (!mask_at(m, o)) continue;
        bool exposed =
            x == 0 || !mask_at(m, g.flat(x - 1, y, z)) || x == g.x - 1 ||
            !mask_at(m, g.flat(x + 1, y, z)) || y == 0 ||
            !mask_at(m, g.flat(x, y - 1, z)) || y == g.y - 1 ||
            !mask_at(m, g.flat(x, y + 1, z)) || z == 0 ||
            !mask_at(m, g.flat(x, y, z - 1)) || z == g.z - 1 ||
            !mask_at(m, g.flat(x, y, z + 1));
        if (exposed) out.push_back(o);
      }
  return out;
}

constexpr double kFar = 1e20;

// 1D lower-envelope squared-distance transform with sample spacing s:
// out[q] = min_j (f[j] + (s*(q-j))^2).
void edt_1d(const std::vector<double>& f, std::vector<double>& out, int n,
            double s, std::vector<int>& v, std::vector<double>& z) {
  double s2 = s * s;
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double fq = f[std::size_t(q)] + s2 * q * q;
    while (true) {
      int p = v[std::size_t(k)];
      double x = (fq - (f[std::size_t(p)] + s2 * p * p)) / (2 * s2 * (q - p));
      if (x <= z[std::size_t(k)]) {
        --k;
        continue;
      }
      ++k;
      v[std::size_t(k)] = q;
      z[std::size_t(k)] = x;
      z[std::size_t(k) + 1] = std::numeric_limits<double>::infinity();
      break;
    }
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[std::size_t(k) + 1] < q) ++k;
    int p = v[std::size_t(k)];
    double d = s * (q - p);
    out[std::size_t(q)] = d * d + f[std::size_t(p)];
  }
}

// Exact squared Euclidean distance (mm^2) from every voxel center to the
// nearest site, on an anisotropic grid.
std::vector<double> edt_sq_mm(Grid3 g, const Vec3& spacing,
                              const std::vector<std::int64_t>& sites) {
  std::vector<double> d(std::size_t(g.count()), kFar);
  for (auto s : sites) d[std::size_t(s)] = 0.0;

  auto nmax = std::size_t(std::max({g.x, g.y, g.z}));
  std::vector<double> line(nmax), out(nmax);
  std::vector<int> v(nmax);
  std::vector<double> zb(nmax + 1);

  const int n[3] = {g.x, g.y, g.z};
  const std::int64_t stride[3] = {1, g.x, std::int64_t(g.x) * g.y};
  for (int axis = 0; axis < 3; ++axis) {
    int len = n[axis];
    if (len == 1) continue;
    int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    for (int j = 0; j < n[a2]; ++j)
      for (int i = 0; i < n[a1]; ++i) {
        std::int64_t base = i * stride[a1] + j * stride[a2];
        for (int q = 0; q < len; ++q)
          line[std::size_t(q)] = d[std::size_t(base + q * stride[axis])];
        edt_1d(line, out, len, spacing[axis], v, zb);
        for (int q = 0; q < len; ++q)
          d[std::size_t(base + q * stride[axis])] = out[std::size_t(q)];
      }
  }
  return d;
}

// Largest six-connected component of a binary array (ties broken by the
// lowest-index seed, scan order).
void keep_largest_component(std::vector<std::uint8_t>& m, Grid3 g) {
  std::vector<std::int32_t> label(m.size(), -1);
  std::vector<std::int64_t> stack;
  std::int32_t next = 0;
  std::int64_t best_size = 0;
  std::int32_t best_label = -1;
  for (std::int64_t seed = 0; seed < std::int64_t(m.size()); ++seed) {
    if (!m[std::size_t(seed)] || label[std::size_t(seed)] >= 0) continue;
    std::int64_t size = 0;
    stack.push_back(seed);
    label[std::size_t(seed)] = next;
    while (!stack.empty()) {
      std::int64_t o = stack.back();
      stack.pop_back();
      ++size;
      int x = int(o % g.x), y = int((o / g.x) % g.y), z = int(o / (std::int64_t(g.x) * g.y));
      auto visit = [&](int nx, int ny, int nz) {
        std::int64_t p = g.flat(nx, ny, nz);
        if (m[std::size_t(p)] && label[std::size_t(p)] < 0) {
          label[std::size_t(p)] = next;
          stack.push_back(p);
        }
      };
      if (x > 0) visit(x - 1, y, z);
      if (x < g.x - 1) visit(x + 1, y, z);
      if (y > 0) visit(x, y - 1, z);
      if (y < g.y - 1) visit(x, y + 1, z);
      if (z > 0) visit(x, y, z - 1);
      if (z < g.z - 1) visit(x, y, z + 1);
    }
    if (size > best_size) {
      best_size = size;
      best_label = next;
    }
    ++next;
  }
  for (std::size_t i = 0; i < m.size(); ++i)
    m[i] = (m[i] && label[i] == best_label) ? 1 : 0;
}

// Dilation/erosion with the six-neighbor cross; outside the volume counts as
// background.
void dilate6(std::vector<std::uint8_t>& m, Grid3 g) {
  std::vector<std::uint8_t> src = m;
  auto at = [&](int x, int y, int z) -> std::uint8_t {
    if (x < 0 || x >= g.x || y < 0 || y >= g.y || z < 0 || z >= g.z) return 0;
    return src[std::size_t(g.flat(x, y, z))];
  };
  for (int z = 0; z < g.z; ++z)
    for (int y = 0; y < g.y; ++y)
      for (int x = 0; x < g.x; ++x)
        m[std::size_t(g.flat(x, y, z))] =
            at(x, y, z) || at(x - 1, y, z) || at(x + 1, y, z) ||
            at(x, y - 1, z) || at(x, y + 1, z) || at(x, y, z - 1) ||
            at(x, y, z + 1);
}

void erode6(std::vector<std::uint8_t>& m, Grid3 g) {
  std::vector<std::uint8_t> src = m;
  auto at = [&](int x, int y, int z) -> std::uint8_t {
    if (x < 0 || x >= g.x || y < 0 || y >= g.y || z < 0 || z >= g.z) return 0;
    return src[std::size_t(g.flat(x, y, z))];
  };
  for (int z = 0; z < g.z; ++z)
    for (int y = 0; y < g.y; ++y)
      for (int x = 0; x < g.x; ++x)
        m[std::size_t(g.flat(x, y, z))] =
            at(x, y, z) && at(x - 1, y, z) && at(x + 1, y, z) &&
            at(x, y - 1, z) && at(x, y + 1, z) && at(x, y, z - 1) &&
            at(x, y, z + 1);
}

// Fill background regions not reachable from the slice border (4-connected
// flood per z-slice).
void fill_holes_per_slice(std::vector<std::uint8_t>& m, Grid3 g) {
  std::vector<std::uint8_t> outside(std::size_t(g.x) * g.y);
  std::vector<std::int64_t> stack;
  for (int z = 0; z < g.z; ++z) {
    std::fill(outside.begin(), outside.end(), 0);
    auto slice_at = [&](int x, int y) {
      return m[std::size_t(g.flat(x, y, z))];
    };
    auto push = [&](int x, int y) {
      std::int64_t s = x + std::int64_t(g.x) * y;
      if (!outside[std::size_t(s)] && !slice_at(x, y)) {
        outside[std::size_t(s)] = 1;
        stack.push_back(s);
      }
    };
    for (int x = 0; x < g.x; ++x) {
      push(x, 0);
      push(x, g.y - 1);
    }
    for (int y = 0; y < g.y; ++y) {
      push(0, y);
      push(g.x - 1, y);
    }
    while (!stack.empty()) {
      std::int64_t s = stack.back();
      stack.pop_back();
      int x = int(s % g.x), y = int(s / g.x);
      if (x > 0) push(x - 1, y);
      if (x < g.x - 1) push(x + 1, y);
      if (y > 0) push(x, y - 1);
      if (y < g.y - 1) push(x, y + 1);
    }
    for (int y = 0; y < g.y; ++y)
      for (int x = 0; x < g.x; ++x)
        if (!outside[std::size_t(x + std::int64_t(g.x) * y)])
          m[std::size_t(g.flat(x, y, z))] = 1;
  }
}

Mat<double> as_row(const Volume& v) {
  Mat<double> out(1, v.data.size());
  for (Eigen::Index i = 0; i < v.data.size(); ++i)
    out(0, i) = double(v.data[i]);
  return out;
}

}  // namespace

double mse(const Volume& a, const Volume& b) {
  require_same_shape(a, b, "mse");
  double acc = 0;
  for (Eigen::Index i = 0; i < a.data.size(); ++i) {
    double d = double(a.data[i]) - double(b.data[i]);
    acc += d * d;
  }
  return acc / double(a.data.size());
}

double ssim_eval(const Volume& a, const Volume& b) {
  require_same_shape(a, b, "ssim");
  return ssim_mean_value(as_row(a), as_row(b), a.shape);
}

double dice(const Volume& a, const Volume& b) {
  require_same_shape(a, b, "dice");
  std::int64_t na = 0, nb = 0, inter = 0;
  for (Eigen::Index i = 0; i < a.data.size(); ++i) {
    bool va = a.data[i] >= 0.5f, vb = b.data[i] >= 0.5f;
    na += va;
    nb += vb;
    inter += va && vb;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * double(inter) / double(na + nb);
}

double asd_mm(const Volume& a, const Volume& b) {
  require_same_shape(a, b, "asd");
  if (!a.spacing_mm.isApprox(b.spacing_mm))
    throw ConfigError("asd operands have different spacing");
  auto sa = surface_voxels(a);
  auto sb = surface_voxels(b);
  if (sa.empty() || sb.empty())
    throw NumericError("undefined ASD: empty mask");
  auto da = edt_sq_mm(a.shape, a.spacing_mm, sa);
  auto db = edt_sq_mm(b.shape, b.spacing_mm, sb);
  double acc = 0;
  for (auto s : sa) acc += std::sqrt(db[std::size_t(s)]);
  for (auto s : sb) acc += std::sqrt(da[std::size_t(s)]);
  return acc / double(sa.size() + sb.size());
}

Volume threshold_mask(const Volume& img, float threshold) {
  Volume out = img;
  out.kind = VolumeKind::Mask;
  for (Eigen::Index i = 0; i < out.data.size(); ++i)
    out.data[i] = img.data[i] >= threshold ? 1.0f : 0.0f;
  return out;
}

Volume body_mask(const Volume& img) {
  Volume thr = threshold_mask(img, -0.5f);
  Grid3 g = img.shape;
  std::vector<std::uint8_t> m(std::size_t(g.count()));
  bool any = false;
  for (Eigen::Index i = 0; i < thr.data.size(); ++i) {
    m[std::size_t(i)] = thr.data[i] >= 0.5f;
    any = any || m[std::size_t(i)];
  }
  if (!any) throw NumericError("empty body mask");
  keep_largest_component(m, g);
  dilate6(m, g);
  erode6(m, g);
  fill_holes_per_slice(m, g);
  Volume out = thr;
  out.channel = "body";
  for (Eigen::Index i = 0; i < out.data.size(); ++i)
    out.data[i] = m[std::size_t(i)] ? 1.0f : 0.0f;
  return out;
}

std::vector<MetricsRow> evaluate_case(const std::vector<SubjectVolumes>& candidates,
                                      const Volume& target_image,
                                      const Volume& target_gtvp,
                                      const Volume& target_gtvn) {
  Volume target_body = body_mask(target_image);
  std::vector<MetricsRow> rows;
  rows.reserve(candidates.size());
  for (const auto& c : candidates) {
    MetricsRow r;
    r.subject = c.label;
    r.mse = mse(c.image, target_image);
    r.ssim = ssim_eval(c.image, target_image);
    Volume cand_body = body_mask(c.image);
    r.dice_body = dice(cand_body, target_body);
    r.dice_gtvp = dice(c.gtvp, target_gtvp);
    r.dice_gtvn = dice(c.gtvn, target_gtvn);
    r.asd_body_mm = asd_mm(cand_body, target_body);
    r.asd_gtvp_mm = asd_mm(c.gtvp, target_gtvp);
    r.asd_gtvn_mm = asd_mm(c.gtvn, target_gtvn);
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace {

double lower_median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[(v.size() - 1) / 2];
}

double population_std(const std::vector<double>& v) {
  double mean = 0;
  for (double x : v) mean += x;
  mean /= double(v.size());
  double acc = 0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return std::sqrt(acc / double(v.size()));
}

template <typename F>
MetricsRow reduce_rows(const std::vector<std::vector<MetricsRow>>& per_case,
                       std::size_t subject, F reducer) {
  auto field = [&](double MetricsRow::* f) {
    std::vector<double> v;
    v.reserve(per_case.size());
    for (const auto& rows : per_case) v.push_back(rows[subject].*f);
    return reducer(v);
  };
  MetricsRow out;
  out.subject = per_case.front()[subject].subject;
  out.mse = field(&MetricsRow::mse);
  out.ssim = field(&MetricsRow::ssim);
  out.dice_body = field(&MetricsRow::dice_body);
  out.dice_gtvp = field(&MetricsRow::dice_gtvp);
  out.dice_gtvn = field(&MetricsRow::dice_gtvn);
  out.asd_body_mm = field(&MetricsRow::asd_body_mm);
  out.asd_gtvp_mm = field(&MetricsRow::asd_gtvp_mm);
  out.asd_gtvn_mm = field(&MetricsRow::asd_gtvn_mm);
  return out;
}

using ordered_json = nlohmann::ordered_json;

ordered_json row_to_json(const MetricsRow& r) {
  return ordered_json{{"subject", r.subject},
                      {"mse", r.mse},
                      {"ssim", r.ssim},
                      {"dice_body", r.dice_body},
                      {"dice_gtvp", r.dice_gtvp},
                      {"dice_gtvn", r.dice_gtvn},
                      {"asd_body_mm", r.asd_body_mm},
                      {"asd_gtvp_mm", r.asd_gtvp_mm},
                      {"asd_gtvn_mm", r.asd_gtvn_mm}};
}

MetricsRow row_from_json(const ordered_json& j) {
  MetricsRow r;
  r.subject = j.at("subject").get<std::string>();
  r.mse = j.at("mse").get<double>();
  r.ssim = j.at("ssim").get<double>();
  r.dice_body = j.at("dice_body").get<double>();
  r.dice_gtvp = j.at("dice_gtvp").get<double>();
  r.dice_gtvn = j.at("dice_gtvn").get<double>();
  r.asd_body_mm = j.at("asd_body_mm").get<double>();
  r.asd_gtvp_mm = j.at("asd_gtvp_mm").get<double>();
  r.asd_gtvn_mm = j.at("asd_gtvn_mm").get<double>();
  return r;
}

const char* const kMetricNames[] = {"mse",         "ssim",        "dice_body",
                                    "dice_gtvp",   "dice_gtvn",   "asd_body_mm",
                                    "asd_gtvp_mm", "asd_gtvn_mm"};

double metric_by_index(const MetricsRow& r, int i) {
  switch (i) {
    case 0: return r.mse;
    case 1: return r.ssim;
    case 2: return r.dice_body;
    case 3: return r.dice_gtvp;
    case 4: return r.dice_gtvn;
    case 5: return r.asd_body_mm;
    case 6: return r.asd_gtvp_mm;
    default: return r.asd_gtvn_mm;
  }
}

}  // namespace

MetricsReport aggregate(const std::vector<std::vector<MetricsRow>>& per_case) {
  if (per_case.empty()) throw ConfigError("aggregate needs at least one case");
  std::size_t subjects = per_case.front().size();
  for (const auto& rows : per_case) {
    if (rows.size() != subjects)
      throw ConfigError("aggregate: inconsistent subject counts across cases");
    for (std::size_t s = 0; s < subjects; ++s)
      if (rows[s].subject != per_case.front()[s].subject)
        throw ConfigError("aggregate: inconsistent subject order across cases");
  }
  MetricsReport rep;
  rep.cases = per_case;
  for (std::size_t s = 0; s < subjects; ++s) {
    rep.median.push_back(reduce_rows(per_case, s, lower_median));
    rep.stddev.push_back(reduce_rows(per_case, s, population_std));
  }
  return rep;
}

std::string report_to_json(const MetricsReport& r) {
  ordered_json j;
  j["cases"] = ordered_json::array();
  for (const auto& rows : r.cases) {
    ordered_json c = ordered_json::array();
    for (const auto& row : rows) c.push_back(row_to_json(row));
    j["cases"].push_back(std::move(c));
  }
  j["median"] = ordered_json::array();
  for (const auto& row : r.median) j["median"].push_back(row_to_json(row));
  j["stddev"] = ordered_json::array();
  for (const auto& row : r.stddev) j["stddev"].push_back(row_to_json(row));
  return j.dump(2) + "\n";
}

MetricsReport report_from_json(const std::string& text) {
  ordered_json j = ordered_json::parse(text, nullptr, true);
  MetricsReport r;
  for (const auto& c : j.at("cases")) {
    std::vector<MetricsRow> rows;
    for (const auto& row : c) rows.push_back(row_from_json(row));
    r.cases.push_back(std::move(rows));
  }
  for (const auto& row : j.at("median")) r.median.push_back(row_from_json(row));
  for (const auto& row : j.at("stddev")) r.stddev.push_back(row_from_json(row));
  return r;
}

std::string report_table(const MetricsReport& r) {
  std::ostringstream os;
  char buf[64];
  os << "subject            ";
  for (const char* m : kMetricNames) {
    std::snprintf(buf, sizeof buf, " %13s", m);
    os << buf;
  }
  os << '\n';
  for (std::size_t s = 0; s < r.median.size(); ++s) {
    std::snprintf(buf, sizeof buf, "%-19s", r.median[s].subject.c_str());
    os << buf;
    for (int m = 0; m < 8; ++m) {
      std::snprintf(buf, sizeof buf, " %6.3f+-%.3f",
                    metric_by_index(r.median[s], m),
                    metric_by_index(r.stddev[s], m));
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

std::string report_csv(const MetricsReport& r) {
  std::ostringstream os;
  os << "case,subject";
  for (const char* m : kMetricNames) os << ',' << m;
  os << '\n';
  char buf[64];
  for (std::size_t c = 0; c < r.cases.size(); ++c)
    for (const auto& row : r.cases[c]) {
      os << c << ',' << row.subject;
      for (int m = 0; m < 8; ++m) {
        std::snprintf(buf, sizeof buf, ",%.9g", metric_by_index(row, m));
        os << buf;
      }
      os << '\n';
    }
  auto emit_aggregate = [&](const char* label,
                            const std::vector<MetricsRow>& rows) {
    for (const auto& row : rows) {
      os << label << ',' << row.subject;
      for (int m = 0; m < 8; ++m) {
        std::snprintf(buf, sizeof buf, ",%.9g", metric_by_index(row, m));
        os << buf;
      }
      os << '\n';
    }
  };
  emit_aggregate("median", r.median);
  emit_aggregate("stddev", r.stddev);
  return os.str();
}

}  // namespace anapred
