#include <doctest.h>

#include "anapred/loss.hpp"
#include "anapred/metrics.hpp"

using namespace anapred;

namespace {

Volume make_mask(Grid3 g, Vec3 spacing = Vec3(2, 2, 2)) {
  Volume v = Volume::filled(g, 0.0f, VolumeKind::Mask, spacing);
  return v;
}

Volume random_mask(Grid3 g, std::uint64_t seed, double p, Vec3 spacing) {
  Volume v = make_mask(g, spacing);
  Rng rng(seed);
  for (Eigen::Index i = 0; i < v.data.size(); ++i)
    v.data[i] = rng.bernoulli(p) ? 1.0f : 0.0f;
  return v;
}

Volume random_image(Grid3 g, std::uint64_t seed) {
  Volume v = Volume::filled(g, 0.0f, VolumeKind::Image);
  Rng rng(seed);
  for (Eigen::Index i = 0; i < v.data.size(); ++i)
    v.data[i] = float(rng.uniform(-1, 1));
  return v;
}

// Independent oracle: exhaustive pairwise distances between surface sets.
double asd_bruteforce(const Volume& a, const Volume& b) {
  Grid3 g = a.shape;
  auto surface = [&](const Volume& m) {
    std::vector<std::array<int, 3>> out;
    for (int z = 0; z < g.z; ++z)
      for (int y = 0; y < g.y; ++y)
        for (int x = 0; x < g.x; ++x) {
          if (m.at(x, y, z) < 0.5f) continue;
          auto in = [&](int px, int py, int pz) {
            return px >= 0 && px < g.x && py >= 0 && py < g.y && pz >= 0 &&
                   pz < g.z && m.at(px, py, pz) >= 0.5f;
          };
          if (!in(x - 1, y, z) || !in(x + 1, y, z) || !in(x, y - 1, z) ||
              !in(x, y + 1, z) || !in(x, y, z - 1) || !in(x, y, z + 1))
            out.push_back({x, y, z});
        }
    return out;
  };
  auto sa = surface(a), sb = surface(b);
  Vec3 sp = a.spacing_mm;
  auto dist = [&](const std::array<int, 3>& p, const std::array<int, 3>& q) {
    double dx = sp[0] * (p[0] - q[0]);
    double dy = sp[1] * (p[1] - q[1]);
    double dz = sp[2] * (p[2] - q[2]);
    return std::sqrt(dx * dx + dy * dy + dz * dz);
  };
  double acc = 0;
  for (const auto& p : sa) {
    double best = 1e300;
    for (const auto& q : sb) best = std::min(best, dist(p, q));
    acc += best;
  }
  for (const auto& q : sb) {
    double best = 1e300;
    for (const auto& p : sa) best = std::min(best, dist(p, q));
    acc += best;
  }
  return acc / double(sa.size() + sb.size());
}

}  // namespace

TEST_CASE("mean squared error basics") {
  Grid3 g{5, 4, 3};
  Volume a = random_image(g, 1501);
  CHECK(mse(a, a) == 0.0);
  Volume z = Volume::filled(g, 0.0f, VolumeKind::Image);
  Volume tenth = Volume::filled(g, 0.1f, VolumeKind::Image);
  CHECK(mse(z, tenth) == doctest::Approx(0.01).epsilon(1e-9));
  Volume other = random_image(Grid3{4, 4, 3}, 1502);
  CHECK_THROWS_AS(mse(a, other), ConfigError);
}

TEST_CASE("structural similarity evaluation complements the loss") {
  Grid3 g{9, 7, 6};
  Volume a = random_image(g, 1511);
  Volume b = random_image(g, 1512);
  CHECK(ssim_eval(a, a) == doctest::Approx(1.0).epsilon(1e-9));
  Mat<double> ra(1, g.count()), rb(1, g.count());
  for (Eigen::Index i = 0; i < ra.cols(); ++i) {
    ra(0, i) = double(a.data[i]);
    rb(0, i) = double(b.data[i]);
  }
  CHECK(std::abs(ssim_eval(a, b) - (1.0 - ssim_loss_value(ra, rb, g))) <
        1e-15);
}

TEST_CASE("overlap coefficient on binary masks") {
  Grid3 g{4, 4, 2};
  Volume a = make_mask(g), b = make_mask(g), c = make_mask(g);
  for (int i = 0; i < 8; ++i) a.data[i] = 1;
  for (int i = 4; i < 12; ++i) b.data[i] = 1;
  for (int i = 20; i < 24; ++i) c.data[i] = 1;
  CHECK(dice(a, a) == 1.0);
  CHECK(dice(a, b) == 0.5);
  CHECK(dice(a, c) == 0.0);
  CHECK(dice(a, b) == dice(b, a));
  Volume empty = make_mask(g);
  CHECK(dice(empty, empty) == 1.0);
  CHECK(dice(a, empty) == 0.0);
}

TEST_CASE("surface distance on hand cases") {
  Grid3 g{8, 5, 5};
  Volume a = make_mask(g), b = make_mask(g);
  a.at(1, 2, 2) = 1;
  b.at(4, 2, 2) = 1;  // 3 voxels apart along x at 2 mm spacing
  CHECK(asd_mm(a, b) == doctest::Approx(6.0).epsilon(1e-12));
  CHECK(asd_mm(a, a) == 0.0);
  CHECK(asd_mm(a, b) == asd_mm(b, a));
  Volume empty = make_mask(g);
  CHECK_THROWS_AS(asd_mm(a, empty), NumericError);
  CHECK_THROWS_AS(asd_mm(empty, b), NumericError);
}

TEST_CASE("surface distance matches the exhaustive oracle") {
  Rng shapes(1601);
  int done = 0;
  for (int t = 0; done < 40; ++t) {
    Grid3 g{int(shapes.uniform_int(2, 12)), int(shapes.uniform_int(2, 12)),
            int(shapes.uniform_int(2, 12))};
    Vec3 sp(shapes.uniform(0.5, 3.0), shapes.uniform(0.5, 3.0),
            shapes.uniform(0.5, 3.0));
    Volume a = random_mask(g, 1700 + std::uint64_t(t), 0.25, sp);
    Volume b = random_mask(g, 1800 + std::uint64_t(t), 0.25, sp);
    bool a_any = a.data.maxCoeff() > 0, b_any = b.data.maxCoeff() > 0;
    if (!a_any || !b_any) continue;
    CHECK(std::abs(asd_mm(a, b) - asd_bruteforce(a, b)) < 1e-6);
    ++done;
  }
  CHECK(done == 40);
}

TEST_CASE("body extraction finds the dominant component and fills holes") {
  Grid3 g{16, 16, 6};
  Volume img = Volume::filled(g, -1.0f, VolumeKind::Image);
  // Dominant blob: a 10x10 square per slice with an interior air pocket.
  for (int z = 1; z < 5; ++z)
    for (int y = 3; y < 13; ++y)
      for (int x = 3; x < 13; ++x) img.at(x, y, z) = 0.2f;
  for (int z = 2; z < 4; ++z) img.at(8, 8, z) = -1.0f;  // hole to fill
  // Small distractor blob, disconnected.
  img.at(0, 0, 0) = 0.5f;
  Volume body = body_mask(img);
  CHECK(body.at(8, 8, 2) == 1.0f);   // hole filled
  CHECK(body.at(0, 0, 0) == 0.0f);   // distractor dropped
  CHECK(body.at(5, 5, 2) == 1.0f);   // interior kept
  CHECK(body.at(1, 1, 1) == 0.0f);   // outside stays outside
  double count = body.data.sum();
  CHECK(count >= 10 * 10 * 4 - 40);  // closing may shave corners, not more
  CHECK(count <= 10 * 10 * 4 + 40);

  Volume air = Volume::filled(g, -1.0f, VolumeKind::Image);
  CHECK_THROWS_AS(body_mask(air), NumericError);
}

TEST_CASE("lowering the threshold never shrinks the thresholded set") {
  Grid3 g{7, 6, 5};
  Volume img = random_image(g, 1901);
  Volume hi = threshold_mask(img, 0.1f);
  Volume lo = threshold_mask(img, -0.3f);
  for (Eigen::Index i = 0; i < img.data.size(); ++i)
    CHECK(lo.data[i] >= hi.data[i]);
}

TEST_CASE("case evaluation yields one complete row per candidate") {
  Grid3 g{14, 12, 8};
  // Target: a filled box body with a small bright tumor pair.
  Volume tgt = Volume::filled(g, -1.0f, VolumeKind::Image);
  for (int z = 1; z < 7; ++z)
    for (int y = 2; y < 10; ++y)
      for (int x = 2; x < 12; ++x) tgt.at(x, y, z) = 0.1f;
  Volume gp = make_mask(g), gn = make_mask(g);
  for (int z = 2; z < 4; ++z)
    for (int y = 3; y < 5; ++y)
      for (int x = 3; x < 6; ++x) gp.at(x, y, z) = 1;
  for (int z = 3; z < 5; ++z)
    for (int y = 6; y < 8; ++y)
      for (int x = 8; x < 10; ++x) gn.at(x, y, z) = 1;

  // Candidate 1: exact copy. Candidate 2: shifted body and masks.
  Volume shifted = Volume::filled(g, -1.0f, VolumeKind::Image);
  for (int z = 1; z < 7; ++z)
    for (int y = 2; y < 10; ++y)
      for (int x = 3; x < 13; ++x) shifted.at(x, y, z) = 0.1f;
  Volume gp2 = make_mask(g), gn2 = make_mask(g);
  for (int z = 2; z < 4; ++z)
    for (int y = 3; y < 5; ++y)
      for (int x = 4; x < 7; ++x) gp2.at(x, y, z) = 1;
  for (int z = 3; z < 5; ++z)
    for (int y = 6; y < 8; ++y)
      for (int x = 9; x < 11; ++x) gn2.at(x, y, z) = 1;

  auto rows = evaluate_case({{"Copy", tgt, gp, gn}, {"Shifted", shifted, gp2, gn2}},
                            tgt, gp, gn);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].subject == "Copy");
  CHECK(rows[0].mse == 0.0);
  CHECK(rows[0].ssim == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(rows[0].dice_body == 1.0);
  CHECK(rows[0].dice_gtvp == 1.0);
  CHECK(rows[0].dice_gtvn == 1.0);
  CHECK(rows[0].asd_body_mm == 0.0);
  CHECK(rows[0].asd_gtvp_mm == 0.0);
  CHECK(rows[0].asd_gtvn_mm == 0.0);
  CHECK(rows[1].mse > 0.0);
  CHECK(rows[1].ssim < 1.0);
  CHECK(rows[1].dice_gtvp < 1.0);
  CHECK(rows[1].asd_gtvp_mm > 0.0);
}

TEST_CASE("aggregation takes lower-middle medians and population deviations") {
  auto row = [](double v) {
    MetricsRow r;
    r.subject = "S";
    r.mse = v;
    r.ssim = v;
    r.dice_body = r.dice_gtvp = r.dice_gtvn = v;
    r.asd_body_mm = r.asd_gtvp_mm = r.asd_gtvn_mm = v;
    return r;
  };
  MetricsReport rep =
      aggregate({{row(1)}, {row(2)}, {row(3)}});
  CHECK(rep.median.size() == 1);
  CHECK(rep.median[0].mse == 2.0);
  CHECK(rep.stddev[0].mse == doctest::Approx(std::sqrt(2.0 / 3)).epsilon(1e-12));

  MetricsReport even = aggregate({{row(4)}, {row(1)}, {row(3)}, {row(2)}});
  CHECK(even.median[0].ssim == 2.0);  // lower middle of {1,2,3,4}

  MetricsReport single = aggregate({{row(7)}});
  CHECK(single.median[0].mse == 7.0);
  CHECK(single.stddev[0].mse == 0.0);

  CHECK_THROWS_AS(aggregate({}), ConfigError);
  MetricsRow other = row(1);
  other.subject = "T";
  CHECK_THROWS_AS(aggregate({{row(1)}, {other}}), ConfigError);
}

TEST_CASE("reports round-trip through their serialized form") {
  auto row = [](const char* s, double v) {
    MetricsRow r;
    r.subject = s;
    r.mse = v * 0.001;
    r.ssim = 1 - v * 0.01;
    r.dice_body = 0.9 + v * 0.001;
    r.dice_gtvp = 0.7;
    r.dice_gtvn = 0.8;
    r.asd_body_mm = v;
    r.asd_gtvp_mm = 2 * v;
    r.asd_gtvn_mm = 3 * v;
    return r;
  };
  MetricsReport rep = aggregate({{row("PlanningCT", 1), row("CBCT01", 2)},
                                 {row("PlanningCT", 3), row("CBCT01", 4)}});
  MetricsReport back = report_from_json(report_to_json(rep));
  CHECK(back == rep);

  std::string table = report_table(rep);
  CHECK(table.find("PlanningCT") != std::string::npos);
  CHECK(table.find("dice_gtvp") != std::string::npos);
  std::string csv = report_csv(rep);
  CHECK(csv.find("case,subject,mse,") == 0);
  CHECK(csv.find("median,PlanningCT") != std::string::npos);
}
