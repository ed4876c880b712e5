#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>

#include "anapred/dataset.hpp"
#include "bundle_compare.hpp"

using namespace anapred;
namespace fs = std::filesystem;

namespace {

Volume smooth_image(Grid3 g, std::uint64_t seed) {
  Volume v = Volume::filled(g, 0.0f, VolumeKind::Image);
  Rng rng(seed);
  double a = rng.uniform(0.05, 0.2), b = rng.uniform(1.0, 2.0);
  for (int z = 0; z < g.z; ++z)
    for (int y = 0; y < g.y; ++y)
      for (int x = 0; x < g.x; ++x)
        v.at(x, y, z) = float(a * std::sin(b * x * 0.3) * std::cos(y * 0.4) +
                              0.05 * z - 0.3);
  return v;
}

Volume blob_mask(Grid3 g, int cx, int cy, int cz, int r) {
  Volume v = Volume::filled(g, 0.0f, VolumeKind::Mask);
  for (int z = 0; z < g.z; ++z)
    for (int y = 0; y < g.y; ++y)
      for (int x = 0; x < g.x; ++x)
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) + (z - cz) * (z - cz) <=
            r * r)
          v.at(x, y, z) = 1.0f;
  return v;
}

CaseBundle make_bundle(bool with_targets = true) {
  Grid3 g{16, 14, 8};
  CaseBundle c;
  c.case_id = "case000";
  c.ct = smooth_image(g, 11);
  c.dose = smooth_image(g, 12);
  c.dose.kind = VolumeKind::Dose;
  c.cbct01 = smooth_image(g, 13);
  c.gtvp01 = blob_mask(g, 8, 7, 4, 3);
  c.gtvn01 = blob_mask(g, 5, 9, 4, 2);
  if (with_targets) {
    c.cbct21 = smooth_image(g, 14);
    c.gtvp21 = blob_mask(g, 8, 7, 4, 2);
    c.gtvn21 = blob_mask(g, 5, 9, 4, 2);
    Dvf f;
    f.shape = g;
    f.spacing_mm = c.ct.spacing_mm;
    f.disp = Mat<float>::Zero(3, g.count());
    Rng rng(15);
    for (Eigen::Index i = 0; i < f.disp.size(); ++i)
      f.disp.data()[i] = float(rng.uniform(-0.5, 0.5));
    c.gt_dvf = std::move(f);
  }
  return c;
}

using testutil::bundles_equal;
using testutil::volumes_equal;

Eigen::Vector3d mask_centroid(const Volume& m) {
  Eigen::Vector3d acc(0, 0, 0);
  double n = 0;
  Grid3 g = m.shape;
  for (int z = 0; z < g.z; ++z)
    for (int y = 0; y < g.y; ++y)
      for (int x = 0; x < g.x; ++x)
        if (m.at(x, y, z) >= 0.5f) {
          acc += Eigen::Vector3d(x, y, z);
          n += 1;
        }
  return acc / n;
}

bool mask_binary(const Volume& m) {
  for (Eigen::Index i = 0; i < m.data.size(); ++i)
    if (m.data[i] != 0.0f && m.data[i] != 1.0f) return false;
  return true;
}

}  // namespace

TEST_CASE("input stacking follows the fixed channel order") {
  CaseBundle c = make_bundle();
  InputSelection sel;
  Mat<float> x = stack_input(c, sel);
  REQUIRE(x.rows() == 7);
  REQUIRE(x.cols() == c.ct.shape.count());
  CHECK(x.row(0).transpose() == c.ct.data);
  CHECK(x.row(1).transpose() == c.gtvp01.data);
  CHECK(x.row(2).transpose() == c.gtvn01.data);
  CHECK(x.row(3).transpose() == c.dose.data);
  CHECK(x.row(4).transpose() == c.cbct01.data);
  CHECK(x.row(5).transpose() == c.gtvp01.data);
  CHECK(x.row(6).transpose() == c.gtvn01.data);

  SUBCASE("disabled dose zeroes only its channel") {
    sel.use_dose = false;
    Mat<float> y = stack_input(c, sel);
    CHECK(y.row(3).cwiseAbs().sum() == 0.0f);
    CHECK(y.row(0) == x.row(0));
    CHECK(y.row(4) == x.row(4));
  }
  SUBCASE("disabled masks zero all four mask channels") {
    sel.use_gtv_masks = false;
    Mat<float> y = stack_input(c, sel);
    for (int r : {1, 2, 5, 6}) CHECK(y.row(r).cwiseAbs().sum() == 0.0f);
    CHECK(y.row(0) == x.row(0));
  }
  SUBCASE("planning image as baseline swaps the two image slots") {
    sel.baseline = BaselineKind::CT;
    Mat<float> y = stack_input(c, sel);
    CHECK(y.row(4).transpose() == c.ct.data);
    CHECK(y.row(0).transpose() == c.cbct01.data);
    CHECK(&baseline_image(c, sel) == &c.ct);
  }
  SUBCASE("disabled secondary image zeroes the first slot") {
    sel.use_ct = false;
    Mat<float> y = stack_input(c, sel);
    CHECK(y.row(0).cwiseAbs().sum() == 0.0f);
    CHECK(y.row(4).transpose() == c.cbct01.data);
  }
}

TEST_CASE("bundle validation rejects misaligned or partial bundles") {
  CaseBundle c = make_bundle();
  c.validate();

  CaseBundle bad = make_bundle();
  bad.dose = smooth_image(Grid3{8, 14, 8}, 12);
  bad.dose.kind = VolumeKind::Dose;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  CaseBundle partial = make_bundle();
  partial.gtvn21.reset();
  CHECK_THROWS_AS(partial.validate(), ConfigError);

  CaseBundle orphan_dvf = make_bundle();
  orphan_dvf.cbct21.reset();
  orphan_dvf.gtvp21.reset();
  orphan_dvf.gtvn21.reset();
  CHECK_THROWS_AS(orphan_dvf.validate(), ConfigError);

  CaseBundle wrong_kind = make_bundle();
  wrong_kind.gtvp01.kind = VolumeKind::Image;
  CHECK_THROWS_AS(wrong_kind.validate(), ConfigError);
}

TEST_CASE("augmentation with zero probability is the identity") {
  CaseBundle c = make_bundle();
  AugmentSpec spec;
  spec.probability = 0.0;
  spec.seed = 77;
  CHECK(bundles_equal(augment(c, spec), c));
}

TEST_CASE("flip applied twice restores the original bundle") {
  CaseBundle c = make_bundle();
  AugmentSpec spec;
  spec.probability = 1.0;
  spec.max_shift_voxels = 0;
  spec.max_rotation_deg = 0.0;
  spec.noise_sigma = 0.0;
  spec.seed = 5;
  CaseBundle once = augment(c, spec);
  CHECK_FALSE(bundles_equal(once, c));
  CHECK(bundles_equal(augment(once, spec), c));
  // Flip negates the x displacement component exactly.
  Grid3 g = c.ct.shape;
  std::int64_t o = g.flat(3, 4, 2);
  std::int64_t om = g.flat(g.x - 1 - 3, 4, 2);
  CHECK(once.gt_dvf->disp(0, o) == -c.gt_dvf->disp(0, om));
  CHECK(once.gt_dvf->disp(1, o) == c.gt_dvf->disp(1, om));
}

TEST_CASE("integer shifts move every volume by the same whole offset") {
  CaseBundle c = make_bundle();
  // Keep both blobs at least max_shift voxels away from every border so no
  // mask voxel can leave the field of view.
  Grid3 g = c.ct.shape;
  c.gtvp01 = blob_mask(g, 8, 7, 4, 2);
  c.gtvn01 = blob_mask(g, 5, 9, 4, 2);
  AugmentSpec spec;
  spec.flip_x = false;
  spec.max_shift_voxels = 1;
  spec.max_rotation_deg = 0.0;
  spec.noise_sigma = 0.0;
  spec.probability = 1.0;
  bool saw_nonzero = false;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    spec.seed = seed;
    CaseBundle out = augment(c, spec);
    Eigen::Vector3d dp = mask_centroid(out.gtvp01) - mask_centroid(c.gtvp01);
    Eigen::Vector3d dn = mask_centroid(out.gtvn01) - mask_centroid(c.gtvn01);
    for (int a = 0; a < 3; ++a) {
      CHECK(dp[a] == std::round(dp[a]));  // exact integer move
      CHECK(std::abs(dp[a]) <= 1.0);
      CHECK(dp[a] == dn[a]);  // identical transform across volumes
    }
    if (dp.norm() > 0) saw_nonzero = true;
    CHECK(mask_binary(out.gtvp01));
    CHECK(out.gtvp01.data.sum() == c.gtvp01.data.sum());
    // Image moved by the same offset: probe one interior voxel.
    int sx = int(std::llround(dp[0])), sy = int(std::llround(dp[1])),
        sz = int(std::llround(dp[2]));
    CHECK(out.ct.at(8 + sx, 7 + sy, 4 + sz) == c.ct.at(8, 7, 4));
  }
  CHECK(saw_nonzero);
}

TEST_CASE("rotation keeps masks binary and remaps displacement vectors") {
  CaseBundle c = make_bundle();
  // A constant unit-x displacement field makes the remap visible.
  c.gt_dvf->disp.setZero();
  c.gt_dvf->disp.row(0).setConstant(1.0f);
  AugmentSpec spec;
  spec.flip_x = false;
  spec.max_shift_voxels = 0;
  spec.max_rotation_deg = 10.0;
  spec.noise_sigma = 0.0;
  spec.probability = 1.0;
  spec.seed = 3;
  CaseBundle out = augment(c, spec);
  CHECK(mask_binary(out.gtvp01));
  CHECK(mask_binary(out.gtvn01));
  Grid3 g = c.ct.shape;
  // Interior voxels: vector rotated within the slice plane, norm preserved.
  std::int64_t o = g.flat(8, 7, 4);
  double dx = out.gt_dvf->disp(0, o), dy = out.gt_dvf->disp(1, o);
  CHECK(std::sqrt(dx * dx + dy * dy) == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(out.gt_dvf->disp(2, o) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(dx != 1.0);  // the angle draw is nonzero with this seed
}

TEST_CASE("augmentation is deterministic in its seed") {
  CaseBundle c = make_bundle();
  AugmentSpec spec;
  spec.probability = 0.7;
  spec.seed = 99;
  CHECK(bundles_equal(augment(c, spec), augment(c, spec)));
  spec.seed = 100;
  // Some other seed produces a different bundle (all transforms enabled).
  CHECK_FALSE(bundles_equal(augment(c, spec), augment(c, AugmentSpec{
      .flip_x = true, .max_shift_voxels = 5, .max_rotation_deg = 10.0,
      .noise_sigma = 0.02, .probability = 0.7, .seed = 1234})));
}

TEST_CASE("noise touches image channels only") {
  CaseBundle c = make_bundle();
  AugmentSpec spec;
  spec.flip_x = false;
  spec.max_shift_voxels = 0;
  spec.max_rotation_deg = 0.0;
  spec.noise_sigma = 0.05;
  spec.probability = 1.0;
  spec.seed = 21;
  CaseBundle out = augment(c, spec);
  CHECK_FALSE(volumes_equal(out.ct, c.ct));
  CHECK_FALSE(volumes_equal(out.cbct01, c.cbct01));
  CHECK_FALSE(volumes_equal(*out.cbct21, *c.cbct21));
  CHECK(volumes_equal(out.dose, c.dose));
  CHECK(volumes_equal(out.gtvp01, c.gtvp01));
  CHECK(volumes_equal(out.gtvn01, c.gtvn01));
  CHECK(volumes_equal(*out.gtvp21, *c.gtvp21));
  CHECK(mask_binary(out.gtvp01));
}

TEST_CASE("case splitting rounds the held-out sets and keeps everything") {
  std::vector<std::string> ids;
  for (int i = 0; i < 121; ++i) ids.push_back("case" + std::to_string(i));
  SplitIds s = split_cases(ids, 0.66, 0.165, 0.175, 42);
  CHECK(s.train.size() == 80);
  CHECK(s.val.size() == 20);
  CHECK(s.test.size() == 21);

  std::vector<std::string> all = s.train;
  all.insert(all.end(), s.val.begin(), s.val.end());
  all.insert(all.end(), s.test.begin(), s.test.end());
  std::sort(all.begin(), all.end());
  std::vector<std::string> expect = ids;
  std::sort(expect.begin(), expect.end());
  CHECK(all == expect);

  std::vector<std::string> ten(ids.begin(), ids.begin() + 10);
  SplitIds s10 = split_cases(ten, 0.8, 0.1, 0.1, 7);
  CHECK(s10.train.size() == 8);
  CHECK(s10.val.size() == 1);
  CHECK(s10.test.size() == 1);

  SplitIds again = split_cases(ids, 0.66, 0.165, 0.175, 42);
  CHECK(again.train == s.train);
  CHECK(again.val == s.val);
  CHECK(again.test == s.test);
  SplitIds other = split_cases(ids, 0.66, 0.165, 0.175, 43);
  CHECK(other.train != s.train);

  CHECK_THROWS_AS(split_cases({}, 0.8, 0.1, 0.1, 1), ConfigError);
  CHECK_THROWS_AS(split_cases(ten, 0.8, 0.3, 0.1, 1), ConfigError);
  CHECK_THROWS_AS(split_cases(ten, 1.2, -0.1, -0.1, 1), ConfigError);
}

TEST_CASE("cases round-trip through the on-disk layout") {
  CaseBundle c = make_bundle();
  fs::path dir = fs::temp_directory_path() / "anapred_dataset_test";
  fs::remove_all(dir);
  fs::create_directories(dir);

  CaseEntry entry = write_case(dir, c);
  CHECK(entry.case_id == "case000");
  CHECK(entry.paths.at("ct") == "case000/ct.mvol");
  CHECK(entry.paths.count("dvf_z") == 1);

  CaseBundle back = read_case(dir, entry);
  CHECK(bundles_equal(back, c));

  write_manifest(dir / "manifest.json", {entry});
  auto entries = read_manifest(dir / "manifest.json");
  REQUIRE(entries.size() == 1);
  CHECK(entries[0].case_id == entry.case_id);
  CHECK(entries[0].paths == entry.paths);
  CHECK(bundles_equal(read_case(dir, entries[0]), c));

  SplitIds split{{"a", "b"}, {"c"}, {"d"}};
  write_split(dir / "split.json", split);
  SplitIds sback = read_split(dir / "split.json");
  CHECK(sback.train == split.train);
  CHECK(sback.val == split.val);
  CHECK(sback.test == split.test);

  CaseEntry missing = entry;
  missing.paths.erase("dose");
  CHECK_THROWS_AS(read_case(dir, missing), MissingInputError);
  CaseEntry bad_path = entry;
  bad_path.paths["dose"] = "case000/nonexistent.mvol";
  CHECK_THROWS_AS(read_case(dir, bad_path), MissingInputError);

  // Pure-inference bundle: no targets, no reference deformation.
  CaseBundle inf = make_bundle(false);
  inf.case_id = "case_inf";
  CaseEntry e2 = write_case(dir, inf);
  CHECK(e2.paths.count("cbct21") == 0);
  CHECK(e2.paths.count("dvf_x") == 0);
  CaseBundle iback = read_case(dir, e2);
  CHECK_FALSE(iback.has_targets());
  CHECK(bundles_equal(iback, inf));
  fs::remove_all(dir);
}
