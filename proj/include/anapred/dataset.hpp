#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "anapred/common.hpp"
#include "anapred/tensor.hpp"
#include "anapred/volume.hpp"

namespace anapred {

// Dense displacement field on the full-resolution grid. `disp` holds one row
// per component (dx, dy, dz), x-fastest over voxels, in voxel units.
struct Dvf {
  Grid3 shape{};
  Vec3 spacing_mm = Vec3(2, 2, 2);
  Mat<float> disp;

  void validate() const;
};

// One longitudinal case: planning volumes, the baseline fraction, and
// (when known) the later fraction used as the training target.
struct CaseBundle {
  std::string case_id;
  Volume ct;
  Volume dose;
  Volume cbct01;
  Volume gtvp01;
  Volume gtvn01;
  std::optional<Volume> cbct21;
  std::optional<Volume> gtvp21;
  std::optional<Volume> gtvn21;
  std::optional<Dvf> gt_dvf;

  bool has_targets() const { return cbct21.has_value(); }
  // All present volumes share shape/spacing/origin; targets are all present
  // or all absent; kinds match the slot.
  void validate() const;
};

enum class BaselineKind { CBCT01, CT };

// Which input channels are active; disabled channels are zero-filled so the
// stacked tensor is always 7-channel.
struct InputSelection {
  bool use_ct = true;
  bool use_dose = true;
  bool use_gtv_masks = true;
  BaselineKind baseline = BaselineKind::CBCT01;
};

// 7 x voxels, rows [ct, gtvp_plan, gtvn_plan, dose, baseline_image,
// gtvp_baseline, gtvn_baseline]. With baseline == CT the two image slots
// swap occupants.
Mat<float> stack_input(const CaseBundle& c, const InputSelection& sel);

// The image the predicted deformation is applied to (the baseline slot).
const Volume& baseline_image(const CaseBundle& c, const InputSelection& sel);

struct AugmentSpec {
  bool flip_x = true;
  int max_shift_voxels = 5;
  double max_rotation_deg = 10.0;
  double noise_sigma = 0.02;
  double probability = 0.5;
  std::uint64_t seed = 0;
};

// One sampled geometric transform (flip / rotate about z / integer shift,
// each engaged with the given probability) applied identically to every
// volume in the bundle; trilinear for Image/Dose, nearest for Mask, with
// displacement vectors remapped consistently. Gaussian noise goes to Image
// channels only. Deterministic in spec.seed.
CaseBundle augment(const CaseBundle& c, const AugmentSpec& spec);

struct SplitIds {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

// Deterministic shuffle then partition; val/test sizes are rounded,
// remainder goes to train.
SplitIds split_cases(const std::vector<std::string>& ids, double train_frac,
                     double val_frac, double test_frac, std::uint64_t seed);

// Manifest row: case id plus channel-name -> file path (relative to the
// manifest's directory).
struct CaseEntry {
  std::string case_id;
  std::map<std::string, std::string> paths;
};

// Writes every volume of the bundle under dir/<case_id>/ and returns the
// manifest row describing it.
CaseEntry write_case(const std::filesystem::path& dir, const CaseBundle& c);
CaseBundle read_case(const std::filesystem::path& base_dir,
                     const CaseEntry& entry);

// Loads a single case straight from its directory (as written by write_case)
// without a manifest: the directory name is the case id and every known
// channel file found inside is picked up.
CaseBundle read_case_dir(const std::filesystem::path& case_dir);

void write_manifest(const std::filesystem::path& path,
                    const std::vector<CaseEntry>& entries);
std::vector<CaseEntry> read_manifest(const std::filesystem::path& path);

void write_split(const std::filesystem::path& path, const SplitIds& split);
SplitIds read_split(const std::filesystem::path& path);

// Conforms every volume of the corpus at in_dir to the target grid with the
// fixed chain resample -> center crop/pad -> per-kind normalization (images
// clip-normalized, dose z-scored, masks binarized). Steps whose work is
// already done are skipped and recorded as "identity" in the provenance, so
// a second pass over the output is the identity everywhere. Reference
// deformation components are copied through untouched. Writes the processed
// volumes, the manifest, the split file when present, and provenance.json.
void preprocess_corpus(const std::filesystem::path& in_dir,
                       const std::filesystem::path& out_dir,
                       Vec3 target_spacing_mm, Grid3 target_shape);

}  // namespace anapred
