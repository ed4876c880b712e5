#pragma once

#include <vector>

#include "anapred/dataset.hpp"

namespace anapred {

// Recipe for one procedural longitudinal case: an ellipsoidal body with two
// tumor spheres and a dose blob, plus a smooth synthetic deformation that
// shrinks the tumors and pulls the body surface inward between fractions.
struct PhantomSpec {
  std::string case_id = "phantom000";
  Grid3 shape{64, 64, 16};
  Vec3 spacing_mm = Vec3(2, 2, 2);
  Vec3 body_semiaxes_mm = Vec3(52, 44, 11);
  double gtvp_radius_mm = 7.5;
  double gtvn_radius_mm = 5.5;
  double shrink_factor = 0.7;   // tumor volume ratio, later / baseline
  double body_shrink_mm = 1.0;  // inward surface displacement
  double noise_sigma_image = 0.02;
  double dose_peak = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Builds the full bundle: planning volumes, baseline fraction, the
// deformed later fraction, and the reference deformation field itself.
// Deterministic in spec.seed.
CaseBundle generate_case(const PhantomSpec& spec);

struct ParamRange {
  double lo = 0;
  double hi = 0;
};

// Per-case parameter ranges for corpus generation; `base` supplies the
// fields that stay fixed across cases.
struct CorpusRanges {
  PhantomSpec base;
  // Upper shrink bound 0.58: beyond it the boundary displacement of the
  // smallest primary target falls under half a voxel on the default 2 mm
  // grid, so the nearest-neighbor target mask would not change at all.
  ParamRange gtvp_radius_mm{7.0, 8.3};
  ParamRange gtvn_radius_mm{4.0, 6.5};
  ParamRange shrink_factor{0.50, 0.58};
  ParamRange body_shrink_mm{0.0, 1.4};
};

// The per-case specs a corpus run would use (exposed for inspection).
std::vector<PhantomSpec> corpus_specs(int n, const CorpusRanges& ranges,
                                      std::uint64_t seed);

std::vector<CaseBundle> generate_corpus(int n, const CorpusRanges& ranges,
                                        std::uint64_t seed);

}  // namespace anapred
