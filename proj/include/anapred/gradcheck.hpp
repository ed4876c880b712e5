#pragma once

#include <string>
#include <vector>

#include "anapred/model.hpp"

namespace anapred {

// One line of the gradient verification report: a parameter group, or one
// deformation-field input ("warp", "ssim", "dice_gtvp", "dice_gtvn",
// "diffusion", "total").
struct GradCheckRow {
  std::string name;
  double worst_rel = 0;
  std::string worst_entry;  // element whose error is reported
  int checked = 0;
  int skipped = 0;  // probes where the two finite-difference scales disagreed
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckRow> groups;  // all six parameter groups
  std::vector<GradCheckRow> field;   // gradients w.r.t. the deformation field
  double tolerance = 1e-4;
  int params_checked = 0;
  bool pass = false;
  std::string failure;  // name of the first failing row, empty when pass
};

// Verifies analytic gradients against central finite differences, all in
// 64-bit. Model parameters are probed by sampling `min_params` entries spread
// over the six groups on a randomized instance of `cfg`; the deformation
// field is probed directly through the warp and through every loss term.
// Probes are run at two step sizes and skipped when the two disagree (the
// loss is only piecewise smooth); a row passes when its worst relative error
// stays within `tol` and skips stay rare. `corrupt_group` is a test hook: it
// biases one analytic value in the named group so the detector must fire.
GradCheckReport run_gradcheck(const ModelConfig& cfg, std::uint64_t seed = 0,
                              int min_params = 200, double tol = 1e-4,
                              const std::string& corrupt_group = {});

std::string gradcheck_report_json(const GradCheckReport& r);

}  // namespace anapred
