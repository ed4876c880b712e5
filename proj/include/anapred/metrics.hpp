#pragma once

#include <string>
#include <vector>

#include "anapred/volume.hpp"

namespace anapred {

// One evaluation row: a candidate image/structure set compared against the
// fixed target. Distances are millimeters; images are assumed normalized.
struct MetricsRow {
  std::string subject;
  double mse = 0, ssim = 0;
  double dice_body = 0, dice_gtvp = 0, dice_gtvn = 0;
  double asd_body_mm = 0, asd_gtvp_mm = 0, asd_gtvn_mm = 0;

  bool operator==(const MetricsRow&) const = default;
};

struct MetricsReport {
  std::vector<std::vector<MetricsRow>> cases;  // per case, one row per subject
  std::vector<MetricsRow> median;              // per subject, lower-middle
  std::vector<MetricsRow> stddev;              // per subject, population std

  bool operator==(const MetricsReport&) const = default;
};

// A candidate to score against the targets.
struct SubjectVolumes {
  std::string label;
  Volume image;
  Volume gtvp;
  Volume gtvn;
};

// Mean squared voxel difference (double accumulation).
double mse(const Volume& a, const Volume& b);

// Mean local structural similarity; shares window/constants with the
// training objective, so ssim_eval == 1 - ssim_loss identically.
double ssim_eval(const Volume& a, const Volume& b);

// Overlap 2|a∩b| / (|a|+|b|); 1.0 when both masks are empty.
double dice(const Volume& a, const Volume& b);

// Average symmetric surface distance in mm. Surfaces are mask voxels with at
// least one six-neighbor outside the mask (the volume border counts as
// outside); distances are Euclidean between voxel centers using the shared
// spacing. Throws NumericError on an empty mask.
double asd_mm(const Volume& a, const Volume& b);

// Mask of voxels >= threshold (no morphology); exposed for property tests.
Volume threshold_mask(const Volume& img, float threshold);

// Patient-body surrogate: threshold at -0.5, keep the largest six-connected
// component, close with the radius-1 cross, fill in-slice holes. Throws
// NumericError when nothing survives thresholding.
Volume body_mask(const Volume& img);

// Scores every candidate against the target triple; one row per candidate,
// in input order. Body masks are derived from the images via body_mask.
std::vector<MetricsRow> evaluate_case(const std::vector<SubjectVolumes>& candidates,
                                      const Volume& target_image,
                                      const Volume& target_gtvp,
                                      const Volume& target_gtvn);

// Per-subject lower-middle median and population standard deviation across
// cases; every case must list the same subjects in the same order.
MetricsReport aggregate(const std::vector<std::vector<MetricsRow>>& per_case);

std::string report_to_json(const MetricsReport& r);
MetricsReport report_from_json(const std::string& text);
std::string report_table(const MetricsReport& r);
std::string report_csv(const MetricsReport& r);

}  // namespace anapred
