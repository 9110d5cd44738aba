#pragma once

#include <stdexcept>
#include <string>

#include "mcl3d/volume.hpp"

namespace mcl3d::preproc {

struct EmptyMaskError : std::runtime_error {
  EmptyMaskError() : std::runtime_error("brain mask has no true voxels") {}
};

struct DegenerateVolumeError : std::runtime_error {
  DegenerateVolumeError() : std::runtime_error("constant in-mask intensities; scan rejected") {}
};

// Trilinear resampling of intensities to an isotropic grid; the brain mask,
// when present, is resampled with nearest-neighbor.
Volume resample_isotropic(const Volume& v, double target_mm);

// Permutes/flips axes so orientation becomes RAS.
Volume reorient_ras(const Volume& v);

// Tight axis-aligned bounding box of the brain mask.
Volume crop_to_bbox(const Volume& v);

// Clip to the in-mask [p0.5, p99.5] percentile range, then z-score with
// in-mask statistics computed after clipping.
Volume clip_normalize(const Volume& v, double lo_pct = 0.5, double hi_pct = 99.5);

// Keep iff every spatial extent (shape * spacing) is >= min_extent_mm.
bool size_filter(const Volume& v, double min_extent_mm = 120.0);

// Percentile with linear interpolation between closest ranks, over the
// in-mask voxels. Exposed for oracle tests.
double masked_percentile(const Volume& v, const Tensor& mask, double pct);

struct PreprocResult {
  bool kept = false;
  std::string reason;  // "size" | "degenerate" | "" when kept
  Volume volume;
};

// reorient -> resample(1mm) -> crop -> size filter -> clip_normalize.
// A missing brain mask is derived as data != 0.
PreprocResult preprocess_volume(const Volume& v, double min_extent_mm = 120.0,
                                double target_mm = 1.0);

}  // namespace mcl3d::preproc
