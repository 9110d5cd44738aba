#pragma once

#include "mcl3d/cohort.hpp"
#include "mcl3d/rng.hpp"
#include "mcl3d/volume.hpp"

namespace mcl3d::synth {

struct CohortSpec {
  int n_subjects = 8;
  int sessions_per_subject = 1;
  std::vector<std::string> modalities = {"M0", "M1"};
  std::array<int64_t, 3> volume_shape{128, 128, 128};
  double lesion_fraction = 0.0;   // per-subject probability; >0 marks a downstream cohort
  uint64_t seed = 0;
  int n_centers = 3;
  double lesion_intensity = 4.0;  // lesion contrast in units of in-brain std

  void validate() const;
};

// One random smooth anatomy per subject, shared across that subject's
// modalities; per-modality intensity transfer + noise; per-session rigid
// jitter; lesions implanted with ground-truth masks when requested.
// Deterministic given the spec.
CohortIndex generate_cohort(const CohortSpec& spec, const std::string& out_dir);

// Internals exposed for tests.
struct SubjectAnatomy {
  Tensor structure_field;  // in [0,1] inside the brain, 0 outside
  Tensor brain_mask;
};

SubjectAnatomy make_anatomy(const CohortSpec& spec, int subject);
Tensor apply_modality(const Tensor& structure_field, const Tensor& brain_mask, int modality_idx,
                      Rng& noise_rng);

}  // namespace mcl3d::synth
