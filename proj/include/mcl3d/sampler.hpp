#pragma once

#include <map>

#include "mcl3d/cohort.hpp"
#include "mcl3d/rng.hpp"
#include "mcl3d/tensor.hpp"

namespace mcl3d::sampler {

enum class Mode { MCL, CL };

Mode mode_from_string(const std::string& s);
std::string to_string(Mode m);

struct SamplingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AugmentConfig {
  bool spatial = true;
  double rot_deg = 15.0;
  double scale_lo = 0.9, scale_hi = 1.1;
  bool flips = true;
  bool intensity = true;
  double gamma_lo = 0.7, gamma_hi = 1.5;
  double noise_sigma_max = 0.1;
  double bias_lo = 0.9, bias_hi = 1.1;
};

struct AffineParams {
  double rot[3] = {0, 0, 0};  // radians about each axis
  double scale = 1.0;
  bool flip[3] = {false, false, false};

  static AffineParams identity() { return {}; }
  static AffineParams sample(const AugmentConfig& cfg, Rng& rng);
};

struct IntensityParams {
  double gamma = 1.0;
  double noise_sigma = 0.0;
  double bias = 1.0;

  static IntensityParams identity() { return {}; }
  static IntensityParams sample(const AugmentConfig& cfg, Rng& rng);
};

// Rotation + scaling + flips about the patch center, trilinear resampling,
// shape preserved, zero fill outside.
Tensor affine_augment(const Tensor& patch, const AffineParams& p);

// Gamma on min-max-rescaled values, multiplicative bias, additive noise.
Tensor intensity_augment(const Tensor& patch, const IntensityParams& p, Rng& noise_rng);

// Lazily-loaded, cached volume data per cohort record.
class VolumeStore {
 public:
  explicit VolumeStore(const CohortIndex& idx) : idx_(&idx) {}
  const Tensor& get(size_t record_idx);

 private:
  const CohortIndex* idx_;
  std::map<size_t, Tensor> cache_;
};

struct PairItem {
  Tensor query, key, mim_target;  // [P,P,P]
  std::string subject_id;
  int session_id = 0;
  std::string modality_q, modality_k;
  std::array<int64_t, 3> origin{0, 0, 0};
};

struct PairBatch {
  Tensor query_views, key_views, mim_targets;  // [B,1,P,P,P]
  std::vector<std::string> subject_ids;
  std::vector<int> session_ids;
  std::vector<std::string> modality_q, modality_k;
  std::vector<std::array<int64_t, 3>> origins;

  int64_t size() const { return static_cast<int64_t>(subject_ids.size()); }
};

// One positive pair: query and key from the same (subject, session),
// co-localized crops; modality choice per mode. The spatial rng drives
// session/patch/affine choices, the intensity rng only intensity params.
PairItem sample_pair(const CohortIndex& index, VolumeStore& store, Mode mode, int64_t patch_size,
                     const AugmentConfig& cfg, Rng& spatial_rng, Rng& intensity_rng);

PairBatch make_batch(const CohortIndex& index, VolumeStore& store, Mode mode, int64_t batch_size,
                     int64_t patch_size, const AugmentConfig& cfg, Rng& spatial_rng,
                     Rng& intensity_rng);

}  // namespace mcl3d::sampler
