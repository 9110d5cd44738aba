#pragma once

#include <optional>
#include <ostream>

#include "mcl3d/model.hpp"
#include "mcl3d/objectives.hpp"
#include "mcl3d/sampler.hpp"

namespace mcl3d::pretrain {

enum class Variant { CL, MCL, CL_MIM, MCL_MIM };

Variant variant_from_string(const std::string& s);
std::string to_string(Variant v);
inline bool uses_mim(Variant v) { return v == Variant::CL_MIM || v == Variant::MCL_MIM; }
inline sampler::Mode pair_mode(Variant v) {
  return (v == Variant::MCL || v == Variant::MCL_MIM) ? sampler::Mode::MCL : sampler::Mode::CL;
}

struct PretrainConfig {
  Variant variant = Variant::MCL_MIM;
  int64_t total_steps = 2000;
  int64_t batch_size = 4;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double mask_ratio_lo = 0.5, mask_ratio_hi = 0.75;
  int64_t queue_capacity = 1024;
  int64_t patch_size = 32;
  uint64_t seed = 0;
  int64_t checkpoint_every = 1000;
  int fpn_dim = 16;
  model::EncoderConfig encoder = model::EncoderConfig::tiny();
  objectives::LossWeights weights;
  sampler::AugmentConfig augment;
  std::string out_dir = ".";

  void validate() const;
  static PretrainConfig desk() { return {}; }
  static PretrainConfig paper();
};

struct StepMetrics {
  int64_t step = 0;
  double loss_cl = 0, loss_mim = 0, loss_total = 0;
  double grad_norm_cl = 0, grad_norm_mim = 0;
  double momentum = 0, mask_ratio = 0;
  int64_t queue_size = 0;
  bool empty_negatives = false;

  std::string to_json() const;
};

class Trainer {
 public:
  Trainer(const PretrainConfig& cfg, const CohortIndex& index);

  StepMetrics step();
  int64_t current_step() const { return step_; }

  model::Checkpoint make_checkpoint() const;
  void restore(const model::Checkpoint& ck);

  nn::ParamRefs trainable_params();      // online encoder + head + decoder
  nn::ParamRefs online_encoder_params();
  nn::ParamRefs momentum_encoder_params();
  model::Encoder& online_encoder() { return *online_; }

 private:
  PretrainConfig cfg_;
  const CohortIndex* index_;
  sampler::VolumeStore store_;
  std::unique_ptr<model::Encoder> online_, momentum_;
  std::unique_ptr<model::ProjectionHead> head_q_, head_k_;
  std::unique_ptr<model::FPNDecoder> decoder_;
  objectives::NegativeQueue queue_;
  nn::ParamRefs trainables_, momenta_;   // momenta_: momentum enc + head_k
  nn::ParamRefs online_ema_src_;         // online enc + head_q, aligned with momenta_
  std::unique_ptr<nn::AdamW> opt_;
  Rng spatial_rng_, intensity_rng_, mask_rng_;
  int64_t step_ = 0;
};

// Runs (or resumes) the configured number of steps, appending one structured
// metrics record per step and checkpointing periodically. Returns the final
// checkpoint path.
std::string run_pretraining(const PretrainConfig& cfg, const CohortIndex& index,
                            const std::string& resume_from = "",
                            std::ostream* progress = nullptr);

}  // namespace mcl3d::pretrain
