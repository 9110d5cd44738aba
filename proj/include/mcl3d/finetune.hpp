#pragma once

#include <functional>
#include <ostream>
#include <utility>

#include "mcl3d/cohort.hpp"
#include "mcl3d/model.hpp"

namespace mcl3d::finetune {

struct SegSample {
  std::string subject_id;
  int session_id = 0;
  int center_id = 0;
  Tensor image;  // [D, H, W], preprocessed
  Tensor label;  // same shape, values in {0, 1}

  void validate() const;
};

struct FinetuneConfig {
  std::string checkpoint = "scratch";  // pretrain checkpoint path or "scratch"
  std::string modality;
  int64_t total_steps = 500;
  double freeze_fraction = 0.3;
  double data_fraction = 1.0;
  int64_t window = 64;
  double window_overlap = 0.5;
  int64_t batch_size = 2;
  double lr = 1e-4;
  double weight_decay = 0.01;
  uint64_t seed = 0;
  int fpn_dim = 16;
  model::EncoderConfig encoder = model::EncoderConfig::tiny();
  std::string out_dir = ".";

  bool from_scratch() const { return checkpoint == "scratch"; }
  int64_t frozen_steps() const;  // ceil(freeze_fraction * total_steps), 0 for scratch
  void validate() const;
  static FinetuneConfig paper();
};

// Encoder + freshly initialized decoder producing voxel logits.
class SegModel {
 public:
  SegModel(const model::EncoderConfig& cfg, int fpn_dim, Rng& rng);

  Tensor forward(const Tensor& x);  // [B,1,D,H,W] -> logits, same spatial shape
  void backward(const Tensor& d_logits);
  void collect(nn::ParamRefs& out);
  nn::ParamRefs encoder_params();

  void save(const std::string& path, int64_t step) const;
  static std::unique_ptr<SegModel> load(const std::string& path, int* fpn_dim_out = nullptr);

  model::Encoder& encoder() { return *enc_; }
  int fpn_dim() const { return fpn_dim_; }

 private:
  model::EncoderConfig cfg_;
  int fpn_dim_;
  std::unique_ptr<model::Encoder> enc_;
  std::unique_ptr<model::FPNDecoder> dec_;
};

struct SegLossResult {
  double loss = 0, bce = 0, soft_dice = 0;
  Tensor d_logits;
};

// Soft-Dice + binary cross-entropy on logits.
SegLossResult seg_loss(const Tensor& logits, const Tensor& labels);

double dice(const Tensor& pred, const Tensor& gt);  // binary masks; empty vs empty = 1

// Uniform-average logits over tiled windows; volumes smaller than the window
// are zero-padded and un-padded after.
Tensor sliding_window_logits(SegModel& m, const Tensor& vol, int64_t window, double overlap);
Tensor sliding_window_infer(SegModel& m, const Tensor& vol, int64_t window, double overlap);

std::pair<std::vector<SegSample>, std::vector<SegSample>> split_by_center(
    const std::vector<SegSample>& samples, const std::vector<int>& held_out_centers);

// Seeded shuffle prefix; fractions of the same seed give nested subsets.
std::vector<size_t> data_fraction_subset(size_t n, double fraction, uint64_t seed);

std::vector<SegSample> load_seg_samples(const CohortIndex& index, const std::string& modality);

struct FinetuneMetrics {
  int64_t step = 0;
  double loss = 0, bce = 0, soft_dice = 0;
  bool encoder_frozen = false;
};

struct FinetuneResult {
  std::string model_path;
  std::vector<FinetuneMetrics> metrics;
};

FinetuneResult run_finetune(const FinetuneConfig& cfg, const std::vector<SegSample>& train,
                            std::ostream* progress = nullptr,
                            const std::function<void(int64_t, SegModel&)>& on_step = {});

double evaluate_mean_dice(SegModel& m, const std::vector<SegSample>& test, int64_t window,
                          double overlap);

struct AblationCell {
  std::string variant;
  double fraction = 1.0;
  double mean_dice = 0.0;
  bool available = true;
};

struct AblationTable {
  std::vector<std::string> variants;
  std::vector<double> fractions;
  std::vector<AblationCell> cells;

  std::string format_text() const;  // aligned rows, 4-decimal cells
  std::string format_json() const;
};

// One fine-tune + evaluation per (variant checkpoint, fraction); a missing
// checkpoint skips the row with a warning cell.
AblationTable run_ablation(const FinetuneConfig& base,
                           const std::vector<std::pair<std::string, std::string>>& variants,
                           const std::vector<double>& fractions,
                           const std::vector<SegSample>& train,
                           const std::vector<SegSample>& test, std::ostream* progress = nullptr);

}  // namespace mcl3d::finetune
