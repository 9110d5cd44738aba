#pragma once

#include <array>
#include <string>
#include <vector>

#include "mcl3d/tensor.hpp"

namespace mcl3d::objectives {

struct LossWeights {
  double lambda_cl = 1.0;
  double lambda_mim = 1.0;
  double temperature = 0.2;

  void validate() const;
};

// Fixed-capacity FIFO ring of unit-norm keys with their subject ids.
class NegativeQueue {
 public:
  NegativeQueue(int64_t capacity, int64_t dim);

  void enqueue(const Tensor& keys, const std::vector<std::string>& subject_ids);  // [B, D]

  int64_t size() const { return size_; }
  int64_t capacity() const { return cap_; }
  int64_t dim() const { return dim_; }
  const float* key(int64_t i) const;            // i in [0, size), FIFO order
  const std::string& subject(int64_t i) const;

  Tensor snapshot_keys() const;                 // [size, D], FIFO order
  std::vector<std::string> snapshot_subjects() const;
  static NegativeQueue restore(int64_t capacity, const Tensor& keys,
                               const std::vector<std::string>& subject_ids);

 private:
  int64_t cap_, dim_, size_ = 0, cursor_ = 0;
  Tensor keys_;
  std::vector<std::string> subjects_;
};

struct InfoNceResult {
  double loss = 0.0;
  Tensor d_q;                    // [B, D], gradient of the mean loss w.r.t. q
  bool empty_negatives = false;  // some item had no admissible negatives
};

// Mean InfoNCE over the batch. Queue entries sharing an item's subject id
// are excluded from that item's negative set.
InfoNceResult info_nce(const Tensor& q, const Tensor& k_pos, const NegativeQueue& queue,
                       const std::vector<std::string>& subject_ids, double tau);

struct ReconResult {
  double loss = 0.0;
  Tensor d_pred;
};

// Mean squared error over masked voxels only; voxel_mask has one entry per
// spatial voxel of pred ([B, 1, D, H, W]).
ReconResult masked_recon_loss(const Tensor& pred, const Tensor& target,
                              const std::vector<uint8_t>& voxel_mask);

double combined_loss(double cl, double mim, const LossWeights& w);

// Nearest-neighbor expansion of a per-cell mask by an integer factor per axis.
std::vector<uint8_t> upsample_mask(const std::vector<uint8_t>& mask, int64_t batch,
                                   std::array<int64_t, 3> grid, int factor);

}  // namespace mcl3d::objectives
