#include "mcl3d/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mcl3d::objectives {

void LossWeights::validate() const {
  if (temperature <= 0.0) throw std::invalid_argument("temperature must be positive");
  if (lambda_cl < 0.0 || lambda_mim < 0.0)
    throw std::invalid_argument("loss weights must be non-negative");
}

NegativeQueue::NegativeQueue(int64_t capacity, int64_t dim)
    : cap_(capacity), dim_(dim), keys_({capacity, dim}), subjects_(static_cast<size_t>(capacity)) {
  if (capacity < 1 || dim < 1) throw std::invalid_argument("NegativeQueue: positive sizes");
  keys_.zero();
}

void NegativeQueue::enqueue(const Tensor& keys, const std::vector<std::string>& subject_ids) {
  if (keys.ndim() != 2 || keys.dim(1) != dim_)
    throw std::invalid_argument("NegativeQueue: keys must be [B, dim]");
  int64_t B = keys.dim(0);
  if (B != static_cast<int64_t>(subject_ids.size()))
    throw std::invalid_argument("NegativeQueue: one subject id per key");
  if (B > cap_) throw std::invalid_argument("NegativeQueue: batch exceeds capacity");
  for (int64_t i = 0; i < B; ++i) {
    double n2 = 0;
    for (int64_t d = 0; d < dim_; ++d)
      n2 += static_cast<double>(keys[i * dim_ + d]) * keys[i * dim_ + d];
    if (std::abs(std::sqrt(n2) - 1.0) > 1e-5)
      throw std::invalid_argument("NegativeQueue: keys must be unit-norm");
  }
  for (int64_t i = 0; i < B; ++i) {
    std::copy(keys.ptr() + i * dim_, keys.ptr() + (i + 1) * dim_, keys_.ptr() + cursor_ * dim_);
    subjects_[static_cast<size_t>(cursor_)] = subject_ids[static_cast<size_t>(i)];
    cursor_ = (cursor_ + 1) % cap_;
    size_ = std::min(size_ + 1, cap_);
  }
}

const float* NegativeQueue::key(int64_t i) const {
  int64_t slot = size_ < cap_ ? i : (cursor_ + i) % cap_;
  return keys_.ptr() + slot * dim_;
}

const std::string& NegativeQueue::subject(int64_t i) const {
  int64_t slot = size_ < cap_ ? i : (cursor_ + i) % cap_;
  return subjects_[static_cast<size_t>(slot)];
}

Tensor NegativeQueue::snapshot_keys() const {
  Tensor out({size_, dim_});
  for (int64_t i = 0; i < size_; ++i)
    std::copy(key(i), key(i) + dim_, out.ptr() + i * dim_);
  return out;
}

std::vector<std::string> NegativeQueue::snapshot_subjects() const {
  std::vector<std::string> out(static_cast<size_t>(size_));
  for (int64_t i = 0; i < size_; ++i) out[static_cast<size_t>(i)] = subject(i);
  return out;
}

NegativeQueue NegativeQueue::restore(int64_t capacity, const Tensor& keys,
                                     const std::vector<std::string>& subject_ids) {
  NegativeQueue q(capacity, keys.dim(1));
  int64_t n = keys.dim(0);
  for (int64_t start = 0; start < n; start += capacity) {
    int64_t b = std::min(capacity, n - start);
    Tensor chunk({b, keys.dim(1)});
    std::copy(keys.ptr() + start * keys.dim(1), keys.ptr() + (start + b) * keys.dim(1),
              chunk.ptr());
    std::vector<std::string> ids(subject_ids.begin() + start, subject_ids.begin() + start + b);
    q.enqueue(chunk, ids);
  }
  return q;
}

InfoNceResult info_nce(const Tensor& q, const Tensor& k_pos, const NegativeQueue& queue,
                       const std::vector<std::string>& subject_ids, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("info_nce: tau must be positive");
  if (q.ndim() != 2 || !q.same_shape(k_pos))
    throw std::invalid_argument("info_nce: q and k_pos must be matching [B, D]");
  int64_t B = q.dim(0), D = q.dim(1);
  if (B != static_cast<int64_t>(subject_ids.size()))
    throw std::invalid_argument("info_nce: one subject id per item");

  InfoNceResult res;
  res.d_q = Tensor({B, D});
  res.d_q.zero();
  double total = 0;
  std::vector<int64_t> negs;
  std::vector<double> logits;
  for (int64_t i = 0; i < B; ++i) {
    const float* qi = q.ptr() + i * D;
    negs.clear();
    for (int64_t j = 0; j < queue.size(); ++j)
      if (queue.subject(j) != subject_ids[static_cast<size_t>(i)]) negs.push_back(j);
    if (negs.empty()) {
      res.empty_negatives = true;  // positive-only softmax: loss 0, zero gradient
      continue;
    }
    double lp = 0;
    for (int64_t d = 0; d < D; ++d)
      lp += static_cast<double>(qi[d]) * k_pos[i * D + d];
    lp /= tau;
    logits.assign(negs.size() + 1, lp);
    for (size_t j = 0; j < negs.size(); ++j) {
      const float* kj = queue.key(negs[j]);
      double l = 0;
      for (int64_t d = 0; d < D; ++d) l += static_cast<double>(qi[d]) * kj[d];
      logits[j + 1] = l / tau;
    }
    double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (double l : logits) z += std::exp(l - mx);
    total += -(logits[0] - mx) + std::log(z);

    double p_pos = std::exp(logits[0] - mx) / z;
    double c = 1.0 / (tau * static_cast<double>(B));
    for (int64_t d = 0; d < D; ++d)
      res.d_q[i * D + d] += static_cast<float>(c * (p_pos - 1.0) * k_pos[i * D + d]);
    for (size_t j = 0; j < negs.size(); ++j) {
      double pj = std::exp(logits[j + 1] - mx) / z;
      const float* kj = queue.key(negs[j]);
      for (int64_t d = 0; d < D; ++d)
        res.d_q[i * D + d] += static_cast<float>(c * pj * kj[d]);
    }
  }
  res.loss = total / static_cast<double>(B);
  return res;
}

ReconResult masked_recon_loss(const Tensor& pred, const Tensor& target,
                              const std::vector<uint8_t>& voxel_mask) {
  check_same_shape(pred, target, "masked_recon_loss");
  if (static_cast<int64_t>(voxel_mask.size()) != pred.numel())
    throw std::invalid_argument("masked_recon_loss: one mask entry per voxel");
  ReconResult res;
  res.d_pred = Tensor(pred.shape);
  res.d_pred.zero();
  int64_t n_masked = 0;
  double se = 0;
  for (int64_t i = 0; i < pred.numel(); ++i)
    if (voxel_mask[static_cast<size_t>(i)]) {
      double d = static_cast<double>(pred[i]) - target[i];
      se += d * d;
      ++n_masked;
    }
  if (n_masked == 0) return res;
  res.loss = se / static_cast<double>(n_masked);
  float c = 2.f / static_cast<float>(n_masked);
  for (int64_t i = 0; i < pred.numel(); ++i)
    if (voxel_mask[static_cast<size_t>(i)]) res.d_pred[i] = c * (pred[i] - target[i]);
  return res;
}

double combined_loss(double cl, double mim, const LossWeights& w) {
  w.validate();
  return w.lambda_cl * cl + w.lambda_mim * mim;
}

std::vector<uint8_t> upsample_mask(const std::vector<uint8_t>& mask, int64_t batch,
                                   std::array<int64_t, 3> grid, int factor) {
  if (static_cast<int64_t>(mask.size()) != batch * grid[0] * grid[1] * grid[2])
    throw std::invalid_argument("upsample_mask: size mismatch");
  int64_t g0 = grid[0] * factor, g1 = grid[1] * factor, g2 = grid[2] * factor;
  std::vector<uint8_t> out(static_cast<size_t>(batch * g0 * g1 * g2));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t z = 0; z < g0; ++z)
      for (int64_t y = 0; y < g1; ++y)
        for (int64_t x = 0; x < g2; ++x)
          out[static_cast<size_t>(((b * g0 + z) * g1 + y) * g2 + x)] =
              mask[static_cast<size_t>(
                  ((b * grid[0] + z / factor) * grid[1] + y / factor) * grid[2] + x / factor)];
  return out;
}

}  // namespace mcl3d::objectives
