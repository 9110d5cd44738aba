#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mcl3d/rng.hpp"
#include "mcl3d/tensor.hpp"

namespace mcl3d::nn {

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string n, std::vector<int64_t> shape) : name(std::move(n)), value(shape), grad(shape) {}
};

using ParamRefs = std::vector<Param*>;

inline void zero_grads(const ParamRefs& ps) {
  for (auto* p : ps) p->grad.zero();
}

double grad_l2_norm(const ParamRefs& ps);

// Layers cache their last forward inputs; backward may be called repeatedly
// on the same cache and accumulates into Param::grad.
class Module {
 public:
  virtual ~Module() = default;
  virtual Tensor forward(const Tensor& x) = 0;
  virtual Tensor backward(const Tensor& dy) = 0;
  virtual void collect(ParamRefs& out) {}
};

// 3D convolution on [N, C, D, H, W], im2col + GEMM.
class Conv3d : public Module {
 public:
  Conv3d(std::string name, int in_ch, int out_ch, int kernel, int stride, int pad, Rng& rng);

  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& dy) override;
  void collect(ParamRefs& out) override;

  Param weight;  // [out_ch, in_ch*k^3]
  Param bias;    // [out_ch]

  int in_ch() const { return in_ch_; }
  int out_ch() const { return out_ch_; }

 private:
  int in_ch_, out_ch_, k_, stride_, pad_;
  Tensor x_cache_;
};

// Token-wise affine map: treats the channel axis of [N, C, D, H, W] as the
// feature dimension, or the last axis of a 2D [M, in] tensor.
class Linear : public Module {
 public:
  Linear(std::string name, int in_dim, int out_dim, Rng& rng);

  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& dy) override;
  void collect(ParamRefs& out) override;

  Param weight;  // [out, in]
  Param bias;    // [out]

 private:
  int in_, out_;
  Tensor x_cache_;
};

// Per-position normalization over the channel axis of [N, C, D, H, W].
class LayerNorm : public Module {
 public:
  LayerNorm(std::string name, int ch);

  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& dy) override;
  void collect(ParamRefs& out) override;

  Param gamma, beta;

 private:
  int ch_;
  Tensor x_cache_, mu_, rstd_;
};

class Gelu : public Module {
 public:
  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& dy) override;

 private:
  Tensor x_cache_;
};

class Relu : public Module {
 public:
  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& dy) override;

 private:
  Tensor x_cache_;
};

// Nearest-neighbor upsampling by an integer factor on [N, C, D, H, W].
class UpsampleNearest : public Module {
 public:
  explicit UpsampleNearest(int factor) : f_(factor) {}
  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& dy) override;

 private:
  int f_;
  std::vector<int64_t> in_shape_;
};

// Trilinear upsampling by an integer factor (align_corners=false convention).
class UpsampleTrilinear : public Module {
 public:
  explicit UpsampleTrilinear(int factor) : f_(factor) {}
  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& dy) override;

 private:
  int f_;
  std::vector<int64_t> in_shape_;
};

// Multi-head self-attention within non-overlapping local windows of a
// [N, C, D, H, W] token grid. Grid sizes need not be divisible by the
// window; edge windows are smaller.
class WindowAttention : public Module {
 public:
  WindowAttention(std::string name, int ch, int heads, int window, Rng& rng);

  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& dy) override;
  void collect(ParamRefs& out) override;

  Param w_qkv;  // [3C, C]
  Param b_qkv;  // [3C]
  Param w_out;  // [C, C]
  Param b_out;  // [C]

 private:
  int ch_, heads_, window_;
  Tensor x_cache_;
  struct WinCache;
  std::vector<WinCache> wins_;
  std::vector<int64_t> in_shape_;

 public:
  ~WindowAttention() override;
};

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

class AdamW {
 public:
  AdamW(ParamRefs params, AdamWConfig cfg);
  void step();
  // Skips both the gradient update and weight decay for the named params.
  void step(const std::vector<const Param*>& frozen);

  int64_t t() const { return t_; }
  void set_t(int64_t t) { t_ = t; }
  AdamWConfig& config() { return cfg_; }

  // Moment buffers, index-aligned with the constructor's param list.
  size_t n_slots() const { return m_.size(); }
  Tensor& m_slot(size_t i) { return m_[i]; }
  Tensor& v_slot(size_t i) { return v_[i]; }

 private:
  ParamRefs params_;
  AdamWConfig cfg_;
  std::vector<Tensor> m_, v_;
  int64_t t_ = 0;
};

// Kaiming-style init helpers.
void init_uniform_fan_in(Tensor& w, int64_t fan_in, Rng& rng);

}  // namespace mcl3d::nn
