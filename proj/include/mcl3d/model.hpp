#pragma once

#include <array>
#include <map>
#include <memory>

#include "mcl3d/nn.hpp"

namespace mcl3d::model {

struct EncoderConfig {
  int in_channels = 1;
  int patch_embed_stride = 4;
  std::vector<int> stage_dims{32, 64, 128, 256};
  std::vector<int> stage_depths{1, 1, 2, 1};
  int window_size = 3;
  int projection_dim = 128;
  int head_dim = 16;

  int n_stages() const { return static_cast<int>(stage_dims.size()); }
  int bottleneck_stride() const { return patch_embed_stride << (n_stages() - 1); }
  void validate() const;

  static EncoderConfig desk() { return {}; }
  static EncoderConfig tiny();   // small enough for single-core training runs
  static EncoderConfig paper();  // full-scale; shipped but not exercised in CI
};

// Residual conv + windowed self-attention + MLP, pre-norm.
class Block {
 public:
  Block(const std::string& name, int ch, int heads, int window, Rng& rng);
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy);
  void collect(nn::ParamRefs& out);

 private:
  nn::LayerNorm ln1_, ln2_, ln3_;
  nn::Conv3d conv_;
  nn::WindowAttention attn_;
  nn::Conv3d fc1_, fc2_;  // 1x1 channel-mixing convs
  nn::Gelu gelu_;
};

// Strided patch embedding followed by attention stages, each stage halving
// the grid. An optional patch-grid mask substitutes a learnable token for
// patch embeddings before any inter-token mixing.
class Encoder {
 public:
  Encoder(const EncoderConfig& cfg, Rng& rng, const std::string& prefix = "enc");

  // x: [B, C_in, P, P, P]; patch_mask (if given) has B * (P/stride)^3 entries.
  Tensor forward(const Tensor& x, const std::vector<uint8_t>* patch_mask = nullptr);

  // d_stages[s] is the gradient at stage s's output; empty tensors are
  // treated as zero. Returns the gradient at the input.
  Tensor backward(const std::vector<Tensor>& d_stages);
  Tensor backward(const Tensor& d_last);

  void collect(nn::ParamRefs& out);
  const std::vector<Tensor>& stage_outputs() const { return stage_out_; }
  const EncoderConfig& config() const { return cfg_; }
  nn::Param& mask_token() { return mask_token_; }

 private:
  EncoderConfig cfg_;
  nn::Conv3d patch_embed_;
  nn::Param mask_token_;
  std::vector<std::unique_ptr<nn::Conv3d>> down_;
  std::vector<std::vector<std::unique_ptr<Block>>> blocks_;
  std::vector<Tensor> stage_out_;
  std::vector<uint8_t> mask_cache_;
  bool masked_ = false;
};

// [B, C, d, h, w] -> [B, C] global average, and its adjoint.
Tensor pooled_mean(const Tensor& feat);
Tensor pooled_mean_backward(const Tensor& d_pooled, const std::vector<int64_t>& feat_shape);

// Two affine layers with a nonlinearity, output rows L2-normalized.
class ProjectionHead {
 public:
  ProjectionHead(int in_dim, int proj_dim, Rng& rng, const std::string& prefix = "proj");
  Tensor forward(const Tensor& pooled);  // [B, in] -> [B, proj], unit rows
  Tensor backward(const Tensor& dy);
  void collect(nn::ParamRefs& out);

 private:
  nn::Linear fc1_, fc2_;
  nn::Relu relu_;
  Tensor z_cache_, y_cache_, norm_cache_;
};

struct MaskPair {
  std::array<int64_t, 3> grid{0, 0, 0};
  int factor = 1;
  std::vector<uint8_t> bottleneck;  // B * grid volume
  std::vector<uint8_t> patch;       // B * (grid*factor) volume

  int64_t cells() const { return grid[0] * grid[1] * grid[2]; }
};

// Uniformly masks round(ratio * cells) bottleneck cells per batch item and
// nearest-neighbor upsamples the mask to the patch-token grid.
MaskPair make_bottleneck_mask(int64_t batch, std::array<int64_t, 3> grid, int factor,
                              double ratio, Rng& rng);

// k <- m*k + (1-m)*q, elementwise over shape-congruent parameter lists.
void momentum_update(const nn::ParamRefs& online, const nn::ParamRefs& momentum, double m);

double momentum_schedule(int64_t step, int64_t total_steps, double m_start = 0.996,
                         double m_end = 0.999, double ramp_fraction = 0.2);

// Lateral 1x1 fusions, top-down nearest x2 additions, smoothing convs,
// then upsampling the finest level to voxel resolution.
class FPNDecoder {
 public:
  FPNDecoder(const EncoderConfig& cfg, int fpn_dim, int out_channels, Rng& rng,
             const std::string& prefix = "fpn");
  Tensor forward(const std::vector<Tensor>& stage_feats);  // -> [B, out, P, P, P]
  std::vector<Tensor> backward(const Tensor& dy);          // per-stage input grads
  void collect(nn::ParamRefs& out);

 private:
  int n_;
  std::vector<std::unique_ptr<nn::Conv3d>> lateral_, smooth_;
  std::vector<std::unique_ptr<nn::UpsampleNearest>> up2_;
  nn::UpsampleTrilinear up_final_;
  nn::Conv3d out_conv_;
};

struct Checkpoint {
  int64_t version = 1;
  int64_t step = 0;
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
  const Tensor* find(const std::string& name) const;
};

void pack_params(const nn::ParamRefs& params, Checkpoint& ck);
// Loads by name; throws on a missing name or shape mismatch.
void unpack_params(const Checkpoint& ck, const nn::ParamRefs& params);

std::map<std::string, std::string> encoder_config_meta(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_meta(const std::map<std::string, std::string>& meta);

}  // namespace mcl3d::model
