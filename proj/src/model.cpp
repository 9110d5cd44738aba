#include "mcl3d/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>
#include <stdexcept>

namespace mcl3d::model {

void EncoderConfig::validate() const {
  if (stage_dims.empty() || stage_dims.size() != stage_depths.size())
    throw std::invalid_argument("EncoderConfig: stage_dims/stage_depths mismatch");
  if (patch_embed_stride < 1 || window_size < 1 || projection_dim < 1)
    throw std::invalid_argument("EncoderConfig: positive sizes required");
  for (int d : stage_dims)
    if (d < 1 || d % head_dim != 0)
      throw std::invalid_argument("EncoderConfig: stage dims must be multiples of head_dim");
  if (bottleneck_stride() % patch_embed_stride != 0)
    throw std::invalid_argument("EncoderConfig: stride chain inconsistent");
  if (96 % bottleneck_stride() != 0)
    throw std::invalid_argument("EncoderConfig: 96 must be divisible by the bottleneck stride");
}

EncoderConfig EncoderConfig::tiny() {
  EncoderConfig c;
  c.stage_dims = {16, 32, 64};
  c.stage_depths = {1, 1, 1};
  c.window_size = 4;
  c.projection_dim = 64;
  return c;
}

EncoderConfig EncoderConfig::paper() {
  EncoderConfig c;
  c.stage_dims = {64, 128, 256, 512};
  c.stage_depths = {2, 2, 6, 2};
  c.window_size = 3;
  return c;
}

Block::Block(const std::string& name, int ch, int heads, int window, Rng& rng)
    : ln1_(name + ".ln1", ch),
      ln2_(name + ".ln2", ch),
      ln3_(name + ".ln3", ch),
      conv_(name + ".conv", ch, ch, 3, 1, 1, rng),
      attn_(name + ".attn", ch, heads, window, rng),
      fc1_(name + ".fc1", ch, 2 * ch, 1, 1, 0, rng),
      fc2_(name + ".fc2", 2 * ch, ch, 1, 1, 0, rng) {}

Tensor Block::forward(const Tensor& x) {
  Tensor x1 = conv_.forward(ln1_.forward(x));
  for (int64_t i = 0; i < x1.numel(); ++i) x1[i] += x[i];
  Tensor x2 = attn_.forward(ln2_.forward(x1));
  for (int64_t i = 0; i < x2.numel(); ++i) x2[i] += x1[i];
  Tensor x3 = fc2_.forward(gelu_.forward(fc1_.forward(ln3_.forward(x2))));
  for (int64_t i = 0; i < x3.numel(); ++i) x3[i] += x2[i];
  return x3;
}

Tensor Block::backward(const Tensor& dy) {
  Tensor d2 = ln3_.backward(fc1_.backward(gelu_.backward(fc2_.backward(dy))));
  for (int64_t i = 0; i < d2.numel(); ++i) d2[i] += dy[i];
  Tensor d1 = ln2_.backward(attn_.backward(d2));
  for (int64_t i = 0; i < d1.numel(); ++i) d1[i] += d2[i];
  Tensor dx = ln1_.backward(conv_.backward(d1));
  for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += d1[i];
  return dx;
}

void Block::collect(nn::ParamRefs& out) {
  ln1_.collect(out);
  conv_.collect(out);
  ln2_.collect(out);
  attn_.collect(out);
  ln3_.collect(out);
  fc1_.collect(out);
  fc2_.collect(out);
}

Encoder::Encoder(const EncoderConfig& cfg, Rng& rng, const std::string& prefix)
    : cfg_(cfg),
      patch_embed_(prefix + ".patch_embed", cfg.in_channels, cfg.stage_dims.at(0),
                   cfg.patch_embed_stride, cfg.patch_embed_stride, 0, rng),
      mask_token_(prefix + ".mask_token", {cfg.stage_dims.at(0)}) {
  cfg_.validate();
  for (int64_t i = 0; i < mask_token_.value.numel(); ++i)
    mask_token_.value[i] = static_cast<float>(rng.normal() * 0.02);
  int S = cfg_.n_stages();
  for (int s = 0; s < S; ++s) {
    if (s > 0)
      down_.push_back(std::make_unique<nn::Conv3d>(
          prefix + ".down" + std::to_string(s), cfg_.stage_dims[static_cast<size_t>(s) - 1],
          cfg_.stage_dims[static_cast<size_t>(s)], 2, 2, 0, rng));
    blocks_.emplace_back();
    int heads = cfg_.stage_dims[static_cast<size_t>(s)] / cfg_.head_dim;
    for (int b = 0; b < cfg_.stage_depths[static_cast<size_t>(s)]; ++b)
      blocks_.back().push_back(std::make_unique<Block>(
          prefix + ".s" + std::to_string(s) + ".b" + std::to_string(b),
          cfg_.stage_dims[static_cast<size_t>(s)], heads, cfg_.window_size, rng));
  }
}

Tensor Encoder::forward(const Tensor& x, const std::vector<uint8_t>* patch_mask) {
  if (x.ndim() != 5 || x.dim(1) != cfg_.in_channels)
    throw std::invalid_argument("Encoder: expected [B, C_in, D, H, W]");
  for (int a = 2; a < 5; ++a)
    if (x.dim(a) % cfg_.bottleneck_stride() != 0)
      throw std::invalid_argument("Encoder: spatial extents must be divisible by " +
                                  std::to_string(cfg_.bottleneck_stride()));
  Tensor t = patch_embed_.forward(x);
  int64_t B = t.dim(0), C = t.dim(1);
  int64_t vox = t.dim(2) * t.dim(3) * t.dim(4);
  masked_ = patch_mask != nullptr;
  if (masked_) {
    if (static_cast<int64_t>(patch_mask->size()) != B * vox)
      throw std::invalid_argument("Encoder: patch mask size mismatch");
    mask_cache_ = *patch_mask;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t v = 0; v < vox; ++v)
        if (mask_cache_[static_cast<size_t>(b * vox + v)])
          for (int64_t c = 0; c < C; ++c)
            t[(b * C + c) * vox + v] = mask_token_.value[c];
  }
  stage_out_.clear();
  for (size_t s = 0; s < blocks_.size(); ++s) {
    if (s > 0) t = down_[s - 1]->forward(t);
    for (auto& blk : blocks_[s]) t = blk->forward(t);
    stage_out_.push_back(t);
  }
  return t;
}

Tensor Encoder::backward(const std::vector<Tensor>& d_stages) {
  if (d_stages.size() != blocks_.size())
    throw std::invalid_argument("Encoder: one gradient slot per stage expected");
  Tensor d;
  for (size_t si = blocks_.size(); si-- > 0;) {
    if (d.numel() == 0)
      d = d_stages[si];
    else if (d_stages[si].numel() != 0)
      for (int64_t i = 0; i < d.numel(); ++i) d[i] += d_stages[si][i];
    if (d.numel() == 0) throw std::invalid_argument("Encoder: missing top gradient");
    for (size_t b = blocks_[si].size(); b-- > 0;) d = blocks_[si][b]->backward(d);
    if (si > 0) d = down_[si - 1]->backward(d);
  }
  if (masked_) {
    int64_t B = d.dim(0), C = d.dim(1);
    int64_t vox = d.dim(2) * d.dim(3) * d.dim(4);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t v = 0; v < vox; ++v)
        if (mask_cache_[static_cast<size_t>(b * vox + v)])
          for (int64_t c = 0; c < C; ++c) {
            mask_token_.grad[c] += d[(b * C + c) * vox + v];
            d[(b * C + c) * vox + v] = 0.f;
          }
  }
  return patch_embed_.backward(d);
}

Tensor Encoder::backward(const Tensor& d_last) {
  std::vector<Tensor> ds(blocks_.size());
  ds.back() = d_last;
  return backward(ds);
}

void Encoder::collect(nn::ParamRefs& out) {
  patch_embed_.collect(out);
  out.push_back(&mask_token_);
  for (size_t s = 0; s < blocks_.size(); ++s) {
    if (s > 0) down_[s - 1]->collect(out);
    for (auto& blk : blocks_[s]) blk->collect(out);
  }
}

Tensor pooled_mean(const Tensor& feat) {
  int64_t B = feat.dim(0), C = feat.dim(1);
  int64_t vox = feat.numel() / (B * C);
  Tensor out({B, C});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      double s = 0;
      const float* p = feat.ptr() + (b * C + c) * vox;
      for (int64_t v = 0; v < vox; ++v) s += p[v];
      out[b * C + c] = static_cast<float>(s / static_cast<double>(vox));
    }
  return out;
}

Tensor pooled_mean_backward(const Tensor& d_pooled, const std::vector<int64_t>& feat_shape) {
  Tensor out(feat_shape);
  int64_t B = feat_shape[0], C = feat_shape[1];
  int64_t vox = out.numel() / (B * C);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      float g = d_pooled[b * C + c] / static_cast<float>(vox);
      float* p = out.ptr() + (b * C + c) * vox;
      for (int64_t v = 0; v < vox; ++v) p[v] = g;
    }
  return out;
}

ProjectionHead::ProjectionHead(int in_dim, int proj_dim, Rng& rng, const std::string& prefix)
    : fc1_(prefix + ".fc1", in_dim, in_dim, rng), fc2_(prefix + ".fc2", in_dim, proj_dim, rng) {}

Tensor ProjectionHead::forward(const Tensor& pooled) {
  Tensor z = fc2_.forward(relu_.forward(fc1_.forward(pooled)));
  int64_t B = z.dim(0), D = z.dim(1);
  z_cache_ = z;
  norm_cache_ = Tensor({B});
  Tensor y = z;
  for (int64_t b = 0; b < B; ++b) {
    double n2 = 0;
    for (int64_t d = 0; d < D; ++d) n2 += static_cast<double>(z[b * D + d]) * z[b * D + d];
    double n = std::sqrt(n2);
    if (n < 1e-12) throw std::runtime_error("ProjectionHead: zero pre-normalization vector");
    norm_cache_[b] = static_cast<float>(n);
    for (int64_t d = 0; d < D; ++d) y[b * D + d] = static_cast<float>(z[b * D + d] / n);
  }
  y_cache_ = y;
  return y;
}

Tensor ProjectionHead::backward(const Tensor& dy) {
  int64_t B = dy.dim(0), D = dy.dim(1);
  Tensor dz({B, D});
  for (int64_t b = 0; b < B; ++b) {
    double dot = 0;
    for (int64_t d = 0; d < D; ++d)
      dot += static_cast<double>(y_cache_[b * D + d]) * dy[b * D + d];
    for (int64_t d = 0; d < D; ++d)
      dz[b * D + d] = static_cast<float>(
          (dy[b * D + d] - y_cache_[b * D + d] * dot) / norm_cache_[b]);
  }
  return fc1_.backward(relu_.backward(fc2_.backward(dz)));
}

void ProjectionHead::collect(nn::ParamRefs& out) {
  fc1_.collect(out);
  fc2_.collect(out);
}

MaskPair make_bottleneck_mask(int64_t batch, std::array<int64_t, 3> grid, int factor,
                              double ratio, Rng& rng) {
  if (ratio < 0.0 || ratio > 1.0) throw std::invalid_argument("mask ratio must be in [0,1]");
  MaskPair mp;
  mp.grid = grid;
  mp.factor = factor;
  int64_t cells = mp.cells();
  int64_t count = static_cast<int64_t>(std::floor(ratio * static_cast<double>(cells) + 0.5));
  mp.bottleneck.assign(static_cast<size_t>(batch * cells), 0);
  std::vector<int64_t> idx(static_cast<size_t>(cells));
  for (int64_t b = 0; b < batch; ++b) {
    std::iota(idx.begin(), idx.end(), 0);
    for (int64_t i = 0; i < count; ++i) {
      int64_t j = i + rng.uniform_int(cells - i);
      std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
      mp.bottleneck[static_cast<size_t>(b * cells + idx[static_cast<size_t>(i)])] = 1;
    }
  }
  int64_t g0 = grid[0] * factor, g1 = grid[1] * factor, g2 = grid[2] * factor;
  mp.patch.assign(static_cast<size_t>(batch * g0 * g1 * g2), 0);
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t z = 0; z < g0; ++z)
      for (int64_t y = 0; y < g1; ++y)
        for (int64_t x = 0; x < g2; ++x)
          mp.patch[static_cast<size_t>(((b * g0 + z) * g1 + y) * g2 + x)] =
              mp.bottleneck[static_cast<size_t>(
                  ((b * grid[0] + z / factor) * grid[1] + y / factor) * grid[2] + x / factor)];
  return mp;
}

void momentum_update(const nn::ParamRefs& online, const nn::ParamRefs& momentum, double m) {
  if (m < 0.0 || m > 1.0) throw std::invalid_argument("momentum must be in [0,1]");
  if (online.size() != momentum.size())
    throw std::runtime_error("momentum_update: parameter trees differ in size");
  for (size_t i = 0; i < online.size(); ++i) {
    Tensor& k = momentum[i]->value;
    const Tensor& q = online[i]->value;
    if (!k.same_shape(q)) throw std::runtime_error("momentum_update: shape mismatch");
    for (int64_t j = 0; j < k.numel(); ++j)
      k[j] = static_cast<float>(m * k[j] + (1.0 - m) * q[j]);
  }
}

double momentum_schedule(int64_t step, int64_t total_steps, double m_start, double m_end,
                         double ramp_fraction) {
  if (total_steps <= 0) throw std::invalid_argument("momentum_schedule: total_steps > 0");
  if (step < 0 || step > total_steps)
    throw std::invalid_argument("momentum_schedule: step out of range");
  double ramp = ramp_fraction * static_cast<double>(total_steps);
  double f = ramp > 0 ? std::min(static_cast<double>(step) / ramp, 1.0) : 1.0;
  return m_start + (m_end - m_start) * f;
}

FPNDecoder::FPNDecoder(const EncoderConfig& cfg, int fpn_dim, int out_channels, Rng& rng,
                       const std::string& prefix)
    : n_(cfg.n_stages()),
      up_final_(cfg.patch_embed_stride),
      out_conv_(prefix + ".out", fpn_dim, out_channels, 1, 1, 0, rng) {
  for (int s = 0; s < n_; ++s) {
    lateral_.push_back(std::make_unique<nn::Conv3d>(prefix + ".lat" + std::to_string(s),
                                                    cfg.stage_dims[static_cast<size_t>(s)],
                                                    fpn_dim, 1, 1, 0, rng));
    smooth_.push_back(std::make_unique<nn::Conv3d>(prefix + ".smooth" + std::to_string(s),
                                                   fpn_dim, fpn_dim, 3, 1, 1, rng));
    if (s < n_ - 1) up2_.push_back(std::make_unique<nn::UpsampleNearest>(2));
  }
}

Tensor FPNDecoder::forward(const std::vector<Tensor>& stage_feats) {
  if (static_cast<int>(stage_feats.size()) != n_)
    throw std::invalid_argument("FPNDecoder: one feature map per stage expected");
  Tensor p = smooth_[static_cast<size_t>(n_ - 1)]->forward(
      lateral_[static_cast<size_t>(n_ - 1)]->forward(stage_feats[static_cast<size_t>(n_ - 1)]));
  for (int s = n_ - 2; s >= 0; --s) {
    Tensor lat = lateral_[static_cast<size_t>(s)]->forward(stage_feats[static_cast<size_t>(s)]);
    Tensor up = up2_[static_cast<size_t>(s)]->forward(p);
    if (!lat.same_shape(up)) throw std::invalid_argument("FPNDecoder: inconsistent pyramid");
    for (int64_t i = 0; i < lat.numel(); ++i) lat[i] += up[i];
    p = smooth_[static_cast<size_t>(s)]->forward(lat);
  }
  return out_conv_.forward(up_final_.forward(p));
}

std::vector<Tensor> FPNDecoder::backward(const Tensor& dy) {
  std::vector<Tensor> d_feats(static_cast<size_t>(n_));
  Tensor dp = up_final_.backward(out_conv_.backward(dy));
  for (int s = 0; s < n_ - 1; ++s) {
    Tensor dsum = smooth_[static_cast<size_t>(s)]->backward(dp);
    d_feats[static_cast<size_t>(s)] = lateral_[static_cast<size_t>(s)]->backward(dsum);
    dp = up2_[static_cast<size_t>(s)]->backward(dsum);
  }
  Tensor dtop = smooth_[static_cast<size_t>(n_ - 1)]->backward(dp);
  d_feats[static_cast<size_t>(n_ - 1)] = lateral_[static_cast<size_t>(n_ - 1)]->backward(dtop);
  return d_feats;
}

void FPNDecoder::collect(nn::ParamRefs& out) {
  for (int s = 0; s < n_; ++s) {
    lateral_[static_cast<size_t>(s)]->collect(out);
    smooth_[static_cast<size_t>(s)]->collect(out);
  }
  out_conv_.collect(out);
}

namespace {

constexpr char kCkptMagic[8] = {'M', 'C', 'L', '3', 'D', 'C', 'K', 'P'};

void put_str(FILE* f, const std::string& s) {
  uint64_t n = s.size();
  std::fwrite(&n, sizeof(n), 1, f);
  std::fwrite(s.data(), 1, s.size(), f);
}

std::string get_str(FILE* f) {
  uint64_t n = 0;
  if (std::fread(&n, sizeof(n), 1, f) != 1) throw std::runtime_error("checkpoint truncated");
  std::string s(n, '\0');
  if (n && std::fread(s.data(), 1, n, f) != n) throw std::runtime_error("checkpoint truncated");
  return s;
}

}  // namespace

void Checkpoint::save(const std::string& path) const {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  std::fwrite(kCkptMagic, 1, 8, f);
  std::fwrite(&version, sizeof(version), 1, f);
  std::fwrite(&step, sizeof(step), 1, f);
  uint64_t nm = meta.size();
  std::fwrite(&nm, sizeof(nm), 1, f);
  for (const auto& [k, v] : meta) {
    put_str(f, k);
    put_str(f, v);
  }
  uint64_t nt = tensors.size();
  std::fwrite(&nt, sizeof(nt), 1, f);
  for (const auto& [name, t] : tensors) {
    put_str(f, name);
    uint64_t nd = t.shape.size();
    std::fwrite(&nd, sizeof(nd), 1, f);
    std::fwrite(t.shape.data(), sizeof(int64_t), t.shape.size(), f);
    std::fwrite(t.ptr(), sizeof(float), static_cast<size_t>(t.numel()), f);
  }
  std::fclose(f);
}

Checkpoint Checkpoint::load(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open " + path);
  auto fail = [&](const std::string& msg) {
    std::fclose(f);
    throw std::runtime_error(path + ": " + msg);
  };
  char magic[8];
  if (std::fread(magic, 1, 8, f) != 8 || std::memcmp(magic, kCkptMagic, 8) != 0)
    fail("not a checkpoint file");
  Checkpoint ck;
  if (std::fread(&ck.version, sizeof(ck.version), 1, f) != 1) fail("truncated");
  if (ck.version != 1) fail("unsupported checkpoint format version");
  if (std::fread(&ck.step, sizeof(ck.step), 1, f) != 1) fail("truncated");
  try {
    uint64_t nm = 0;
    if (std::fread(&nm, sizeof(nm), 1, f) != 1) fail("truncated");
    for (uint64_t i = 0; i < nm; ++i) {
      std::string k = get_str(f);
      ck.meta[k] = get_str(f);
    }
    uint64_t nt = 0;
    if (std::fread(&nt, sizeof(nt), 1, f) != 1) fail("truncated");
    for (uint64_t i = 0; i < nt; ++i) {
      std::string name = get_str(f);
      uint64_t nd = 0;
      if (std::fread(&nd, sizeof(nd), 1, f) != 1) fail("truncated");
      std::vector<int64_t> shape(nd);
      if (std::fread(shape.data(), sizeof(int64_t), nd, f) != nd) fail("truncated");
      Tensor t(shape);
      size_t n = static_cast<size_t>(t.numel());
      if (std::fread(t.ptr(), sizeof(float), n, f) != n) fail("truncated");
      ck.tensors.emplace_back(std::move(name), std::move(t));
    }
  } catch (...) {
    std::fclose(f);
    throw;
  }
  std::fclose(f);
  return ck;
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

void pack_params(const nn::ParamRefs& params, Checkpoint& ck) {
  for (const auto* p : params) ck.tensors.emplace_back(p->name, p->value);
}

void unpack_params(const Checkpoint& ck, const nn::ParamRefs& params) {
  for (auto* p : params) {
    const Tensor* t = ck.find(p->name);
    if (!t) throw std::runtime_error("checkpoint is missing tensor '" + p->name + "'");
    if (!t->same_shape(p->value))
      throw std::runtime_error("checkpoint tensor '" + p->name + "' has wrong shape");
    p->value = *t;
  }
}

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  size_t pos = 0;
  while (pos < s.size()) {
    size_t c = s.find(',', pos);
    if (c == std::string::npos) c = s.size();
    out.push_back(std::stoi(s.substr(pos, c - pos)));
    pos = c + 1;
  }
  return out;
}

}  // namespace

std::map<std::string, std::string> encoder_config_meta(const EncoderConfig& cfg) {
  return {{"encoder.in_channels", std::to_string(cfg.in_channels)},
          {"encoder.patch_embed_stride", std::to_string(cfg.patch_embed_stride)},
          {"encoder.stage_dims", join_ints(cfg.stage_dims)},
          {"encoder.stage_depths", join_ints(cfg.stage_depths)},
          {"encoder.window_size", std::to_string(cfg.window_size)},
          {"encoder.projection_dim", std::to_string(cfg.projection_dim)},
          {"encoder.head_dim", std::to_string(cfg.head_dim)}};
}

EncoderConfig encoder_config_from_meta(const std::map<std::string, std::string>& meta) {
  EncoderConfig c;
  auto need = [&](const std::string& k) -> const std::string& {
    auto it = meta.find(k);
    if (it == meta.end()) throw std::runtime_error("checkpoint meta is missing '" + k + "'");
    return it->second;
  };
  c.in_channels = std::stoi(need("encoder.in_channels"));
  c.patch_embed_stride = std::stoi(need("encoder.patch_embed_stride"));
  c.stage_dims = split_ints(need("encoder.stage_dims"));
  c.stage_depths = split_ints(need("encoder.stage_depths"));
  c.window_size = std::stoi(need("encoder.window_size"));
  c.projection_dim = std::stoi(need("encoder.projection_dim"));
  c.head_dim = std::stoi(need("encoder.head_dim"));
  c.validate();
  return c;
}

}  // namespace mcl3d::model
