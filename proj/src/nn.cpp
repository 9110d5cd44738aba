#include "mcl3d/nn.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstring>

namespace mcl3d::nn {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<Mat>;
using CMapMat = Eigen::Map<const Mat>;

double grad_l2_norm(const ParamRefs& ps) {
  double s = 0;
  for (auto* p : ps)
    for (float g : p->grad.data) s += static_cast<double>(g) * g;
  return std::sqrt(s);
}

void init_uniform_fan_in(Tensor& w, int64_t fan_in, Rng& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : w.data) v = static_cast<float>(rng.uniform(-bound, bound));
}

// ---------------------------------------------------------------- Conv3d

Conv3d::Conv3d(std::string name, int in_ch, int out_ch, int kernel, int stride, int pad, Rng& rng)
    : weight(name + ".weight", {out_ch, static_cast<int64_t>(in_ch) * kernel * kernel * kernel}),
      bias(name + ".bias", {out_ch}),
      in_ch_(in_ch),
      out_ch_(out_ch),
      k_(kernel),
      stride_(stride),
      pad_(pad) {
  init_uniform_fan_in(weight.value, static_cast<int64_t>(in_ch) * kernel * kernel * kernel, rng);
  init_uniform_fan_in(bias.value, static_cast<int64_t>(in_ch) * kernel * kernel * kernel, rng);
}

void Conv3d::collect(ParamRefs& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

namespace {

struct ConvDims {
  int64_t D, H, W, oD, oH, oW, L;
};

ConvDims conv_dims(const Tensor& x, int k, int s, int p) {
  ConvDims d;
  d.D = x.dim(2);
  d.H = x.dim(3);
  d.W = x.dim(4);
  d.oD = (d.D + 2 * p - k) / s + 1;
  d.oH = (d.H + 2 * p - k) / s + 1;
  d.oW = (d.W + 2 * p - k) / s + 1;
  d.L = d.oD * d.oH * d.oW;
  return d;
}

void im2col(const float* x, int C, const ConvDims& d, int k, int s, int p, float* col) {
  // col: [C*k^3, L]
  for (int c = 0; c < C; ++c) {
    const float* xc = x + static_cast<int64_t>(c) * d.D * d.H * d.W;
    for (int kd = 0; kd < k; ++kd)
      for (int kh = 0; kh < k; ++kh)
        for (int kw = 0; kw < k; ++kw) {
          float* row = col + (((static_cast<int64_t>(c) * k + kd) * k + kh) * k + kw) * d.L;
          int64_t i = 0;
          for (int64_t od = 0; od < d.oD; ++od) {
            int64_t id = od * s - p + kd;
            bool dok = id >= 0 && id < d.D;
            for (int64_t oh = 0; oh < d.oH; ++oh) {
              int64_t ih = oh * s - p + kh;
              bool hok = ih >= 0 && ih < d.H;
              if (!dok || !hok) {
                for (int64_t ow = 0; ow < d.oW; ++ow) row[i++] = 0.f;
                continue;
              }
              const float* base = xc + (id * d.H + ih) * d.W;
              for (int64_t ow = 0; ow < d.oW; ++ow) {
                int64_t iw = ow * s - p + kw;
                row[i++] = (iw >= 0 && iw < d.W) ? base[iw] : 0.f;
              }
            }
          }
        }
  }
}

void col2im_add(const float* col, int C, const ConvDims& d, int k, int s, int p, float* x) {
  for (int c = 0; c < C; ++c) {
    float* xc = x + static_cast<int64_t>(c) * d.D * d.H * d.W;
    for (int kd = 0; kd < k; ++kd)
      for (int kh = 0; kh < k; ++kh)
        for (int kw = 0; kw < k; ++kw) {
          const float* row = col + (((static_cast<int64_t>(c) * k + kd) * k + kh) * k + kw) * d.L;
          int64_t i = 0;
          for (int64_t od = 0; od < d.oD; ++od) {
            int64_t id = od * s - p + kd;
            if (id < 0 || id >= d.D) {
              i += d.oH * d.oW;
              continue;
            }
            for (int64_t oh = 0; oh < d.oH; ++oh) {
              int64_t ih = oh * s - p + kh;
              if (ih < 0 || ih >= d.H) {
                i += d.oW;
                continue;
              }
              float* base = xc + (id * d.H + ih) * d.W;
              for (int64_t ow = 0; ow < d.oW; ++ow) {
                int64_t iw = ow * s - p + kw;
                if (iw >= 0 && iw < d.W) base[iw] += row[i];
                ++i;
              }
            }
          }
        }
  }
}

}  // namespace

Tensor Conv3d::forward(const Tensor& x) {
  if (x.ndim() != 5 || x.dim(1) != in_ch_)
    throw std::invalid_argument("Conv3d: expected [N," + std::to_string(in_ch_) + ",D,H,W], got " +
                                x.shape_str());
  x_cache_ = x;
  auto d = conv_dims(x, k_, stride_, pad_);
  int64_t N = x.dim(0);
  int64_t K = static_cast<int64_t>(in_ch_) * k_ * k_ * k_;
  Tensor y({N, out_ch_, d.oD, d.oH, d.oW});
  std::vector<float> col(static_cast<size_t>(K * d.L));
  CMapMat W(weight.value.ptr(), out_ch_, K);
  for (int64_t n = 0; n < N; ++n) {
    im2col(x.ptr() + n * in_ch_ * d.D * d.H * d.W, in_ch_, d, k_, stride_, pad_, col.data());
    MapMat Y(y.ptr() + n * out_ch_ * d.L, out_ch_, d.L);
    CMapMat Col(col.data(), K, d.L);
    Y.noalias() = W * Col;
    for (int c = 0; c < out_ch_; ++c) Y.row(c).array() += bias.value[c];
  }
  return y;
}

Tensor Conv3d::backward(const Tensor& dy) {
  const Tensor& x = x_cache_;
  auto d = conv_dims(x, k_, stride_, pad_);
  int64_t N = x.dim(0);
  int64_t K = static_cast<int64_t>(in_ch_) * k_ * k_ * k_;
  Tensor dx(x.shape);
  std::vector<float> col(static_cast<size_t>(K * d.L));
  std::vector<float> dcol(static_cast<size_t>(K * d.L));
  CMapMat W(weight.value.ptr(), out_ch_, K);
  MapMat dW(weight.grad.ptr(), out_ch_, K);
  for (int64_t n = 0; n < N; ++n) {
    im2col(x.ptr() + n * in_ch_ * d.D * d.H * d.W, in_ch_, d, k_, stride_, pad_, col.data());
    CMapMat dY(dy.ptr() + n * out_ch_ * d.L, out_ch_, d.L);
    CMapMat Col(col.data(), K, d.L);
    dW.noalias() += dY * Col.transpose();
    for (int c = 0; c < out_ch_; ++c) bias.grad[c] += dY.row(c).sum();
    MapMat dCol(dcol.data(), K, d.L);
    dCol.noalias() = W.transpose() * dY;
    col2im_add(dcol.data(), in_ch_, d, k_, stride_, pad_,
               dx.ptr() + n * in_ch_ * d.D * d.H * d.W);
  }
  return dx;
}

// ---------------------------------------------------------------- Linear

Linear::Linear(std::string name, int in_dim, int out_dim, Rng& rng)
    : weight(name + ".weight", {out_dim, in_dim}),
      bias(name + ".bias", {out_dim}),
      in_(in_dim),
      out_(out_dim) {
  init_uniform_fan_in(weight.value, in_dim, rng);
  init_uniform_fan_in(bias.value, in_dim, rng);
}

void Linear::collect(ParamRefs& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

Tensor Linear::forward(const Tensor& x) {
  if (x.shape.empty() || x.shape.back() != in_)
    throw std::invalid_argument("Linear: last dim mismatch " + x.shape_str());
  x_cache_ = x;
  int64_t M = x.numel() / in_;
  auto out_shape = x.shape;
  out_shape.back() = out_;
  Tensor y(out_shape);
  CMapMat X(x.ptr(), M, in_);
  CMapMat W(weight.value.ptr(), out_, in_);
  MapMat Y(y.ptr(), M, out_);
  Y.noalias() = X * W.transpose();
  for (int64_t i = 0; i < M; ++i)
    for (int j = 0; j < out_; ++j) Y(i, j) += bias.value[j];
  return y;
}

Tensor Linear::backward(const Tensor& dy) {
  const Tensor& x = x_cache_;
  int64_t M = x.numel() / in_;
  Tensor dx(x.shape);
  CMapMat X(x.ptr(), M, in_);
  CMapMat dY(dy.ptr(), M, out_);
  CMapMat W(weight.value.ptr(), out_, in_);
  MapMat dW(weight.grad.ptr(), out_, in_);
  MapMat dX(dx.ptr(), M, in_);
  dW.noalias() += dY.transpose() * X;
  for (int j = 0; j < out_; ++j) bias.grad[j] += dY.col(j).sum();
  dX.noalias() = dY * W;
  return dx;
}

// -------------------------------------------------------------- LayerNorm

LayerNorm::LayerNorm(std::string name, int ch)
    : gamma(name + ".gamma", {ch}), beta(name + ".beta", {ch}), ch_(ch) {
  std::fill(gamma.value.data.begin(), gamma.value.data.end(), 1.f);
}

void LayerNorm::collect(ParamRefs& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

Tensor LayerNorm::forward(const Tensor& x) {
  if (x.ndim() != 5 || x.dim(1) != ch_) throw std::invalid_argument("LayerNorm: bad shape");
  x_cache_ = x;
  int64_t N = x.dim(0), V = x.dim(2) * x.dim(3) * x.dim(4);
  mu_ = Tensor({N, V});
  rstd_ = Tensor({N, V});
  Tensor y(x.shape);
  const float eps = 1e-5f;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t v = 0; v < V; ++v) {
      double m = 0;
      for (int c = 0; c < ch_; ++c) m += x[(n * ch_ + c) * V + v];
      m /= ch_;
      double var = 0;
      for (int c = 0; c < ch_; ++c) {
        double d = x[(n * ch_ + c) * V + v] - m;
        var += d * d;
      }
      var /= ch_;
      float rs = static_cast<float>(1.0 / std::sqrt(var + eps));
      mu_[n * V + v] = static_cast<float>(m);
      rstd_[n * V + v] = rs;
      for (int c = 0; c < ch_; ++c) {
        float xh = (x[(n * ch_ + c) * V + v] - static_cast<float>(m)) * rs;
        y[(n * ch_ + c) * V + v] = xh * gamma.value[c] + beta.value[c];
      }
    }
  return y;
}

Tensor LayerNorm::backward(const Tensor& dy) {
  const Tensor& x = x_cache_;
  int64_t N = x.dim(0), V = x.dim(2) * x.dim(3) * x.dim(4);
  Tensor dx(x.shape);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t v = 0; v < V; ++v) {
      float m = mu_[n * V + v], rs = rstd_[n * V + v];
      double s1 = 0, s2 = 0;
      for (int c = 0; c < ch_; ++c) {
        float xh = (x[(n * ch_ + c) * V + v] - m) * rs;
        float g = dy[(n * ch_ + c) * V + v] * gamma.value[c];
        s1 += g;
        s2 += g * xh;
        gamma.grad[c] += dy[(n * ch_ + c) * V + v] * xh;
        beta.grad[c] += dy[(n * ch_ + c) * V + v];
      }
      s1 /= ch_;
      s2 /= ch_;
      for (int c = 0; c < ch_; ++c) {
        float xh = (x[(n * ch_ + c) * V + v] - m) * rs;
        float g = dy[(n * ch_ + c) * V + v] * gamma.value[c];
        dx[(n * ch_ + c) * V + v] =
            rs * static_cast<float>(g - s1 - xh * s2);
      }
    }
  return dx;
}

// ------------------------------------------------------------ activations

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)

inline float gelu_f(float x) {
  float t = std::tanh(kGeluC * (x + 0.044715f * x * x * x));
  return 0.5f * x * (1.f + t);
}

inline float gelu_df(float x) {
  float u = kGeluC * (x + 0.044715f * x * x * x);
  float t = std::tanh(u);
  float du = kGeluC * (1.f + 3.f * 0.044715f * x * x);
  return 0.5f * (1.f + t) + 0.5f * x * (1.f - t * t) * du;
}
}  // namespace

Tensor Gelu::forward(const Tensor& x) {
  x_cache_ = x;
  Tensor y(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) y[i] = gelu_f(x[i]);
  return y;
}

Tensor Gelu::backward(const Tensor& dy) {
  Tensor dx(x_cache_.shape);
  for (int64_t i = 0; i < dx.numel(); ++i) dx[i] = dy[i] * gelu_df(x_cache_[i]);
  return dx;
}

Tensor Relu::forward(const Tensor& x) {
  x_cache_ = x;
  Tensor y(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] > 0.f ? x[i] : 0.f;
  return y;
}

Tensor Relu::backward(const Tensor& dy) {
  Tensor dx(x_cache_.shape);
  for (int64_t i = 0; i < dx.numel(); ++i) dx[i] = x_cache_[i] > 0.f ? dy[i] : 0.f;
  return dx;
}

// ------------------------------------------------------------- upsampling

Tensor UpsampleNearest::forward(const Tensor& x) {
  in_shape_ = x.shape;
  int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  Tensor y({N, C, D * f_, H * f_, W * f_});
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const float* xs = x.ptr() + nc * D * H * W;
    float* ys = y.ptr() + nc * D * H * W * f_ * f_ * f_;
    int64_t i = 0;
    for (int64_t d = 0; d < D * f_; ++d)
      for (int64_t h = 0; h < H * f_; ++h)
        for (int64_t w = 0; w < W * f_; ++w)
          ys[i++] = xs[((d / f_) * H + h / f_) * W + w / f_];
  }
  return y;
}

Tensor UpsampleNearest::backward(const Tensor& dy) {
  Tensor dx(in_shape_);
  int64_t N = in_shape_[0], C = in_shape_[1], D = in_shape_[2], H = in_shape_[3], W = in_shape_[4];
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const float* dys = dy.ptr() + nc * D * H * W * f_ * f_ * f_;
    float* dxs = dx.ptr() + nc * D * H * W;
    int64_t i = 0;
    for (int64_t d = 0; d < D * f_; ++d)
      for (int64_t h = 0; h < H * f_; ++h)
        for (int64_t w = 0; w < W * f_; ++w)
          dxs[((d / f_) * H + h / f_) * W + w / f_] += dys[i++];
  }
  return dx;
}

namespace {
struct LinW {
  int64_t i0, i1;
  float w0, w1;
};

inline LinW lin_weights(int64_t o, int f, int64_t n_in) {
  double src = (static_cast<double>(o) + 0.5) / f - 0.5;
  double fl = std::floor(src);
  LinW r;
  r.i0 = static_cast<int64_t>(fl);
  r.i1 = r.i0 + 1;
  r.w1 = static_cast<float>(src - fl);
  r.w0 = 1.f - r.w1;
  if (r.i0 < 0) r.i0 = 0;
  if (r.i1 > n_in - 1) r.i1 = n_in - 1;
  return r;
}
}  // namespace

Tensor UpsampleTrilinear::forward(const Tensor& x) {
  in_shape_ = x.shape;
  int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  Tensor y({N, C, D * f_, H * f_, W * f_});
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const float* xs = x.ptr() + nc * D * H * W;
    float* ys = y.ptr() + nc * D * H * W * f_ * f_ * f_;
    int64_t i = 0;
    for (int64_t d = 0; d < D * f_; ++d) {
      LinW a = lin_weights(d, f_, D);
      for (int64_t h = 0; h < H * f_; ++h) {
        LinW b = lin_weights(h, f_, H);
        for (int64_t w = 0; w < W * f_; ++w) {
          LinW c = lin_weights(w, f_, W);
          float v = 0;
          v += a.w0 * b.w0 * c.w0 * xs[(a.i0 * H + b.i0) * W + c.i0];
          v += a.w0 * b.w0 * c.w1 * xs[(a.i0 * H + b.i0) * W + c.i1];
          v += a.w0 * b.w1 * c.w0 * xs[(a.i0 * H + b.i1) * W + c.i0];
          v += a.w0 * b.w1 * c.w1 * xs[(a.i0 * H + b.i1) * W + c.i1];
          v += a.w1 * b.w0 * c.w0 * xs[(a.i1 * H + b.i0) * W + c.i0];
          v += a.w1 * b.w0 * c.w1 * xs[(a.i1 * H + b.i0) * W + c.i1];
          v += a.w1 * b.w1 * c.w0 * xs[(a.i1 * H + b.i1) * W + c.i0];
          v += a.w1 * b.w1 * c.w1 * xs[(a.i1 * H + b.i1) * W + c.i1];
          ys[i++] = v;
        }
      }
    }
  }
  return y;
}

Tensor UpsampleTrilinear::backward(const Tensor& dy) {
  Tensor dx(in_shape_);
  int64_t N = in_shape_[0], C = in_shape_[1], D = in_shape_[2], H = in_shape_[3], W = in_shape_[4];
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const float* dys = dy.ptr() + nc * D * H * W * f_ * f_ * f_;
    float* dxs = dx.ptr() + nc * D * H * W;
    int64_t i = 0;
    for (int64_t d = 0; d < D * f_; ++d) {
      LinW a = lin_weights(d, f_, D);
      for (int64_t h = 0; h < H * f_; ++h) {
        LinW b = lin_weights(h, f_, H);
        for (int64_t w = 0; w < W * f_; ++w) {
          LinW c = lin_weights(w, f_, W);
          float g = dys[i++];
          dxs[(a.i0 * H + b.i0) * W + c.i0] += a.w0 * b.w0 * c.w0 * g;
          dxs[(a.i0 * H + b.i0) * W + c.i1] += a.w0 * b.w0 * c.w1 * g;
          dxs[(a.i0 * H + b.i1) * W + c.i0] += a.w0 * b.w1 * c.w0 * g;
          dxs[(a.i0 * H + b.i1) * W + c.i1] += a.w0 * b.w1 * c.w1 * g;
          dxs[(a.i1 * H + b.i0) * W + c.i0] += a.w1 * b.w0 * c.w0 * g;
          dxs[(a.i1 * H + b.i0) * W + c.i1] += a.w1 * b.w0 * c.w1 * g;
          dxs[(a.i1 * H + b.i1) * W + c.i0] += a.w1 * b.w1 * c.w0 * g;
          dxs[(a.i1 * H + b.i1) * W + c.i1] += a.w1 * b.w1 * c.w1 * g;
        }
      }
    }
  }
  return dx;
}

// -------------------------------------------------------- WindowAttention

struct WindowAttention::WinCache {
  int64_t n;
  std::vector<int64_t> idx;  // flat voxel indices of the window's tokens
  Mat X, QKV, A;             // [T,C], [T,3C], [T,C]
  std::vector<Mat> P;        // per head, [T,T]
};

WindowAttention::~WindowAttention() = default;

WindowAttention::WindowAttention(std::string name, int ch, int heads, int window, Rng& rng)
    : w_qkv(name + ".w_qkv", {3 * ch, ch}),
      b_qkv(name + ".b_qkv", {3 * ch}),
      w_out(name + ".w_out", {ch, ch}),
      b_out(name + ".b_out", {ch}),
      ch_(ch),
      heads_(heads),
      window_(window) {
  if (ch % heads != 0) throw std::invalid_argument("WindowAttention: ch % heads != 0");
  init_uniform_fan_in(w_qkv.value, ch, rng);
  init_uniform_fan_in(b_qkv.value, ch, rng);
  init_uniform_fan_in(w_out.value, ch, rng);
  init_uniform_fan_in(b_out.value, ch, rng);
}

void WindowAttention::collect(ParamRefs& out) {
  out.push_back(&w_qkv);
  out.push_back(&b_qkv);
  out.push_back(&w_out);
  out.push_back(&b_out);
}

Tensor WindowAttention::forward(const Tensor& x) {
  if (x.ndim() != 5 || x.dim(1) != ch_) throw std::invalid_argument("WindowAttention: bad shape");
  x_cache_ = x;
  in_shape_ = x.shape;
  int64_t N = x.dim(0), D = x.dim(2), H = x.dim(3), W = x.dim(4), V = D * H * W;
  int dh = ch_ / heads_;
  float scale = 1.f / std::sqrt(static_cast<float>(dh));
  auto starts = [&](int64_t n) {
    std::vector<int64_t> s;
    for (int64_t i = 0; i < n; i += window_) s.push_back(i);
    return s;
  };
  auto sd = starts(D), sh = starts(H), sw = starts(W);
  wins_.clear();
  Tensor y(x.shape);
  CMapMat Wqkv(w_qkv.value.ptr(), 3 * ch_, ch_);
  CMapMat Wo(w_out.value.ptr(), ch_, ch_);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t d0 : sd)
      for (int64_t h0 : sh)
        for (int64_t w0 : sw) {
          WinCache wc;
          wc.n = n;
          int64_t d1 = std::min<int64_t>(d0 + window_, D);
          int64_t h1 = std::min<int64_t>(h0 + window_, H);
          int64_t w1 = std::min<int64_t>(w0 + window_, W);
          for (int64_t d = d0; d < d1; ++d)
            for (int64_t h = h0; h < h1; ++h)
              for (int64_t w = w0; w < w1; ++w) wc.idx.push_back((d * H + h) * W + w);
          int64_t T = static_cast<int64_t>(wc.idx.size());
          wc.X.resize(T, ch_);
          for (int64_t t = 0; t < T; ++t)
            for (int c = 0; c < ch_; ++c)
              wc.X(t, c) = x[(n * ch_ + c) * V + wc.idx[static_cast<size_t>(t)]];
          wc.QKV.noalias() = wc.X * Wqkv.transpose();
          for (int64_t t = 0; t < T; ++t)
            for (int c = 0; c < 3 * ch_; ++c) wc.QKV(t, c) += b_qkv.value[c];
          wc.A.resize(T, ch_);
          wc.P.resize(static_cast<size_t>(heads_));
          for (int hh = 0; hh < heads_; ++hh) {
            auto Q = wc.QKV.block(0, hh * dh, T, dh);
            auto K = wc.QKV.block(0, ch_ + hh * dh, T, dh);
            auto Vb = wc.QKV.block(0, 2 * ch_ + hh * dh, T, dh);
            Mat S = (Q * K.transpose()) * scale;
            for (int64_t t = 0; t < T; ++t) {
              float mx = S.row(t).maxCoeff();
              S.row(t) = (S.row(t).array() - mx).exp();
              S.row(t) /= S.row(t).sum();
            }
            wc.P[static_cast<size_t>(hh)] = S;
            wc.A.block(0, hh * dh, T, dh).noalias() = S * Vb;
          }
          Mat Y = wc.A * Wo.transpose();
          for (int64_t t = 0; t < T; ++t)
            for (int c = 0; c < ch_; ++c)
              y[(n * ch_ + c) * V + wc.idx[static_cast<size_t>(t)]] = Y(t, c) + b_out.value[c];
          wins_.push_back(std::move(wc));
        }
  return y;
}

Tensor WindowAttention::backward(const Tensor& dy) {
  int64_t V = in_shape_[2] * in_shape_[3] * in_shape_[4];
  int dh = ch_ / heads_;
  float scale = 1.f / std::sqrt(static_cast<float>(dh));
  Tensor dx(in_shape_);
  CMapMat Wqkv(w_qkv.value.ptr(), 3 * ch_, ch_);
  CMapMat Wo(w_out.value.ptr(), ch_, ch_);
  MapMat dWqkv(w_qkv.grad.ptr(), 3 * ch_, ch_);
  MapMat dWo(w_out.grad.ptr(), ch_, ch_);
  for (auto& wc : wins_) {
    int64_t T = static_cast<int64_t>(wc.idx.size());
    Mat dY(T, ch_);
    for (int64_t t = 0; t < T; ++t)
      for (int c = 0; c < ch_; ++c)
        dY(t, c) = dy[(wc.n * ch_ + c) * V + wc.idx[static_cast<size_t>(t)]];
    dWo.noalias() += dY.transpose() * wc.A;
    for (int c = 0; c < ch_; ++c) b_out.grad[c] += dY.col(c).sum();
    Mat dA = dY * Wo;
    Mat dQKV = Mat::Zero(T, 3 * ch_);
    for (int hh = 0; hh < heads_; ++hh) {
      auto Q = wc.QKV.block(0, hh * dh, T, dh);
      auto K = wc.QKV.block(0, ch_ + hh * dh, T, dh);
      auto Vb = wc.QKV.block(0, 2 * ch_ + hh * dh, T, dh);
      const Mat& P = wc.P[static_cast<size_t>(hh)];
      Mat dO = dA.block(0, hh * dh, T, dh);
      dQKV.block(0, 2 * ch_ + hh * dh, T, dh).noalias() = P.transpose() * dO;
      Mat dP = dO * Vb.transpose();
      Mat dS(T, T);
      for (int64_t t = 0; t < T; ++t) {
        float row_dot = dP.row(t).cwiseProduct(P.row(t)).sum();
        for (int64_t u = 0; u < T; ++u) dS(t, u) = P(t, u) * (dP(t, u) - row_dot);
      }
      dQKV.block(0, hh * dh, T, dh).noalias() = (dS * K) * scale;
      dQKV.block(0, ch_ + hh * dh, T, dh).noalias() = (dS.transpose() * Q) * scale;
    }
    dWqkv.noalias() += dQKV.transpose() * wc.X;
    for (int c = 0; c < 3 * ch_; ++c) b_qkv.grad[c] += dQKV.col(c).sum();
    Mat dX = dQKV * Wqkv;
    for (int64_t t = 0; t < T; ++t)
      for (int c = 0; c < ch_; ++c)
        dx[(wc.n * ch_ + c) * V + wc.idx[static_cast<size_t>(t)]] += dX(t, c);
  }
  return dx;
}

// ------------------------------------------------------------------ AdamW

AdamW::AdamW(ParamRefs params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (auto* p : params_) {
    m_.emplace_back(p->value.shape);
    v_.emplace_back(p->value.shape);
  }
}

void AdamW::step() { step({}); }

void AdamW::step(const std::vector<const Param*>& frozen) {
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Param* p = params_[i];
    bool skip = false;
    for (auto* f : frozen)
      if (f == p) {
        skip = true;
        break;
      }
    if (skip) continue;
    for (int64_t j = 0; j < p->value.numel(); ++j) {
      double g = p->grad[j];
      double m = cfg_.beta1 * m_[i][j] + (1 - cfg_.beta1) * g;
      double v = cfg_.beta2 * v_[i][j] + (1 - cfg_.beta2) * g * g;
      m_[i][j] = static_cast<float>(m);
      v_[i][j] = static_cast<float>(v);
      double mh = m / bc1, vh = v / bc2;
      double upd = mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * p->value[j];
      p->value[j] = static_cast<float>(p->value[j] - cfg_.lr * upd);
    }
  }
}

}  // namespace mcl3d::nn
