#include "mcl3d/preproc.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace mcl3d::preproc {

namespace {

float trilinear_at(const Tensor& t, double z, double y, double x) {
  int64_t n0 = t.dim(0), n1 = t.dim(1), n2 = t.dim(2);
  auto clamp = [](int64_t i, int64_t n) { return std::max<int64_t>(0, std::min(i, n - 1)); };
  int64_t z0 = static_cast<int64_t>(std::floor(z)), y0 = static_cast<int64_t>(std::floor(y)),
          x0 = static_cast<int64_t>(std::floor(x));
  double fz = z - z0, fy = y - y0, fx = x - x0;
  int64_t z1 = clamp(z0 + 1, n0), y1 = clamp(y0 + 1, n1), x1 = clamp(x0 + 1, n2);
  z0 = clamp(z0, n0);
  y0 = clamp(y0, n1);
  x0 = clamp(x0, n2);
  auto at = [&](int64_t a, int64_t b, int64_t c) { return t[(a * n1 + b) * n2 + c]; };
  double c00 = at(z0, y0, x0) * (1 - fx) + at(z0, y0, x1) * fx;
  double c01 = at(z0, y1, x0) * (1 - fx) + at(z0, y1, x1) * fx;
  double c10 = at(z1, y0, x0) * (1 - fx) + at(z1, y0, x1) * fx;
  double c11 = at(z1, y1, x0) * (1 - fx) + at(z1, y1, x1) * fx;
  double c0 = c00 * (1 - fy) + c01 * fy;
  double c1 = c10 * (1 - fy) + c11 * fy;
  return static_cast<float>(c0 * (1 - fz) + c1 * fz);
}

float nearest_at(const Tensor& t, double z, double y, double x) {
  auto idx = [](double v, int64_t n) {
    int64_t i = static_cast<int64_t>(std::llround(v));
    return std::max<int64_t>(0, std::min(i, n - 1));
  };
  return t[(idx(z, t.dim(0)) * t.dim(1) + idx(y, t.dim(1))) * t.dim(2) + idx(x, t.dim(2))];
}

}  // namespace

Volume resample_isotropic(const Volume& v, double target_mm) {
  if (!(target_mm > 0)) throw std::invalid_argument("resample_isotropic: target_mm must be > 0");
  v.validate();
  bool identity = true;
  for (double s : v.spacing) identity = identity && s == target_mm;
  if (identity) return v;

  int64_t out_dim[3];
  double ratio[3];  // output index -> input index scale
  for (int a = 0; a < 3; ++a) {
    out_dim[a] = std::max<int64_t>(
        1, static_cast<int64_t>(std::llround(v.dim(a) * v.spacing[static_cast<size_t>(a)] / target_mm)));
    ratio[a] = target_mm / v.spacing[static_cast<size_t>(a)];
  }
  Volume out = v;
  out.spacing = {target_mm, target_mm, target_mm};
  out.data = Tensor({out_dim[0], out_dim[1], out_dim[2]});
  if (v.brain_mask) out.brain_mask = Tensor({out_dim[0], out_dim[1], out_dim[2]});
  int64_t i = 0;
  for (int64_t z = 0; z < out_dim[0]; ++z) {
    double sz = (z + 0.5) * ratio[0] - 0.5;
    for (int64_t y = 0; y < out_dim[1]; ++y) {
      double sy = (y + 0.5) * ratio[1] - 0.5;
      for (int64_t x = 0; x < out_dim[2]; ++x, ++i) {
        double sx = (x + 0.5) * ratio[2] - 0.5;
        out.data[i] = trilinear_at(v.data, sz, sy, sx);
        if (v.brain_mask) (*out.brain_mask)[i] = nearest_at(*v.brain_mask, sz, sy, sx);
      }
    }
  }
  return out;
}

Volume reorient_ras(const Volume& v) {
  v.validate();
  if (v.orientation == "RAS") return v;

  // For each target axis (R, A, S pick the source axis in that letter group
  // and whether it must be flipped.
  auto group = [](char c) { return c == 'R' || c == 'L' ? 0 : (c == 'A' || c == 'P' ? 1 : 2); };
  auto positive = [](char c) { return c == 'R' || c == 'A' || c == 'S'; };
  int src_axis[3];
  bool flip[3];
  for (int t = 0; t < 3; ++t) {
    src_axis[t] = -1;
    for (int s = 0; s < 3; ++s)
      if (group(v.orientation[static_cast<size_t>(s)]) == t) {
        src_axis[t] = s;
        flip[t] = !positive(v.orientation[static_cast<size_t>(s)]);
      }
  }
  Volume out = v;
  out.orientation = "RAS";
  int64_t od[3];
  for (int t = 0; t < 3; ++t) {
    od[t] = v.dim(src_axis[t]);
    out.spacing[static_cast<size_t>(t)] = v.spacing[static_cast<size_t>(src_axis[t])];
  }
  out.data = Tensor({od[0], od[1], od[2]});
  if (v.brain_mask) out.brain_mask = Tensor({od[0], od[1], od[2]});
  int64_t sd[3] = {v.dim(0), v.dim(1), v.dim(2)};
  int64_t i = 0;
  int64_t si[3];
  for (int64_t a = 0; a < od[0]; ++a)
    for (int64_t b = 0; b < od[1]; ++b)
      for (int64_t c = 0; c < od[2]; ++c, ++i) {
        int64_t ti[3] = {a, b, c};
        for (int t = 0; t < 3; ++t)
          si[src_axis[t]] = flip[t] ? od[t] - 1 - ti[t] : ti[t];
        int64_t j = (si[0] * sd[1] + si[1]) * sd[2] + si[2];
        out.data[i] = v.data[j];
        if (v.brain_mask) (*out.brain_mask)[i] = (*v.brain_mask)[j];
      }
  return out;
}

Volume crop_to_bbox(const Volume& v) {
  v.validate();
  if (!v.brain_mask) throw EmptyMaskError();
  const Tensor& m = *v.brain_mask;
  int64_t lo[3] = {v.dim(0), v.dim(1), v.dim(2)}, hi[3] = {-1, -1, -1};
  int64_t i = 0;
  for (int64_t z = 0; z < v.dim(0); ++z)
    for (int64_t y = 0; y < v.dim(1); ++y)
      for (int64_t x = 0; x < v.dim(2); ++x, ++i)
        if (m[i] != 0.f) {
          int64_t c[3] = {z, y, x};
          for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], c[a]);
            hi[a] = std::max(hi[a], c[a]);
          }
        }
  if (hi[0] < 0) throw EmptyMaskError();
  Volume out = v;
  int64_t od[3] = {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1};
  out.data = Tensor({od[0], od[1], od[2]});
  out.brain_mask = Tensor({od[0], od[1], od[2]});
  int64_t k = 0;
  for (int64_t z = 0; z < od[0]; ++z)
    for (int64_t y = 0; y < od[1]; ++y)
      for (int64_t x = 0; x < od[2]; ++x, ++k) {
        int64_t j = ((z + lo[0]) * v.dim(1) + (y + lo[1])) * v.dim(2) + (x + lo[2]);
        out.data[k] = v.data[j];
        (*out.brain_mask)[k] = m[j];
      }
  return out;
}

double masked_percentile(const Volume& v, const Tensor& mask, double pct) {
  std::vector<float> vals;
  vals.reserve(static_cast<size_t>(v.data.numel()));
  for (int64_t i = 0; i < v.data.numel(); ++i)
    if (mask[i] != 0.f) vals.push_back(v.data[i]);
  if (vals.empty()) throw EmptyMaskError();
  std::sort(vals.begin(), vals.end());
  double rank = pct / 100.0 * (static_cast<double>(vals.size()) - 1);
  int64_t lo = static_cast<int64_t>(std::floor(rank));
  int64_t hi = std::min<int64_t>(lo + 1, static_cast<int64_t>(vals.size()) - 1);
  double frac = rank - lo;
  return vals[static_cast<size_t>(lo)] * (1 - frac) + vals[static_cast<size_t>(hi)] * frac;
}

Volume clip_normalize(const Volume& v, double lo_pct, double hi_pct) {
  v.validate();
  if (!v.brain_mask) throw EmptyMaskError();
  const Tensor& m = *v.brain_mask;
  int64_t n_mask = 0;
  for (int64_t i = 0; i < m.numel(); ++i) n_mask += m[i] != 0.f;
  if (n_mask < 2) throw EmptyMaskError();

  double lo = masked_percentile(v, m, lo_pct);
  double hi = masked_percentile(v, m, hi_pct);

  Volume out = v;
  for (auto& x : out.data.data) x = std::clamp(static_cast<double>(x), lo, hi);

  double mean = 0;
  for (int64_t i = 0; i < m.numel(); ++i)
    if (m[i] != 0.f) mean += out.data[i];
  mean /= static_cast<double>(n_mask);
  double var = 0;
  for (int64_t i = 0; i < m.numel(); ++i)
    if (m[i] != 0.f) {
      double d = out.data[i] - mean;
      var += d * d;
    }
  var /= static_cast<double>(n_mask);
  if (var == 0) throw DegenerateVolumeError();
  double inv_std = 1.0 / std::sqrt(var);
  for (auto& x : out.data.data) x = static_cast<float>((x - mean) * inv_std);
  return out;
}

bool size_filter(const Volume& v, double min_extent_mm) {
  for (int a = 0; a < 3; ++a)
    if (v.dim(a) * v.spacing[static_cast<size_t>(a)] < min_extent_mm) return false;
  return true;
}

PreprocResult preprocess_volume(const Volume& v_in, double min_extent_mm, double target_mm) {
  Volume v = v_in;
  if (!v.brain_mask) v.brain_mask = v.derive_mask_nonzero();
  v = reorient_ras(v);
  v = resample_isotropic(v, target_mm);
  v = crop_to_bbox(v);
  if (!size_filter(v, min_extent_mm)) return {false, "size", {}};
  PreprocResult r;
  try {
    r.volume = clip_normalize(v);
  } catch (const DegenerateVolumeError&) {
    return {false, "degenerate", {}};
  }
  // Zero the background so a second pass derives the same brain mask.
  const Tensor& m = *r.volume.brain_mask;
  for (int64_t i = 0; i < m.numel(); ++i)
    if (m[i] == 0.f) r.volume.data[i] = 0.f;
  r.kept = true;
  return r;
}

}  // namespace mcl3d::preproc
