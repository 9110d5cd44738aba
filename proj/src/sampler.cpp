#include "mcl3d/sampler.hpp"

#include <algorithm>
#include <cmath>

#include "mcl3d/volume.hpp"

namespace mcl3d::sampler {

Mode mode_from_string(const std::string& s) {
  if (s == "mcl") return Mode::MCL;
  if (s == "cl") return Mode::CL;
  throw std::invalid_argument("unknown sampler mode: " + s);
}

std::string to_string(Mode m) { return m == Mode::MCL ? "mcl" : "cl"; }

AffineParams AffineParams::sample(const AugmentConfig& cfg, Rng& rng) {
  AffineParams p;
  if (!cfg.spatial) return p;
  double r = cfg.rot_deg * M_PI / 180.0;
  for (int i = 0; i < 3; ++i) p.rot[i] = rng.uniform(-r, r);
  p.scale = rng.uniform(cfg.scale_lo, cfg.scale_hi);
  if (cfg.flips)
    for (int i = 0; i < 3; ++i) p.flip[i] = rng.bernoulli(0.5);
  return p;
}

IntensityParams IntensityParams::sample(const AugmentConfig& cfg, Rng& rng) {
  IntensityParams p;
  if (!cfg.intensity) return p;
  p.gamma = rng.uniform(cfg.gamma_lo, cfg.gamma_hi);
  p.noise_sigma = rng.uniform(0.0, cfg.noise_sigma_max);
  p.bias = rng.uniform(cfg.bias_lo, cfg.bias_hi);
  return p;
}

namespace {

bool is_identity(const AffineParams& p) {
  return p.rot[0] == 0 && p.rot[1] == 0 && p.rot[2] == 0 && p.scale == 1.0 && !p.flip[0] &&
         !p.flip[1] && !p.flip[2];
}

float trilinear(const Tensor& t, double z, double y, double x) {
  int64_t n0 = t.dim(0), n1 = t.dim(1), n2 = t.dim(2);
  if (z < -1 || y < -1 || x < -1 || z > n0 || y > n1 || x > n2) return 0.f;
  int64_t z0 = static_cast<int64_t>(std::floor(z)), y0 = static_cast<int64_t>(std::floor(y)),
          x0 = static_cast<int64_t>(std::floor(x));
  double fz = z - z0, fy = y - y0, fx = x - x0;
  auto at = [&](int64_t a, int64_t b, int64_t c) -> double {
    if (a < 0 || a >= n0 || b < 0 || b >= n1 || c < 0 || c >= n2) return 0.0;
    return t[(a * n1 + b) * n2 + c];
  };
  double c00 = at(z0, y0, x0) * (1 - fx) + at(z0, y0, x0 + 1) * fx;
  double c01 = at(z0, y0 + 1, x0) * (1 - fx) + at(z0, y0 + 1, x0 + 1) * fx;
  double c10 = at(z0 + 1, y0, x0) * (1 - fx) + at(z0 + 1, y0, x0 + 1) * fx;
  double c11 = at(z0 + 1, y0 + 1, x0) * (1 - fx) + at(z0 + 1, y0 + 1, x0 + 1) * fx;
  double c0 = c00 * (1 - fy) + c01 * fy;
  double c1 = c10 * (1 - fy) + c11 * fy;
  return static_cast<float>(c0 * (1 - fz) + c1 * fz);
}

}  // namespace

Tensor affine_augment(const Tensor& patch, const AffineParams& p) {
  if (patch.ndim() != 3 || patch.dim(0) != patch.dim(1) || patch.dim(1) != patch.dim(2))
    throw std::invalid_argument("affine_augment: cubic patch expected");
  if (is_identity(p)) return patch;
  int64_t n = patch.dim(0);
  double ctr = (n - 1) / 2.0;

  // output -> input: inverse of (flip . scale . Rz Ry Rx) is
  // Rx^-1 Ry^-1 Rz^-1 . 1/scale . flip
  double cx = std::cos(p.rot[0]), sx = std::sin(p.rot[0]);
  double cy = std::cos(p.rot[1]), sy = std::sin(p.rot[1]);
  double cz = std::cos(p.rot[2]), sz = std::sin(p.rot[2]);
  // forward rotation matrices act on (a0, a1, a2); build the inverse directly
  double R[3][3];
  {
    // R = Rx(-r0) * Ry(-r1) * Rz(-r2) with rotations in the planes
    // (1,2), (0,2), (0,1) respectively
    double A[3][3] = {{1, 0, 0}, {0, cx, sx}, {0, -sx, cx}};
    double B[3][3] = {{cy, 0, -sy}, {0, 1, 0}, {sy, 0, cy}};
    double C[3][3] = {{cz, sz, 0}, {-sz, cz, 0}, {0, 0, 1}};
    double AB[3][3];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        AB[i][j] = 0;
        for (int k = 0; k < 3; ++k) AB[i][j] += A[i][k] * B[k][j];
      }
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        R[i][j] = 0;
        for (int k = 0; k < 3; ++k) R[i][j] += AB[i][k] * C[k][j];
      }
  }
  double inv_scale = 1.0 / p.scale;
  Tensor out(patch.shape);
  int64_t i = 0;
  for (int64_t a = 0; a < n; ++a)
    for (int64_t b = 0; b < n; ++b)
      for (int64_t c = 0; c < n; ++c, ++i) {
        double v[3] = {a - ctr, b - ctr, c - ctr};
        for (int d = 0; d < 3; ++d)
          if (p.flip[d]) v[d] = -v[d];
        double w[3];
        for (int d = 0; d < 3; ++d)
          w[d] = (R[d][0] * v[0] + R[d][1] * v[1] + R[d][2] * v[2]) * inv_scale;
        out[i] = trilinear(patch, w[0] + ctr, w[1] + ctr, w[2] + ctr);
      }
  return out;
}

Tensor intensity_augment(const Tensor& patch, const IntensityParams& p, Rng& noise_rng) {
  Tensor out = patch;
  if (p.gamma != 1.0) {
    float lo = *std::min_element(out.data.begin(), out.data.end());
    float hi = *std::max_element(out.data.begin(), out.data.end());
    if (hi > lo) {
      double span = hi - lo;
      for (auto& x : out.data)
        x = static_cast<float>(std::pow((x - lo) / span, p.gamma) * span + lo);
    }
  }
  if (p.bias != 1.0)
    for (auto& x : out.data) x = static_cast<float>(x * p.bias);
  if (p.noise_sigma > 0.0)
    for (auto& x : out.data) x = static_cast<float>(x + p.noise_sigma * noise_rng.normal());
  return out;
}

const Tensor& VolumeStore::get(size_t record_idx) {
  auto it = cache_.find(record_idx);
  if (it != cache_.end()) return it->second;
  const auto& rec = idx_->records.at(record_idx);
  Volume v = read_volume(idx_->resolve(rec.path));
  return cache_.emplace(record_idx, std::move(v.data)).first->second;
}

namespace {

Tensor crop(const Tensor& t, const std::array<int64_t, 3>& origin, int64_t P) {
  Tensor out({P, P, P});
  int64_t n1 = t.dim(1), n2 = t.dim(2);
  for (int64_t z = 0; z < P; ++z)
    for (int64_t y = 0; y < P; ++y) {
      const float* src = t.ptr() + ((origin[0] + z) * n1 + origin[1] + y) * n2 + origin[2];
      std::copy(src, src + P, out.ptr() + (z * P + y) * P);
    }
  return out;
}

}  // namespace

PairItem sample_pair(const CohortIndex& index, VolumeStore& store, Mode mode, int64_t patch_size,
                     const AugmentConfig& cfg, Rng& spatial_rng, Rng& intensity_rng) {
  auto sessions = index.sessions();
  if (sessions.empty()) throw SamplingError("empty cohort");
  std::vector<const std::pair<const CohortIndex::SessionKey, std::vector<size_t>>*> list;
  for (const auto& kv : sessions) list.push_back(&kv);

  for (int attempt = 0; attempt < 128; ++attempt) {
    const auto& [key, recs] = *list[static_cast<size_t>(spatial_rng.uniform_int(
        static_cast<int64_t>(list.size())))];
    size_t qi, ki;
    if (mode == Mode::CL) {
      qi = ki = recs[static_cast<size_t>(spatial_rng.uniform_int(static_cast<int64_t>(recs.size())))];
    } else {
      qi = recs[static_cast<size_t>(spatial_rng.uniform_int(static_cast<int64_t>(recs.size())))];
      ki = recs[static_cast<size_t>(spatial_rng.uniform_int(static_cast<int64_t>(recs.size())))];
    }
    const Tensor& vq = store.get(qi);
    const Tensor& vk = store.get(ki);
    if (vq.dim(0) < patch_size || vq.dim(1) < patch_size || vq.dim(2) < patch_size) continue;

    std::array<int64_t, 3> origin;
    for (int a = 0; a < 3; ++a)
      origin[static_cast<size_t>(a)] = spatial_rng.uniform_int(vq.dim(a) - patch_size + 1);

    PairItem item;
    item.subject_id = key.first;
    item.session_id = key.second;
    item.modality_q = index.records[qi].modality;
    item.modality_k = index.records[ki].modality;
    item.origin = origin;

    AffineParams aq = AffineParams::sample(cfg, spatial_rng);
    AffineParams ak = AffineParams::sample(cfg, spatial_rng);
    IntensityParams iq = IntensityParams::sample(cfg, intensity_rng);
    IntensityParams ik = IntensityParams::sample(cfg, intensity_rng);

    Tensor q_aff = affine_augment(crop(vq, origin, patch_size), aq);
    item.mim_target = q_aff;  // snapshot precedes intensity augmentation
    item.query = intensity_augment(q_aff, iq, intensity_rng);
    Tensor k_aff = affine_augment(crop(vk, origin, patch_size), ak);
    item.key = intensity_augment(k_aff, ik, intensity_rng);
    return item;
  }
  throw SamplingError("no session admits a " + std::to_string(patch_size) + "^3 patch");
}

PairBatch make_batch(const CohortIndex& index, VolumeStore& store, Mode mode, int64_t batch_size,
                     int64_t patch_size, const AugmentConfig& cfg, Rng& spatial_rng,
                     Rng& intensity_rng) {
  if (batch_size < 1) throw std::invalid_argument("make_batch: batch_size >= 1");
  PairBatch b;
  int64_t P = patch_size;
  b.query_views = Tensor({batch_size, 1, P, P, P});
  b.key_views = Tensor({batch_size, 1, P, P, P});
  b.mim_targets = Tensor({batch_size, 1, P, P, P});
  int64_t stride = P * P * P;
  for (int64_t i = 0; i < batch_size; ++i) {
    PairItem it = sample_pair(index, store, mode, P, cfg, spatial_rng, intensity_rng);
    std::copy(it.query.data.begin(), it.query.data.end(), b.query_views.ptr() + i * stride);
    std::copy(it.key.data.begin(), it.key.data.end(), b.key_views.ptr() + i * stride);
    std::copy(it.mim_target.data.begin(), it.mim_target.data.end(),
              b.mim_targets.ptr() + i * stride);
    b.subject_ids.push_back(it.subject_id);
    b.session_ids.push_back(it.session_id);
    b.modality_q.push_back(it.modality_q);
    b.modality_k.push_back(it.modality_k);
    b.origins.push_back(it.origin);
  }
  return b;
}

}  // namespace mcl3d::sampler
