#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "mcl3d/sampler.hpp"
#include "mcl3d/synthcohort.hpp"

using namespace mcl3d;
using namespace mcl3d::sampler;
namespace fs = std::filesystem;

namespace {

Tensor marker_patch(int64_t n, int64_t z, int64_t y, int64_t x) {
  Tensor t({n, n, n});
  t.zero();
  t[(z * n + y) * n + x] = 1.f;
  return t;
}

int64_t argmax(const Tensor& t) {
  int64_t best = 0;
  for (int64_t i = 1; i < t.numel(); ++i)
    if (t[i] > t[best]) best = i;
  return best;
}

AugmentConfig no_augment() {
  AugmentConfig c;
  c.spatial = false;
  c.intensity = false;
  return c;
}

struct CohortFixture {
  std::string dir;
  CohortIndex idx;

  explicit CohortFixture(const std::string& d) : dir(d) {
    synth::CohortSpec spec;
    spec.n_subjects = 3;
    spec.sessions_per_subject = 2;
    spec.modalities = {"M0", "M1"};
    spec.volume_shape = {48, 48, 48};
    spec.seed = 7;
    idx = synth::generate_cohort(spec, dir);
  }
  ~CohortFixture() { fs::remove_all(dir); }
};

Tensor crop_of(const Tensor& t, std::array<int64_t, 3> o, int64_t P) {
  Tensor out({P, P, P});
  for (int64_t z = 0; z < P; ++z)
    for (int64_t y = 0; y < P; ++y)
      for (int64_t x = 0; x < P; ++x)
        out[(z * P + y) * P + x] = t[((o[0] + z) * t.dim(1) + o[1] + y) * t.dim(2) + o[2] + x];
  return out;
}

}  // namespace

TEST_CASE("identity affine params return the input bitwise") {
  Rng rng(3);
  Tensor p({9, 9, 9});
  for (auto& v : p.data) v = static_cast<float>(rng.uniform());
  Tensor out = affine_augment(p, AffineParams::identity());
  CHECK(out.data == p.data);
}

TEST_CASE("quarter-turn rotation moves a marker to the predicted voxel") {
  // patch center (4,4,4); marker offset (0,0,+2); a quarter turn about axis 0
  // carries content offset (0,0,+2) to (0,-2,0)
  Tensor p = marker_patch(9, 4, 4, 6);
  AffineParams a;
  a.rot[0] = M_PI / 2;
  Tensor out = affine_augment(p, a);
  CHECK(argmax(out) == (4 * 9 + 2) * 9 + 4);
  CHECK(out[(4 * 9 + 2) * 9 + 4] == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("four quarter turns recover the original marker") {
  Tensor p = marker_patch(9, 4, 6, 3);
  AffineParams a;
  a.rot[2] = M_PI / 2;
  Tensor out = p;
  for (int i = 0; i < 4; ++i) out = affine_augment(out, a);
  CHECK(argmax(out) == argmax(p));
  CHECK(out[argmax(p)] == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("scaling by 2 doubles a marker's offset from center") {
  Tensor p = marker_patch(9, 4, 4, 5);  // offset (0,0,+1)
  AffineParams a;
  a.scale = 2.0;
  Tensor out = affine_augment(p, a);
  CHECK(argmax(out) == (4 * 9 + 4) * 9 + 6);
}

TEST_CASE("flips are exact involutions") {
  Rng rng(11);
  Tensor p({8, 8, 8});
  for (auto& v : p.data) v = static_cast<float>(rng.uniform());
  for (int d = 0; d < 3; ++d) {
    AffineParams a;
    a.flip[d] = true;
    Tensor once = affine_augment(p, a);
    CHECK(once.data != p.data);
    Tensor twice = affine_augment(once, a);
    CHECK(twice.data == p.data);
  }
}

TEST_CASE("flip mirrors indices along one axis") {
  Tensor p = marker_patch(8, 1, 2, 3);
  AffineParams a;
  a.flip[1] = true;
  Tensor out = affine_augment(p, a);
  CHECK(out[(1 * 8 + 5) * 8 + 3] == 1.f);
}

TEST_CASE("gamma preserves range endpoints and monotonicity") {
  Tensor p({1, 1, 3});
  p[0] = 0.f;
  p[1] = 0.5f;
  p[2] = 1.f;
  IntensityParams ip;
  ip.gamma = 2.0;
  Rng rng(0);
  Tensor out = intensity_augment(p, ip, rng);
  CHECK(out[0] == doctest::Approx(0.0));
  CHECK(out[1] == doctest::Approx(0.25));
  CHECK(out[2] == doctest::Approx(1.0));
}

TEST_CASE("bias multiplies values") {
  Tensor p({1, 1, 2});
  p[0] = 2.f;
  p[1] = -3.f;
  IntensityParams ip;
  ip.bias = 1.1;
  Rng rng(0);
  Tensor out = intensity_augment(p, ip, rng);
  CHECK(out[0] == doctest::Approx(2.2f));
  CHECK(out[1] == doctest::Approx(-3.3f));
}

TEST_CASE("additive noise has the requested standard deviation") {
  Tensor p({48, 48, 48});
  p.zero();
  IntensityParams ip;
  ip.noise_sigma = 0.1;
  Rng rng(99);
  Tensor out = intensity_augment(p, ip, rng);
  double s = 0, ss = 0;
  for (float v : out.data) {
    s += v;
    ss += static_cast<double>(v) * v;
  }
  double n = static_cast<double>(out.numel());
  double mean = s / n, sd = std::sqrt(ss / n - mean * mean);
  CHECK(std::abs(mean) < 0.003);
  CHECK(sd == doctest::Approx(0.1).epsilon(0.02));
}

TEST_CASE("cl mode always pairs a volume with itself") {
  CohortFixture fx("/tmp/mcl3d_samp_a");
  VolumeStore store(fx.idx);
  Rng sp(1), in(2);
  for (int i = 0; i < 1000; ++i) {
    auto item = sample_pair(fx.idx, store, Mode::CL, 16, no_augment(), sp, in);
    CHECK(item.modality_q == item.modality_k);
  }
}

TEST_CASE("mcl mode draws ordered modality pairs roughly uniformly") {
  CohortFixture fx("/tmp/mcl3d_samp_b");
  VolumeStore store(fx.idx);
  Rng sp(1), in(2);
  std::map<std::pair<std::string, std::string>, int> counts;
  const int N = 2000;
  for (int i = 0; i < N; ++i) {
    auto item = sample_pair(fx.idx, store, Mode::MCL, 16, no_augment(), sp, in);
    counts[{item.modality_q, item.modality_k}]++;
  }
  REQUIRE(counts.size() == 4);  // 2 modalities, ordered pairs
  for (const auto& [k, c] : counts) {
    double f = static_cast<double>(c) / N;
    CHECK(f > 0.15);
    CHECK(f < 0.35);
  }
}

TEST_CASE("pairs stay within one subject and session") {
  CohortFixture fx("/tmp/mcl3d_samp_c");
  VolumeStore store(fx.idx);
  auto sess = fx.idx.sessions();
  Rng sp(5), in(6);
  for (int i = 0; i < 200; ++i) {
    auto item = sample_pair(fx.idx, store, Mode::MCL, 16, no_augment(), sp, in);
    auto it = sess.find({item.subject_id, item.session_id});
    REQUIRE(it != sess.end());
    // with augmentations off, both views must equal crops of that session's
    // own modality volumes at the declared origin
    bool q_ok = false, k_ok = false;
    for (size_t ri : it->second) {
      const auto& rec = fx.idx.records[ri];
      Tensor c = crop_of(store.get(ri), item.origin, 16);
      if (rec.modality == item.modality_q && c.data == item.query.data) q_ok = true;
      if (rec.modality == item.modality_k && c.data == item.key.data) k_ok = true;
    }
    CHECK(q_ok);
    CHECK(k_ok);
  }
}

TEST_CASE("query and key are co-localized crops when augmentations are off") {
  CohortFixture fx("/tmp/mcl3d_samp_d");
  VolumeStore store(fx.idx);
  Rng sp(3), in(4);
  for (int i = 0; i < 50; ++i) {
    auto item = sample_pair(fx.idx, store, Mode::CL, 16, no_augment(), sp, in);
    CHECK(item.query.data == item.key.data);
    CHECK(item.query.data == item.mim_target.data);
  }
}

TEST_CASE("reconstruction targets ignore the intensity stream") {
  CohortFixture fx("/tmp/mcl3d_samp_e");
  VolumeStore store(fx.idx);
  AugmentConfig cfg;  // full augmentation
  VolumeStore store2(fx.idx);
  Rng sp1(17), in1(100);
  Rng sp2(17), in2(200);
  bool any_query_differs = false;
  for (int i = 0; i < 20; ++i) {
    auto a = sample_pair(fx.idx, store, Mode::MCL, 16, cfg, sp1, in1);
    auto b = sample_pair(fx.idx, store2, Mode::MCL, 16, cfg, sp2, in2);
    CHECK(a.mim_target.data == b.mim_target.data);
    if (a.query.data != b.query.data) any_query_differs = true;
  }
  CHECK(any_query_differs);
}

TEST_CASE("identical rng states give identical batches") {
  CohortFixture fx("/tmp/mcl3d_samp_f");
  VolumeStore s1(fx.idx), s2(fx.idx);
  AugmentConfig cfg;
  Rng sp1(8), in1(9), sp2(8), in2(9);
  auto b1 = make_batch(fx.idx, s1, Mode::MCL, 4, 16, cfg, sp1, in1);
  auto b2 = make_batch(fx.idx, s2, Mode::MCL, 4, 16, cfg, sp2, in2);
  CHECK(b1.query_views.data == b2.query_views.data);
  CHECK(b1.key_views.data == b2.key_views.data);
  CHECK(b1.mim_targets.data == b2.mim_targets.data);
  CHECK(b1.subject_ids == b2.subject_ids);
  CHECK(b1.origins == b2.origins);
}

TEST_CASE("batches carry the expected shapes and metadata") {
  CohortFixture fx("/tmp/mcl3d_samp_g");
  VolumeStore store(fx.idx);
  AugmentConfig cfg;
  Rng sp(1), in(2);
  auto b = make_batch(fx.idx, store, Mode::MCL, 3, 16, cfg, sp, in);
  CHECK(b.query_views.shape == std::vector<int64_t>{3, 1, 16, 16, 16});
  CHECK(b.key_views.shape == std::vector<int64_t>{3, 1, 16, 16, 16});
  CHECK(b.mim_targets.shape == std::vector<int64_t>{3, 1, 16, 16, 16});
  CHECK(b.size() == 3);
  CHECK(b.session_ids.size() == 3);
  CHECK(b.modality_q.size() == 3);
}

TEST_CASE("oversized patches raise a sampling error") {
  CohortFixture fx("/tmp/mcl3d_samp_h");
  VolumeStore store(fx.idx);
  Rng sp(1), in(2);
  CHECK_THROWS_AS(sample_pair(fx.idx, store, Mode::CL, 64, no_augment(), sp, in), SamplingError);
}

TEST_CASE("volume store caches by record index") {
  CohortFixture fx("/tmp/mcl3d_samp_i");
  VolumeStore store(fx.idx);
  const Tensor& a = store.get(0);
  const Tensor& b = store.get(0);
  CHECK(&a == &b);
}
