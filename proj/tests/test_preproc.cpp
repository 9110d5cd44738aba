#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "mcl3d/preproc.hpp"
#include "mcl3d/rng.hpp"
#include "mcl3d/volume.hpp"

using namespace mcl3d;
using namespace mcl3d::preproc;

namespace {

Volume make_volume(std::vector<int64_t> shape, std::array<double, 3> spacing,
                   std::string orientation = "RAS") {
  Volume v;
  v.data = Tensor(std::move(shape));
  v.spacing = spacing;
  v.orientation = std::move(orientation);
  return v;
}

Volume random_volume(Rng& rng, std::vector<int64_t> shape, std::array<double, 3> spacing) {
  Volume v = make_volume(std::move(shape), spacing);
  for (auto& x : v.data.data) x = static_cast<float>(rng.uniform(0, 100));
  return v;
}

// Independent trilinear oracle mirroring the pixel-center coordinate map.
double trilinear_oracle(const Tensor& t, double z, double y, double x) {
  auto cl = [](int64_t i, int64_t n) { return std::max<int64_t>(0, std::min(i, n - 1)); };
  int64_t n0 = t.dim(0), n1 = t.dim(1), n2 = t.dim(2);
  double acc = 0;
  int64_t z0 = (int64_t)std::floor(z), y0 = (int64_t)std::floor(y), x0 = (int64_t)std::floor(x);
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        double wz = dz ? z - z0 : 1 - (z - z0);
        double wy = dy ? y - y0 : 1 - (y - y0);
        double wx = dx ? x - x0 : 1 - (x - x0);
        acc += wz * wy * wx * t[(cl(z0 + dz, n0) * n1 + cl(y0 + dy, n1)) * n2 + cl(x0 + dx, n2)];
      }
  return acc;
}

}  // namespace

TEST_CASE("resample pure scaling doubles the grid") {
  Rng rng(1);
  Volume v = random_volume(rng, {10, 10, 10}, {2, 2, 2});
  Volume o = resample_isotropic(v, 1.0);
  CHECK(o.data.shape == std::vector<int64_t>({20, 20, 20}));
  CHECK(o.spacing == std::array<double, 3>{1, 1, 1});
}

TEST_CASE("resample at current spacing is bitwise identity") {
  Rng rng(2);
  Volume v = random_volume(rng, {7, 8, 9}, {1, 1, 1});
  Volume o = resample_isotropic(v, 1.0);
  CHECK(o.data.data == v.data.data);
}

TEST_CASE("anisotropic resample matches trilinear oracle") {
  Rng rng(3);
  Volume v = random_volume(rng, {16, 16, 8}, {1, 1, 2});
  Volume o = resample_isotropic(v, 1.0);
  CHECK(o.data.shape == std::vector<int64_t>({16, 16, 16}));
  // probe interior output voxels against the oracle
  for (int rep = 0; rep < 200; ++rep) {
    int64_t z = 2 + rng.uniform_int(12), y = 2 + rng.uniform_int(12), x = 2 + rng.uniform_int(12);
    double sx = (x + 0.5) * 0.5 - 0.5;
    double expect = trilinear_oracle(v.data, (double)z, (double)y, sx);
    CHECK(o.data[(z * 16 + y) * 16 + x] == doctest::Approx(expect).epsilon(1e-5));
  }
}

TEST_CASE("resample rejects non-positive target") {
  Rng rng(4);
  Volume v = random_volume(rng, {4, 4, 4}, {1, 1, 1});
  CHECK_THROWS_AS(resample_isotropic(v, 0.0), std::invalid_argument);
}

TEST_CASE("resample twice at same target is stable") {
  Rng rng(5);
  Volume v = random_volume(rng, {12, 10, 8}, {1.5, 1, 2});
  Volume a = resample_isotropic(v, 1.0);
  Volume b = resample_isotropic(a, 1.0);
  for (int64_t i = 0; i < a.data.numel(); ++i)
    CHECK(std::abs(a.data[i] - b.data[i]) < 1e-4);
}

TEST_CASE("reorient RAS input is identity") {
  Rng rng(6);
  Volume v = random_volume(rng, {4, 5, 6}, {1, 1, 1});
  Volume o = reorient_ras(v);
  CHECK(o.data.data == v.data.data);
}

TEST_CASE("reorient LAS flips the first axis and round-trips") {
  Rng rng(7);
  Volume v = random_volume(rng, {4, 5, 6}, {1, 1, 1});
  v.orientation = "LAS";
  Volume o = reorient_ras(v);
  CHECK(o.orientation == "RAS");
  for (int64_t z = 0; z < 4; ++z)
    for (int64_t y = 0; y < 5; ++y)
      for (int64_t x = 0; x < 6; ++x)
        CHECK(o.data[(z * 5 + y) * 6 + x] == v.data[((3 - z) * 5 + y) * 6 + x]);
  // flipping the flipped grid restores the original
  Volume back = o;
  back.orientation = "LAS";
  Volume o2 = reorient_ras(back);
  CHECK(o2.data.data == v.data.data);
  // idempotence
  CHECK(reorient_ras(o).data.data == o.data.data);
}

TEST_CASE("all 48 orientation codes place a corner marker correctly") {
  const char* groups[3][2] = {{"R", "L"}, {"A", "P"}, {"S", "I"}};
  int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  int codes_checked = 0;
  for (auto& perm : perms)
    for (int f0 = 0; f0 < 2; ++f0)
      for (int f1 = 0; f1 < 2; ++f1)
        for (int f2 = 0; f2 < 2; ++f2) {
          std::string code;
          int flips[3] = {f0, f1, f2};
          for (int a = 0; a < 3; ++a) code += groups[perm[a]][flips[a]];
          REQUIRE(orientation_valid(code));
          // marker at the "most positive" corner of each source axis:
          // a voxel at index (n-1) along an axis labeled with a positive
          // letter must land at index (n-1) of the matching RAS axis.
          Volume v = make_volume({3, 4, 5}, {1, 1, 1}, code);
          // put the marker at the corner that should map to the RAS-max corner
          int64_t src[3];
          for (int a = 0; a < 3; ++a) src[a] = flips[a] ? 0 : v.dim(a) - 1;
          v.data[(src[0] * 4 + src[1]) * 5 + src[2]] = 7.f;
          Volume o = reorient_ras(v);
          int64_t j = ((o.dim(0) - 1) * o.dim(1) + (o.dim(1) - 1)) * o.dim(2) + (o.dim(2) - 1);
          CHECK(o.data[j] == 7.f);
          CHECK(reorient_ras(o).data.data == o.data.data);
          ++codes_checked;
        }
  CHECK(codes_checked == 48);
}

TEST_CASE("crop full mask is identity, single voxel gives 1x1x1") {
  Rng rng(8);
  Volume v = random_volume(rng, {8, 9, 10}, {1, 1, 1});
  v.brain_mask = Tensor(v.data.shape, 1.f);
  Volume o = crop_to_bbox(v);
  CHECK(o.data.data == v.data.data);

  Volume s = random_volume(rng, {10, 10, 10}, {1, 1, 1});
  s.brain_mask = Tensor(s.data.shape, 0.f);
  (*s.brain_mask)[(5 * 10 + 6) * 10 + 7] = 1.f;
  Volume c = crop_to_bbox(s);
  CHECK(c.data.shape == std::vector<int64_t>({1, 1, 1}));
  CHECK(c.data[0] == s.data[(5 * 10 + 6) * 10 + 7]);
}

TEST_CASE("crop of a random blob matches a linear-scan oracle") {
  Rng rng(9);
  Volume v = random_volume(rng, {12, 12, 12}, {1, 1, 1});
  v.brain_mask = Tensor(v.data.shape, 0.f);
  for (int rep = 0; rep < 40; ++rep)
    (*v.brain_mask)[rng.uniform_int(v.data.numel())] = 1.f;
  int64_t lo[3] = {12, 12, 12}, hi[3] = {-1, -1, -1};
  int64_t i = 0;
  for (int64_t z = 0; z < 12; ++z)
    for (int64_t y = 0; y < 12; ++y)
      for (int64_t x = 0; x < 12; ++x, ++i)
        if ((*v.brain_mask)[i] != 0.f) {
          int64_t c[3] = {z, y, x};
          for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], c[a]);
            hi[a] = std::max(hi[a], c[a]);
          }
        }
  Volume o = crop_to_bbox(v);
  for (int a = 0; a < 3; ++a) CHECK(o.dim(a) == hi[a] - lo[a] + 1);
}

TEST_CASE("crop with empty mask throws") {
  Rng rng(10);
  Volume v = random_volume(rng, {4, 4, 4}, {1, 1, 1});
  v.brain_mask = Tensor(v.data.shape, 0.f);
  CHECK_THROWS_AS(crop_to_bbox(v), EmptyMaskError);
}

TEST_CASE("clip_normalize: uniform ramp matches sort-based percentile oracle") {
  Volume v = make_volume({10, 10, 10}, {1, 1, 1});
  for (int64_t i = 0; i < 1000; ++i) v.data[i] = static_cast<float>(i);
  v.brain_mask = Tensor(v.data.shape, 1.f);

  // sorted-array linear interpolation oracle
  double lo_expect = 0.005 * 999;    // rank interpolation over 0..999
  double hi_expect = 0.995 * 999;
  CHECK(masked_percentile(v, *v.brain_mask, 0.5) == doctest::Approx(lo_expect).epsilon(1e-9));
  CHECK(masked_percentile(v, *v.brain_mask, 99.5) == doctest::Approx(hi_expect).epsilon(1e-9));

  Volume o = clip_normalize(v);
  double mean = 0, var = 0;
  for (auto x : o.data.data) mean += x;
  mean /= 1000;
  for (auto x : o.data.data) var += (x - mean) * (x - mean);
  var /= 1000;
  CHECK(std::abs(mean) < 1e-5);
  CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-5);

  // raw values beyond the clip bounds map exactly to the bounds pre-normalization
  float top = *std::max_element(o.data.data.begin(), o.data.data.end());
  int top_count = 0;
  for (auto x : o.data.data) top_count += x == top;
  CHECK(top_count >= 5);  // everything above p99.5 collapsed onto the bound
}

TEST_CASE("clip_normalize near-identity on standard normal data") {
  Rng rng(11);
  Volume v = make_volume({12, 12, 12}, {1, 1, 1});
  for (auto& x : v.data.data) x = static_cast<float>(rng.normal());
  v.brain_mask = Tensor(v.data.shape, 1.f);
  Volume o = clip_normalize(v);
  int64_t close = 0;
  for (int64_t i = 0; i < v.data.numel(); ++i)
    close += std::abs(o.data[i] - v.data[i]) < 0.1;
  CHECK(close > v.data.numel() * 95 / 100);
}

TEST_CASE("clip_normalize rejects constant in-mask image") {
  Volume v = make_volume({4, 4, 4}, {1, 1, 1});
  for (auto& x : v.data.data) x = 3.f;
  v.brain_mask = Tensor(v.data.shape, 1.f);
  CHECK_THROWS_AS(clip_normalize(v), DegenerateVolumeError);
}

TEST_CASE("size filter boundary: 120mm kept, 119mm excluded") {
  Volume keep = make_volume({121, 140, 130}, {1, 1, 1});
  CHECK(size_filter(keep));
  Volume drop = make_volume({119, 140, 130}, {1, 1, 1});
  CHECK_FALSE(size_filter(drop));
  Volume edge = make_volume({120, 120, 120}, {1, 1, 1});
  CHECK(size_filter(edge));
}

TEST_CASE("size filter is monotone in shape") {
  Rng rng(12);
  for (int rep = 0; rep < 50; ++rep) {
    int64_t a = 100 + rng.uniform_int(50), b = 100 + rng.uniform_int(50),
            c = 100 + rng.uniform_int(50);
    Volume v = make_volume({a, b, c}, {1, 1, 1});
    Volume w = make_volume({a + 1, b + 2, c + 3}, {1, 1, 1});
    if (size_filter(v)) CHECK(size_filter(w));
  }
}

namespace {
// Ellipsoid phantom with a nonzero brain region larger than min_extent.
Volume phantom(Rng& rng, int64_t n, double r_scale = 0.45) {
  Volume v;
  v.data = Tensor({n, n, n});
  v.spacing = {1, 1, 1};
  double r = r_scale * n;
  int64_t i = 0;
  for (int64_t z = 0; z < n; ++z)
    for (int64_t y = 0; y < n; ++y)
      for (int64_t x = 0; x < n; ++x, ++i) {
        double dz = z - n / 2.0, dy = y - n / 2.0, dx = x - n / 2.0;
        if (dz * dz + dy * dy + dx * dx < r * r)
          v.data[i] = static_cast<float>(50 + 10 * rng.normal());
      }
  return v;
}
}  // namespace

TEST_CASE("preprocess_volume composes postconditions and reports rejections") {
  Rng rng(13);
  Volume v = phantom(rng, 140);
  auto res = preprocess_volume(v);
  REQUIRE(res.kept);
  CHECK(res.volume.spacing == std::array<double, 3>{1, 1, 1});
  CHECK(res.volume.orientation == "RAS");
  const Tensor& m = *res.volume.brain_mask;
  double mean = 0;
  int64_t n = 0;
  for (int64_t i = 0; i < m.numel(); ++i)
    if (m[i] != 0.f) {
      mean += res.volume.data[i];
      ++n;
    }
  mean /= n;
  CHECK(std::abs(mean) < 1e-4);

  Volume small = phantom(rng, 60);
  auto rej = preprocess_volume(small);
  CHECK_FALSE(rej.kept);
  CHECK(rej.reason == "size");
}

TEST_CASE("preprocess_volume is idempotent within 1e-4") {
  Rng rng(14);
  Volume v = phantom(rng, 140);
  auto first = preprocess_volume(v);
  REQUIRE(first.kept);
  Volume stripped = first.volume;
  stripped.brain_mask.reset();  // as if reloaded from disk
  auto second = preprocess_volume(stripped);
  REQUIRE(second.kept);
  REQUIRE(second.volume.data.shape == first.volume.data.shape);
  for (int64_t i = 0; i < first.volume.data.numel(); ++i)
    CHECK(std::abs(first.volume.data[i] - second.volume.data[i]) < 1e-4);
}

TEST_CASE("nifti round trip preserves data, spacing and orientation") {
  Rng rng(15);
  Volume v = make_volume({6, 7, 8}, {1.5, 1.0, 2.0}, "LPI");
  for (auto& x : v.data.data) x = static_cast<float>(rng.uniform(-5, 5));
  v.modality = "T1";
  std::string path = "/tmp/mcl3d_test_vol.nii.gz";
  write_nifti(path, v);
  Volume r = read_nifti(path);
  CHECK(r.data.shape == v.data.shape);
  CHECK(r.orientation == v.orientation);
  CHECK(r.modality == "T1");
  for (int a = 0; a < 3; ++a) CHECK(r.spacing[a] == doctest::Approx(v.spacing[a]).epsilon(1e-5));
  CHECK(r.data.data == v.data.data);
  std::remove(path.c_str());
}

TEST_CASE("raw volume round trip") {
  Rng rng(16);
  Volume v = make_volume({3, 4, 5}, {1, 2, 3}, "RAS");
  for (auto& x : v.data.data) x = static_cast<float>(rng.uniform(-1, 1));
  v.modality = "FLAIR";
  std::string path = "/tmp/mcl3d_test_vol.mvol";
  write_raw_volume(path, v);
  Volume r = read_raw_volume(path);
  CHECK(r.data.data == v.data.data);
  CHECK(r.modality == "FLAIR");
  CHECK(r.spacing == v.spacing);
  std::remove(path.c_str());
}
