#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <functional>

#include "gradcheck.hpp"
#include "mcl3d/model.hpp"

using namespace mcl3d;
using namespace mcl3d::model;
using testutil::random_tensor;
using testutil::rel_err;

namespace {

EncoderConfig micro() {
  EncoderConfig c;
  c.stage_dims = {16, 16, 16, 16};
  c.stage_depths = {1, 1, 1, 1};
  c.window_size = 2;
  c.projection_dim = 8;
  return c;
}

// Central-difference check of a scalar function's gradient at chosen slots.
double fd_err(const std::function<double()>& loss, float* slot, double analytic, double h = 1e-3) {
  float orig = *slot;
  *slot = orig + static_cast<float>(h);
  double lp = loss();
  *slot = orig - static_cast<float>(h);
  double lm = loss();
  *slot = orig;
  return rel_err(analytic, (lp - lm) / (2 * h));
}

}  // namespace

TEST_CASE("stage grids follow the stride chain on a 96-voxel patch") {
  Rng rng(1);
  Encoder enc(micro(), rng);
  Tensor x = random_tensor({1, 1, 96, 96, 96}, rng, 0.5);
  Tensor bott = enc.forward(x);
  const auto& st = enc.stage_outputs();
  REQUIRE(st.size() == 4);
  CHECK(st[0].shape == std::vector<int64_t>{1, 16, 24, 24, 24});
  CHECK(st[1].shape == std::vector<int64_t>{1, 16, 12, 12, 12});
  CHECK(st[2].shape == std::vector<int64_t>{1, 16, 6, 6, 6});
  CHECK(st[3].shape == std::vector<int64_t>{1, 16, 3, 3, 3});
  CHECK(bott.shape == st[3].shape);
}

TEST_CASE("indivisible input extents are rejected") {
  Rng rng(1);
  Encoder enc(micro(), rng);
  Tensor x = random_tensor({1, 1, 40, 40, 40}, rng);
  CHECK_THROWS_AS(enc.forward(x), std::invalid_argument);
}

TEST_CASE("all-false patch mask reproduces the unmasked forward") {
  Rng rng(2);
  Encoder enc(micro(), rng);
  Tensor x = random_tensor({1, 1, 32, 32, 32}, rng, 0.5);
  Tensor y0 = enc.forward(x);
  std::vector<uint8_t> mask(8 * 8 * 8, 0);
  Tensor y1 = enc.forward(x, &mask);
  CHECK(y0.data == y1.data);
}

TEST_CASE("masked patches leak nothing into any stage output") {
  Rng rng(3);
  Encoder enc(micro(), rng);
  const int64_t P = 64;  // bottleneck grid 2^3
  Tensor x = random_tensor({1, 1, P, P, P}, rng, 0.5);
  for (int trial = 0; trial < 20; ++trial) {
    auto mp = make_bottleneck_mask(1, {2, 2, 2}, 8, 0.5, rng);
    enc.forward(x, &mp.patch);
    auto ref = enc.stage_outputs();

    // perturb voxels under masked patch tokens by magnitude 10
    Tensor x2 = x;
    int64_t g = P / 4;  // patch-token grid
    for (int64_t z = 0; z < P; ++z)
      for (int64_t y = 0; y < P; ++y)
        for (int64_t w = 0; w < P; ++w) {
          int64_t tok = ((z / 4) * g + y / 4) * g + w / 4;
          if (mp.patch[static_cast<size_t>(tok)])
            x2[(z * P + y) * P + w] += 10.f * static_cast<float>(rng.uniform(-1, 1));
        }
    enc.forward(x2, &mp.patch);
    const auto& got = enc.stage_outputs();
    for (size_t s = 0; s < ref.size(); ++s) {
      double worst = 0;
      for (int64_t i = 0; i < ref[s].numel(); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(ref[s][i]) - got[s][i]));
      CHECK(worst < 1e-6);
    }
  }
}

TEST_CASE("bottleneck masking counts cells with round-half-up") {
  Rng rng(4);
  auto mp = make_bottleneck_mask(1, {3, 3, 3}, 8, 0.5, rng);
  int64_t nb = 0, np = 0;
  for (auto b : mp.bottleneck) nb += b;
  for (auto p : mp.patch) np += p;
  CHECK(nb == 14);  // 27 cells at ratio 0.5
  CHECK(np == 14 * 512);

  auto z = make_bottleneck_mask(2, {3, 3, 3}, 8, 0.0, rng);
  CHECK(std::count(z.bottleneck.begin(), z.bottleneck.end(), 1) == 0);
  CHECK(std::count(z.patch.begin(), z.patch.end(), 1) == 0);
  auto o = make_bottleneck_mask(2, {3, 3, 3}, 8, 1.0, rng);
  CHECK(std::count(o.bottleneck.begin(), o.bottleneck.end(), 0) == 0);
  CHECK(std::count(o.patch.begin(), o.patch.end(), 0) == 0);
}

TEST_CASE("every patch token inherits its covering bottleneck cell's bit") {
  Rng rng(5);
  auto mp = make_bottleneck_mask(3, {2, 3, 2}, 4, 0.4, rng);
  int64_t g0 = 2 * 4, g1 = 3 * 4, g2 = 2 * 4;
  for (int64_t b = 0; b < 3; ++b)
    for (int64_t z = 0; z < g0; ++z)
      for (int64_t y = 0; y < g1; ++y)
        for (int64_t x = 0; x < g2; ++x)
          CHECK(mp.patch[static_cast<size_t>(((b * g0 + z) * g1 + y) * g2 + x)] ==
                mp.bottleneck[static_cast<size_t>(
                    ((b * 2 + z / 4) * 3 + y / 4) * 2 + x / 4)]);
}

TEST_CASE("momentum update follows the ema rule") {
  nn::Param q("q", {2}), k("k", {2});
  q.value[0] = 4.f;
  q.value[1] = -2.f;
  k.value[0] = 2.f;
  k.value[1] = 0.f;
  nn::ParamRefs qs{&q}, ks{&k};

  Tensor before = k.value;
  momentum_update(qs, ks, 1.0);
  CHECK(k.value.data == before.data);
  momentum_update(qs, ks, 0.5);
  CHECK(k.value[0] == doctest::Approx(3.0));
  CHECK(k.value[1] == doctest::Approx(-1.0));
  momentum_update(qs, ks, 0.0);
  CHECK(k.value.data == q.value.data);

  nn::Param bad("bad", {3});
  nn::ParamRefs bs{&bad};
  CHECK_THROWS_AS(momentum_update(qs, bs, 0.5), std::runtime_error);
}

TEST_CASE("momentum schedule ramps linearly over the first fifth") {
  CHECK(momentum_schedule(0, 1000) == doctest::Approx(0.996));
  CHECK(momentum_schedule(100, 1000) == doctest::Approx(0.9975));
  CHECK(momentum_schedule(200, 1000) == doctest::Approx(0.999));
  CHECK(momentum_schedule(700, 1000) == doctest::Approx(0.999));
  double prev = 0;
  for (int64_t s = 0; s <= 1000; s += 10) {
    double m = momentum_schedule(s, 1000);
    CHECK(m >= prev);
    CHECK(m >= 0.996);
    CHECK(m <= 0.999);
    prev = m;
  }
  CHECK_THROWS_AS(momentum_schedule(0, 0), std::invalid_argument);
  CHECK_THROWS_AS(momentum_schedule(-1, 10), std::invalid_argument);
}

TEST_CASE("projection outputs unit vectors, scale-invariantly") {
  Rng rng(6);
  ProjectionHead head(16, 8, rng);
  nn::ParamRefs hp;
  head.collect(hp);
  for (auto* p : hp)
    if (p->name.find("bias") != std::string::npos) p->value.zero();
  Tensor x = random_tensor({3, 16}, rng);
  Tensor y = head.forward(x);
  for (int64_t b = 0; b < 3; ++b) {
    double n = 0;
    for (int64_t d = 0; d < 8; ++d) n += static_cast<double>(y[b * 8 + d]) * y[b * 8 + d];
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-6);
  }
  Tensor xs = x;
  for (auto& v : xs.data) v *= 10.f;
  Tensor ys = head.forward(xs);
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y[i] - ys[i]) < 1e-5);
}

TEST_CASE("projection matches an independently computed oracle") {
  Rng rng(7);
  ProjectionHead head(4, 3, rng);
  nn::ParamRefs ps;
  head.collect(ps);
  REQUIRE(ps.size() == 4);  // two weights, two biases
  Tensor x = random_tensor({1, 4}, rng);
  Tensor y = head.forward(x);

  const Tensor &w1 = ps[0]->value, &b1 = ps[1]->value, &w2 = ps[2]->value, &b2 = ps[3]->value;
  double h[4], z[3];
  for (int i = 0; i < 4; ++i) {
    h[i] = b1[i];
    for (int j = 0; j < 4; ++j) h[i] += static_cast<double>(w1[i * 4 + j]) * x[j];
    h[i] = std::max(h[i], 0.0);
  }
  double n = 0;
  for (int i = 0; i < 3; ++i) {
    z[i] = b2[i];
    for (int j = 0; j < 4; ++j) z[i] += static_cast<double>(w2[i * 4 + j]) * h[j];
    n += z[i] * z[i];
  }
  n = std::sqrt(n);
  for (int i = 0; i < 3; ++i) CHECK(y[i] == doctest::Approx(z[i] / n).epsilon(1e-4));
}

TEST_CASE("projection gradients match finite differences") {
  Rng rng(8);
  ProjectionHead head(6, 4, rng);
  Tensor x = random_tensor({2, 6}, rng);
  Tensor y = head.forward(x);
  testutil::Probe probe(y, rng);
  nn::ParamRefs ps;
  head.collect(ps);
  nn::zero_grads(ps);
  Tensor dx = head.backward(probe.dy());
  auto loss = [&] { return probe.loss(head.forward(x)); };
  double worst = 0;
  for (int64_t i = 0; i < x.numel(); ++i)
    worst = std::max(worst, fd_err(loss, &x.data[static_cast<size_t>(i)], dx[i]));
  for (auto* p : ps)
    for (int64_t j = 0; j < std::min<int64_t>(p->value.numel(), 10); ++j) {
      int64_t i = rng.uniform_int(p->value.numel());
      worst = std::max(worst, fd_err(loss, &p->value.data[static_cast<size_t>(i)], p->grad[i]));
    }
  CHECK(worst < 2e-2);
}

TEST_CASE("zero embeddings are rejected by the projection head") {
  Rng rng(9);
  ProjectionHead head(4, 3, rng);
  nn::ParamRefs ps;
  head.collect(ps);
  for (auto* p : ps) p->value.zero();  // forces a zero pre-normalization vector
  Tensor x({1, 4});
  x.zero();
  CHECK_THROWS_AS(head.forward(x), std::runtime_error);
}

TEST_CASE("pooled mean and its adjoint are consistent") {
  Rng rng(10);
  Tensor f = random_tensor({2, 3, 2, 2, 2}, rng);
  Tensor p = pooled_mean(f);
  CHECK(p.shape == std::vector<int64_t>{2, 3});
  double s = 0;
  for (int v = 0; v < 8; ++v) s += f[v];
  CHECK(p[0] == doctest::Approx(s / 8));
  Tensor dp = random_tensor({2, 3}, rng);
  Tensor df = pooled_mean_backward(dp, f.shape);
  CHECK(df.shape == f.shape);
  CHECK(df[0] == doctest::Approx(dp[0] / 8));
}

TEST_CASE("encoder gradients match finite differences") {
  Rng rng(11);
  Encoder enc(micro(), rng);
  Tensor x = random_tensor({1, 1, 32, 32, 32}, rng, 0.5);
  auto mp = make_bottleneck_mask(1, {1, 1, 1}, 8, 1.0, rng);  // exercises the mask token
  Tensor y = enc.forward(x, &mp.patch);
  testutil::Probe probe(y, rng);
  nn::ParamRefs ps;
  enc.collect(ps);
  nn::zero_grads(ps);
  enc.backward(probe.dy());
  auto loss = [&] { return probe.loss(enc.forward(x, &mp.patch)); };
  double worst = 0;
  for (int rep = 0; rep < 6; ++rep) {
    auto* p = ps[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(ps.size())))];
    int64_t i = rng.uniform_int(p->value.numel());
    worst = std::max(worst, fd_err(loss, &p->value.data[static_cast<size_t>(i)], p->grad[i]));
  }
  // the mask token must carry gradient
  auto& mt = enc.mask_token();
  double gsum = 0;
  for (int64_t i = 0; i < mt.grad.numel(); ++i) gsum += std::abs(mt.grad[i]);
  CHECK(gsum > 0);
  worst = std::max(worst, fd_err(loss, &mt.value.data[0], mt.grad[0]));
  CHECK(worst < 2e-2);
}

TEST_CASE("synchronized online and momentum encoders embed identically") {
  Rng rng(12);
  EncoderConfig cfg = micro();
  Rng r1 = rng.fork(1), r2 = rng.fork(2);
  Encoder online(cfg, r1, "q");
  Encoder momentum(cfg, r2, "k");
  nn::ParamRefs qs, ks;
  online.collect(qs);
  momentum.collect(ks);
  momentum_update(qs, ks, 0.0);
  Tensor x = random_tensor({1, 1, 32, 32, 32}, rng, 0.5);
  Tensor a = pooled_mean(online.forward(x));
  Tensor b = pooled_mean(momentum.forward(x));
  CHECK(a.data == b.data);
}

TEST_CASE("fpn decoder maps the pyramid back to voxel resolution") {
  Rng rng(13);
  EncoderConfig cfg = micro();
  FPNDecoder dec(cfg, 8, 1, rng);
  std::vector<Tensor> feats;
  for (int64_t g : {8, 4, 2, 1}) feats.push_back(random_tensor({1, 16, g, g, g}, rng));
  Tensor out = dec.forward(feats);
  CHECK(out.shape == std::vector<int64_t>{1, 1, 32, 32, 32});
}

TEST_CASE("zero pyramid with a zeroed output layer decodes to zero") {
  Rng rng(14);
  FPNDecoder dec(micro(), 8, 1, rng);
  nn::ParamRefs ps;
  dec.collect(ps);
  for (auto* p : ps)
    if (p->name.find(".out") != std::string::npos) p->value.zero();
  std::vector<Tensor> feats;
  for (int64_t g : {8, 4, 2, 1}) {
    feats.push_back(Tensor({1, 16, g, g, g}));
    feats.back().zero();
  }
  Tensor out = dec.forward(feats);
  for (int64_t i = 0; i < out.numel(); ++i) CHECK(out[i] == 0.f);
}

TEST_CASE("fpn gradients match finite differences") {
  Rng rng(15);
  FPNDecoder dec(micro(), 4, 1, rng);
  std::vector<Tensor> feats;
  for (int64_t g : {8, 4, 2, 1}) feats.push_back(random_tensor({1, 16, g, g, g}, rng));
  Tensor y = dec.forward(feats);
  testutil::Probe probe(y, rng);
  nn::ParamRefs ps;
  dec.collect(ps);
  nn::zero_grads(ps);
  auto dfeats = dec.backward(probe.dy());
  auto loss = [&] { return probe.loss(dec.forward(feats)); };
  double worst = 0;
  for (int rep = 0; rep < 10; ++rep) {
    auto* p = ps[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(ps.size())))];
    int64_t i = rng.uniform_int(p->value.numel());
    worst = std::max(worst, fd_err(loss, &p->value.data[static_cast<size_t>(i)], p->grad[i]));
  }
  for (size_t s = 0; s < feats.size(); ++s)
    for (int rep = 0; rep < 4; ++rep) {
      int64_t i = rng.uniform_int(feats[s].numel());
      worst = std::max(worst, fd_err(loss, &feats[s].data[static_cast<size_t>(i)], dfeats[s][i]));
    }
  CHECK(worst < 2e-2);
}

TEST_CASE("checkpoints round-trip parameters, meta, and step") {
  Rng rng(16);
  EncoderConfig cfg = micro();
  Rng r1 = rng.fork(1), r2 = rng.fork(2);
  Encoder a(cfg, r1), b(cfg, r2);
  nn::ParamRefs pa, pb;
  a.collect(pa);
  b.collect(pb);

  Checkpoint ck;
  ck.step = 123;
  ck.meta = encoder_config_meta(cfg);
  ck.meta["note"] = "round trip";
  pack_params(pa, ck);
  ck.save("/tmp/mcl3d_ckpt_test.bin");

  Checkpoint in = Checkpoint::load("/tmp/mcl3d_ckpt_test.bin");
  CHECK(in.step == 123);
  CHECK(in.meta.at("note") == "round trip");
  EncoderConfig cfg2 = encoder_config_from_meta(in.meta);
  CHECK(cfg2.stage_dims == cfg.stage_dims);
  unpack_params(in, pb);

  Tensor x = random_tensor({1, 1, 32, 32, 32}, rng, 0.5);
  CHECK(a.forward(x).data == b.forward(x).data);
  std::remove("/tmp/mcl3d_ckpt_test.bin");
}

TEST_CASE("checkpoints reject missing or mis-shaped tensors") {
  Rng rng(17);
  Checkpoint ck;
  nn::Param p("p", {4});
  nn::ParamRefs ps{&p};
  CHECK_THROWS_AS(unpack_params(ck, ps), std::runtime_error);
  ck.tensors.emplace_back("p", Tensor({5}));
  CHECK_THROWS_AS(unpack_params(ck, ps), std::runtime_error);
}

TEST_CASE("config presets are self-consistent") {
  EncoderConfig::desk().validate();
  EncoderConfig::tiny().validate();
  EncoderConfig::paper().validate();
  CHECK(EncoderConfig::desk().bottleneck_stride() == 32);
  EncoderConfig bad;
  bad.stage_dims = {30, 64, 128, 256};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
