#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mcl3d/embedeval.hpp"
#include "mcl3d/png.hpp"
#include "mcl3d/pretrain.hpp"
#include "mcl3d/synthcohort.hpp"

using namespace mcl3d;
using namespace mcl3d::embed;
namespace fs = std::filesystem;

namespace {

model::EncoderConfig micro_enc() {
  model::EncoderConfig c;
  c.stage_dims = {16, 16, 16, 16};
  c.stage_depths = {1, 1, 1, 1};
  c.window_size = 2;
  c.projection_dim = 8;
  return c;
}

CohortIndex fixture_cohort() {
  std::string dir = "/tmp/mcl3d_pretrain_cohort";
  if (fs::exists(dir + "/manifest.jsonl")) return CohortIndex::load(dir + "/manifest.jsonl");
  synth::CohortSpec spec;
  spec.n_subjects = 3;
  spec.sessions_per_subject = 1;
  spec.modalities = {"M0", "M1"};
  spec.volume_shape = {48, 48, 48};
  spec.seed = 21;
  return synth::generate_cohort(spec, dir);
}

EmbeddingRecord rec(const std::string& subj, int sess, const std::string& mod,
                    std::vector<float> v) {
  return {subj, sess, mod, std::move(v)};
}

double silhouette(const std::vector<std::array<double, 2>>& pts, const std::vector<int>& label) {
  auto dist = [&](size_t i, size_t j) {
    return std::hypot(pts[i][0] - pts[j][0], pts[i][1] - pts[j][1]);
  };
  double total = 0;
  for (size_t i = 0; i < pts.size(); ++i) {
    std::map<int, std::pair<double, int>> per_cluster;  // sum, count
    for (size_t j = 0; j < pts.size(); ++j) {
      if (j == i) continue;
      auto& [s, c] = per_cluster[label[j]];
      s += dist(i, j);
      ++c;
    }
    double a = per_cluster[label[i]].first / per_cluster[label[i]].second;
    double b = 1e300;
    for (const auto& [l, sc] : per_cluster)
      if (l != label[i]) b = std::min(b, sc.first / sc.second);
    total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(pts.size());
}

}  // namespace

TEST_CASE("cosine distance follows its closed forms") {
  std::vector<float> a{1, 0, 0}, b{0, 1, 0}, na{-1, 0, 0}, z{0, 0, 0};
  CHECK(cosine_distance(a, a) == doctest::Approx(0.0));
  CHECK(cosine_distance(a, b) == doctest::Approx(1.0));
  CHECK(cosine_distance(a, na) == doctest::Approx(2.0));
  CHECK(cosine_distance(a, b) == cosine_distance(b, a));
  std::vector<float> a5{5, 0, 0};
  CHECK(std::abs(cosine_distance(a5, b) - cosine_distance(a, b)) < 1e-6);
  CHECK_THROWS_AS(cosine_distance(a, z), std::invalid_argument);
  CHECK_THROWS_AS(cosine_distance(a, {1, 2}), std::invalid_argument);
}

TEST_CASE("embeddings match a direct pooled forward and are deterministic") {
  auto idx = fixture_cohort();
  Rng rng(3);
  model::Encoder enc(micro_enc(), rng, "e");
  auto recs = extract_embeddings(enc, idx, 32);
  CHECK(recs.size() == idx.records.size());  // one per (subject, session, modality)
  auto recs2 = extract_embeddings(enc, idx, 32);
  for (size_t i = 0; i < recs.size(); ++i) CHECK(recs[i].embedding == recs2[i].embedding);

  // independent pooling oracle on the first record
  Volume v = read_volume(idx.resolve(idx.records[0].path));
  Tensor x({1, 1, 32, 32, 32});
  for (int64_t z = 0; z < 32; ++z)
    for (int64_t y = 0; y < 32; ++y)
      for (int64_t xx = 0; xx < 32; ++xx)
        x[(z * 32 + y) * 32 + xx] = v.data[((z + 8) * 48 + y + 8) * 48 + xx + 8];
  enc.forward(x);
  const Tensor& bott = enc.stage_outputs().back();
  int64_t C = bott.dim(1), S = bott.dim(2) * bott.dim(3) * bott.dim(4);
  for (int64_t c = 0; c < C; ++c) {
    double s = 0;
    for (int64_t i = 0; i < S; ++i) s += bott[c * S + i];
    CHECK(std::abs(recs[0].embedding[static_cast<size_t>(c)] - s / S) < 1e-6);
  }
  CHECK_THROWS_AS(extract_embeddings(enc, idx, 30), std::invalid_argument);
}

TEST_CASE("alignment statistics equal an exhaustive pencil-and-paper enumeration") {
  // 2 subjects x 2 modalities, one session each
  std::vector<EmbeddingRecord> rs{
      rec("s1", 0, "A", {1, 0}), rec("s1", 0, "B", {0, 1}),
      rec("s2", 0, "A", {1, 1}), rec("s2", 0, "B", {-1, 0})};
  auto rep = alignment_report(rs);
  // cross-modality pairs: (s1 A,B) d=1; (s2 A,B) d=1+1/sqrt2
  double d1 = 1.0, d2 = 1.0 + 1.0 / std::sqrt(2.0);
  double mean = (d1 + d2) / 2;
  double sd = std::sqrt(((d1 - mean) * (d1 - mean) + (d2 - mean) * (d2 - mean)) / 2);
  CHECK(rep.cross_modality.n_pairs == 2);
  CHECK(rep.cross_modality.mean == doctest::Approx(mean));
  CHECK(rep.cross_modality.std_dev == doctest::Approx(sd));
  // cross-subject on modality A: single pair (1,0) vs (1,1), d = 1 - 1/sqrt2
  CHECK(rep.reference_modality == "A");
  CHECK(rep.cross_subject.n_pairs == 1);
  CHECK(rep.cross_subject.mean == doctest::Approx(1.0 - 1.0 / std::sqrt(2.0)));
  CHECK(rep.cross_subject.std_dev == doctest::Approx(0.0));
}

TEST_CASE("identical embeddings align perfectly and ordering does not matter") {
  std::vector<EmbeddingRecord> rs{
      rec("s1", 0, "A", {1, 2}), rec("s1", 0, "B", {1, 2}),
      rec("s2", 0, "A", {1, 2}), rec("s2", 0, "B", {1, 2})};
  auto rep = alignment_report(rs);
  CHECK(rep.cross_modality.mean == doctest::Approx(0.0));
  CHECK(rep.cross_modality.std_dev == doctest::Approx(0.0));

  std::vector<EmbeddingRecord> mixed{
      rec("s2", 0, "B", {-1, 0}), rec("s1", 0, "A", {1, 0}),
      rec("s2", 0, "A", {1, 1}), rec("s1", 0, "B", {0, 1})};
  std::vector<EmbeddingRecord> sorted_{
      rec("s1", 0, "A", {1, 0}), rec("s1", 0, "B", {0, 1}),
      rec("s2", 0, "A", {1, 1}), rec("s2", 0, "B", {-1, 0})};
  auto ra = alignment_report(mixed, "A"), rb = alignment_report(sorted_, "A");
  CHECK(ra.cross_modality.mean == doctest::Approx(rb.cross_modality.mean));
  CHECK(ra.cross_subject.mean == doctest::Approx(rb.cross_subject.mean));
}

TEST_CASE("degenerate record sets are rejected") {
  std::vector<EmbeddingRecord> one_subj{rec("s1", 0, "A", {1, 0}), rec("s1", 0, "B", {0, 1})};
  CHECK_THROWS_AS(alignment_report(one_subj), std::invalid_argument);
  std::vector<EmbeddingRecord> one_mod{rec("s1", 0, "A", {1, 0}), rec("s2", 0, "A", {0, 1})};
  CHECK_THROWS_AS(alignment_report(one_mod), std::invalid_argument);
  std::vector<EmbeddingRecord> ok{rec("s1", 0, "A", {1, 0}), rec("s1", 0, "B", {0, 1}),
                                  rec("s2", 0, "A", {1, 1}), rec("s2", 0, "B", {0, 1})};
  CHECK_THROWS_AS(alignment_report(ok, "Z"), std::invalid_argument);
}

TEST_CASE("report text uses mean-plus-minus-std with four decimals") {
  std::vector<EmbeddingRecord> rs{
      rec("s1", 0, "A", {1, 0}), rec("s1", 0, "B", {1, 0}),
      rec("s2", 0, "A", {0, 1}), rec("s2", 0, "B", {0, 1})};
  auto text = alignment_report(rs).format_text();
  CHECK(text.find("0.0000 ± 0.0000") != std::string::npos);
  CHECK(text.find("1.0000 ± 0.0000") != std::string::npos);
}

TEST_CASE("two-dimensional reduction separates planted clusters") {
  Rng rng(9);
  std::vector<std::vector<float>> vecs;
  std::vector<int> labels;
  std::vector<EmbeddingRecord> recs;
  const std::vector<std::vector<float>> centers{
      {10, 0, 0, 0}, {0, 10, 0, 0}, {0, 0, 10, 5}};
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 10; ++i) {
      std::vector<float> v = centers[static_cast<size_t>(c)];
      for (auto& x : v) x += static_cast<float>(rng.normal() * 0.05);
      vecs.push_back(v);
      labels.push_back(c);
      recs.push_back(rec("s" + std::to_string(c), i, "M" + std::to_string(c), v));
    }
  auto coords = pca_2d(vecs);
  CHECK(silhouette(coords, labels) > 0.5);

  std::string path = "/tmp/mcl3d_coords.tsv";
  tsne_export(recs, path);
  auto pts = read_coords(path);
  REQUIRE(pts.size() == recs.size());
  for (size_t i = 0; i < pts.size(); ++i) {
    CHECK(pts[i].subject_id == recs[i].subject_id);
    CHECK(pts[i].x == doctest::Approx(coords[i][0]));
    CHECK(pts[i].y == doctest::Approx(coords[i][1]));
  }
  // run-to-run determinism
  tsne_export(recs, "/tmp/mcl3d_coords2.tsv");
  std::ifstream f1(path), f2("/tmp/mcl3d_coords2.tsv");
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  fs::remove(path);
  fs::remove("/tmp/mcl3d_coords2.tsv");

  CHECK_THROWS_AS(tsne_export({recs[0], recs[1]}, "/tmp/x.tsv"), std::invalid_argument);
}

TEST_CASE("scatter plots come out as well-formed png files") {
  std::vector<ScatterPoint> pts{{"s1", "M0", 0.0, 0.0},
                                {"s1", "M1", 1.0, 0.5},
                                {"s2", "M0", -1.0, 2.0},
                                {"s2", "M1", 0.5, -1.5}};
  std::string path = "/tmp/mcl3d_scatter.png";
  plot_scatter_png(pts, path, 200, 160);
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  unsigned char sig[8];
  f.read(reinterpret_cast<char*>(sig), 8);
  CHECK(sig[0] == 0x89);
  CHECK(sig[1] == 'P');
  CHECK(sig[2] == 'N');
  CHECK(sig[3] == 'G');
  f.seekg(0, std::ios::end);
  CHECK(f.tellg() > 100);
  fs::remove(path);
  CHECK_THROWS_AS(plot_scatter_png({}, "/tmp/x.png"), std::invalid_argument);
}

TEST_CASE("pretraining checkpoints reload into a working encoder") {
  auto idx = fixture_cohort();
  pretrain::PretrainConfig pc;
  pc.variant = pretrain::Variant::MCL;
  pc.total_steps = 1;
  pc.batch_size = 2;
  pc.patch_size = 32;
  pc.queue_capacity = 8;
  pc.encoder = micro_enc();
  pc.fpn_dim = 8;
  pc.out_dir = "/tmp/mcl3d_embed_pre";
  fs::create_directories(pc.out_dir);
  pretrain::Trainer tr(pc, idx);
  tr.step();
  auto ck = tr.make_checkpoint();
  ck.save(pc.out_dir + "/ck.bin");

  auto enc = load_pretrained_encoder(pc.out_dir + "/ck.bin");
  auto recs = extract_embeddings(*enc, idx, 32);
  CHECK(recs.size() == idx.records.size());
  auto rep = alignment_report(recs);
  CHECK(rep.cross_modality.mean >= 0.0);
  CHECK(rep.cross_modality.mean <= 2.0);
  CHECK(rep.cross_subject.std_dev >= 0.0);
  fs::remove_all(pc.out_dir);
}

TEST_CASE("a random encoder shows no spurious alignment from plumbing") {
  auto idx = fixture_cohort();
  Rng rng(17);
  model::Encoder enc(micro_enc(), rng, "e");
  auto rep = alignment_report(extract_embeddings(enc, idx, 32));
  // same order of magnitude: neither statistic dwarfs the other
  CHECK(rep.cross_modality.mean < 10 * rep.cross_subject.mean + 1e-9);
  CHECK(rep.cross_subject.mean < 10 * rep.cross_modality.mean + 1e-9);
}
