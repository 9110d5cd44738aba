#include "mcl3d/embedeval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "mcl3d/rng.hpp"
#include "mcl3d/volume.hpp"

namespace mcl3d::embed {

namespace {

// Window of `crop` per axis anchored at `start` (may be negative);
// out-of-range source voxels stay zero.
Tensor window_at(const Tensor& vol, const int64_t start[3], int64_t crop) {
  Tensor out({1, 1, crop, crop, crop});
  for (int64_t z = 0; z < crop; ++z) {
    int64_t sz = z + start[0];
    if (sz < 0 || sz >= vol.dim(0)) continue;
    for (int64_t y = 0; y < crop; ++y) {
      int64_t sy = y + start[1];
      if (sy < 0 || sy >= vol.dim(1)) continue;
      for (int64_t x = 0; x < crop; ++x) {
        int64_t sx = x + start[2];
        if (sx < 0 || sx >= vol.dim(2)) continue;
        out[(z * crop + y) * crop + x] = vol[(sz * vol.dim(1) + sy) * vol.dim(2) + sx];
      }
    }
  }
  return out;
}

// Single centered window; zero-padded when the scan is smaller.
std::vector<int64_t> tile_starts(int64_t dim, int64_t crop) {
  return {(dim - crop) / 2};
}

double mean_of(const std::vector<double>& xs) {
  double s = 0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

PairStat stat_of(const std::vector<double>& xs) {
  PairStat st;
  st.n_pairs = static_cast<int64_t>(xs.size());
  if (xs.empty()) return st;
  st.mean = mean_of(xs);
  double v = 0;
  for (double x : xs) v += (x - st.mean) * (x - st.mean);
  st.std_dev = std::sqrt(v / static_cast<double>(xs.size()));
  return st;
}

std::string fmt4(double x) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << x;
  return os.str();
}

}  // namespace

std::vector<EmbeddingRecord> extract_embeddings(model::Encoder& enc, const CohortIndex& cohort,
                                                int64_t crop) {
  if (crop <= 0 || crop % enc.config().bottleneck_stride() != 0)
    throw std::invalid_argument("crop must be a positive multiple of the bottleneck stride");
  std::vector<EmbeddingRecord> out;
  out.reserve(cohort.records.size());
  for (const auto& rec : cohort.records) {
    Volume v = read_volume(cohort.resolve(rec.path));
    auto sz = tile_starts(v.data.dim(0), crop);
    auto sy = tile_starts(v.data.dim(1), crop);
    auto sx = tile_starts(v.data.dim(2), crop);
    std::vector<double> acc;
    int64_t n_windows = 0;
    for (int64_t wz : sz)
      for (int64_t wy : sy)
        for (int64_t wx : sx) {
          int64_t start[3] = {wz, wy, wx};
          enc.forward(window_at(v.data, start, crop));
          Tensor pooled = model::pooled_mean(enc.stage_outputs().back());
          if (acc.empty()) acc.assign(pooled.numel(), 0.0);
          for (int64_t i = 0; i < pooled.numel(); ++i) acc[static_cast<size_t>(i)] += pooled[i];
          ++n_windows;
        }
    EmbeddingRecord r;
    r.subject_id = rec.subject_id;
    r.session_id = rec.session_id;
    r.modality = rec.modality;
    r.embedding.resize(acc.size());
    for (size_t i = 0; i < acc.size(); ++i)
      r.embedding[i] = static_cast<float>(acc[i] / static_cast<double>(n_windows));
    for (float f : r.embedding)
      if (!std::isfinite(f)) throw std::runtime_error("non-finite embedding for " + rec.path);
    out.push_back(std::move(r));
  }
  return out;
}

std::unique_ptr<model::Encoder> load_pretrained_encoder(const std::string& checkpoint_path) {
  auto ck = model::Checkpoint::load(checkpoint_path);
  model::EncoderConfig cfg = model::encoder_config_from_meta(ck.meta);
  Rng rng(0);
  auto enc = std::make_unique<model::Encoder>(cfg, rng, "online");
  nn::ParamRefs ps;
  enc->collect(ps);
  model::unpack_params(ck, ps);
  return enc;
}

double cosine_distance(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_distance: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na < 1e-24 || nb < 1e-24)
    throw std::invalid_argument("cosine_distance: zero vector");
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

AlignmentReport alignment_report(const std::vector<EmbeddingRecord>& records,
                                 const std::string& reference_modality, uint64_t seed) {
  std::vector<std::string> subjects, modalities;
  for (const auto& r : records) {
    if (std::find(subjects.begin(), subjects.end(), r.subject_id) == subjects.end())
      subjects.push_back(r.subject_id);
    if (std::find(modalities.begin(), modalities.end(), r.modality) == modalities.end())
      modalities.push_back(r.modality);
  }
  if (subjects.size() < 2 || modalities.size() < 2)
    throw std::invalid_argument("alignment_report needs at least 2 subjects and 2 modalities");

  AlignmentReport rep;
  rep.reference_modality = reference_modality.empty() ? modalities.front() : reference_modality;
  if (std::find(modalities.begin(), modalities.end(), rep.reference_modality) == modalities.end())
    throw std::invalid_argument("reference modality '" + rep.reference_modality +
                                "' not present in records");

  // every cross-modality pair within a (subject, session)
  std::map<std::pair<std::string, int>, std::vector<const EmbeddingRecord*>> by_session;
  for (const auto& r : records) by_session[{r.subject_id, r.session_id}].push_back(&r);
  std::vector<double> xmod;
  for (const auto& [key, group] : by_session)
    for (size_t i = 0; i < group.size(); ++i)
      for (size_t j = i + 1; j < group.size(); ++j)
        if (group[i]->modality != group[j]->modality)
          xmod.push_back(cosine_distance(group[i]->embedding, group[j]->embedding));
  rep.cross_modality = stat_of(xmod);

  // one randomly chosen session per subject, reference modality only
  std::map<std::string, std::vector<const EmbeddingRecord*>> ref_by_subject;
  for (const auto& r : records)
    if (r.modality == rep.reference_modality) ref_by_subject[r.subject_id].push_back(&r);
  Rng rng = Rng(seed).fork(55);
  std::vector<const EmbeddingRecord*> picks;
  for (const auto& s : subjects) {
    auto it = ref_by_subject.find(s);
    if (it == ref_by_subject.end() || it->second.empty()) continue;
    picks.push_back(it->second[static_cast<size_t>(
        rng.uniform_int(static_cast<int64_t>(it->second.size())))]);
  }
  std::vector<double> xsub;
  for (size_t i = 0; i < picks.size(); ++i)
    for (size_t j = i + 1; j < picks.size(); ++j)
      xsub.push_back(cosine_distance(picks[i]->embedding, picks[j]->embedding));
  rep.cross_subject = stat_of(xsub);
  return rep;
}

std::string AlignmentReport::format_text() const {
  std::ostringstream os;
  os << "cross-modality alignment:   " << fmt4(cross_modality.mean) << " ± "
     << fmt4(cross_modality.std_dev) << "  (n=" << cross_modality.n_pairs << ")\n";
  os << "cross-subject separability: " << fmt4(cross_subject.mean) << " ± "
     << fmt4(cross_subject.std_dev) << "  (n=" << cross_subject.n_pairs << ", modality "
     << reference_modality << ")\n";
  return os.str();
}

std::vector<std::array<double, 2>> pca_2d(const std::vector<std::vector<float>>& vecs) {
  const auto n = static_cast<Eigen::Index>(vecs.size());
  if (n < 3) throw std::invalid_argument("pca_2d needs at least 3 vectors");
  const auto d = static_cast<Eigen::Index>(vecs.front().size());
  for (const auto& v : vecs)
    if (static_cast<Eigen::Index>(v.size()) != d)
      throw std::invalid_argument("pca_2d: inconsistent dimensionality");
  Eigen::MatrixXd X(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j)
      X(i, j) = vecs[static_cast<size_t>(i)][static_cast<size_t>(j)];
  Eigen::RowVectorXd mu = X.colwise().mean();
  X.rowwise() -= mu;
  Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  std::vector<std::array<double, 2>> out(static_cast<size_t>(n), {0.0, 0.0});
  for (int c = 0; c < 2 && c < d; ++c) {
    Eigen::VectorXd axis = es.eigenvectors().col(d - 1 - c);
    // pin the sign to the largest-magnitude coefficient for reproducibility
    Eigen::Index imax = 0;
    axis.cwiseAbs().maxCoeff(&imax);
    if (axis(imax) < 0) axis = -axis;
    Eigen::VectorXd proj = X * axis;
    for (Eigen::Index i = 0; i < n; ++i)
      out[static_cast<size_t>(i)][static_cast<size_t>(c)] = proj(i);
  }
  return out;
}

void tsne_export(const std::vector<EmbeddingRecord>& records, const std::string& out_path,
                 const Reducer2D& reduce) {
  if (records.size() < 3) throw std::invalid_argument("tsne_export needs at least 3 records");
  std::vector<std::vector<float>> vecs;
  vecs.reserve(records.size());
  for (const auto& r : records) vecs.push_back(r.embedding);
  auto coords = reduce(vecs);
  if (coords.size() != records.size())
    throw std::runtime_error("2D reducer returned the wrong number of rows");
  std::ofstream f(out_path);
  if (!f) throw std::runtime_error("cannot open " + out_path + " for writing");
  f << "subject_id\tsession_id\tmodality\tx\ty\n";
  f.precision(17);
  for (size_t i = 0; i < records.size(); ++i)
    f << records[i].subject_id << '\t' << records[i].session_id << '\t' << records[i].modality
      << '\t' << coords[i][0] << '\t' << coords[i][1] << '\n';
}

std::vector<ScatterPoint> read_coords(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::string line;
  std::getline(f, line);  // header
  std::vector<ScatterPoint> out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    ScatterPoint p;
    std::string session;
    if (!std::getline(is, p.subject_id, '\t') || !std::getline(is, session, '\t') ||
        !std::getline(is, p.modality, '\t') || !(is >> p.x >> p.y))
      throw std::runtime_error("malformed coordinate row: " + line);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace mcl3d::embed
