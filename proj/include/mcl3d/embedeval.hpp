#pragma once

#include <functional>

#include "mcl3d/cohort.hpp"
#include "mcl3d/model.hpp"

namespace mcl3d::embed {

struct EmbeddingRecord {
  std::string subject_id;
  int session_id = 0;
  std::string modality;
  std::vector<float> embedding;  // pooled bottleneck features, pre-projection
};

// Central crop (zero-padded when the volume is smaller), unmasked forward,
// global average of the deepest feature grid. One record per manifest scan.
std::vector<EmbeddingRecord> extract_embeddings(model::Encoder& enc, const CohortIndex& cohort,
                                                int64_t crop);

// Builds the online encoder stored in a pretraining checkpoint.
std::unique_ptr<model::Encoder> load_pretrained_encoder(const std::string& checkpoint_path);

// 1 - a.b / (|a||b|), in [0, 2]. A zero vector is a degeneracy error.
double cosine_distance(const std::vector<float>& a, const std::vector<float>& b);

struct PairStat {
  double mean = 0, std_dev = 0;
  int64_t n_pairs = 0;
};

struct AlignmentReport {
  PairStat cross_modality;  // same subject + session, different modalities
  PairStat cross_subject;   // different subjects, reference modality
  std::string reference_modality;

  std::string format_text() const;  // "mean ± std" to 4 decimals
};

// Cross-modality pairs are enumerated exhaustively within every
// (subject, session); cross-subject pairs use one randomly chosen session
// per subject, restricted to the reference modality (the cohort's first
// unless overridden).
AlignmentReport alignment_report(const std::vector<EmbeddingRecord>& records,
                                 const std::string& reference_modality = "", uint64_t seed = 0);

using Reducer2D =
    std::function<std::vector<std::array<double, 2>>(const std::vector<std::vector<float>>&)>;

// Deterministic principal-component projection to 2D. Eigenvector signs are
// fixed so repeated runs give identical coordinates.
std::vector<std::array<double, 2>> pca_2d(const std::vector<std::vector<float>>& vecs);

// Writes tab-separated (subject_id, session_id, modality, x, y) rows.
void tsne_export(const std::vector<EmbeddingRecord>& records, const std::string& out_path,
                 const Reducer2D& reduce = pca_2d);

struct ScatterPoint {
  std::string subject_id;
  std::string modality;
  double x = 0, y = 0;
};

std::vector<ScatterPoint> read_coords(const std::string& path);

// Static scatter, one color per modality, one marker shape per subject.
void plot_scatter_png(const std::vector<ScatterPoint>& points, const std::string& out_path,
                      int width = 640, int height = 480);

}  // namespace mcl3d::embed
