#include "mcl3d/synthcohort.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace mcl3d {

// ----------------------------------------------------------- CohortIndex

std::map<CohortIndex::SessionKey, std::vector<size_t>> CohortIndex::sessions() const {
  std::map<SessionKey, std::vector<size_t>> out;
  for (size_t i = 0; i < records.size(); ++i)
    out[{records[i].subject_id, records[i].session_id}].push_back(i);
  return out;
}

std::vector<std::string> CohortIndex::subject_ids() const {
  std::vector<std::string> out;
  for (const auto& r : records)
    if (out.empty() || out.back() != r.subject_id) {
      bool seen = false;
      for (const auto& s : out) seen = seen || s == r.subject_id;
      if (!seen) out.push_back(r.subject_id);
    }
  return out;
}

CohortIndex CohortIndex::filter_split(const std::string& split) const {
  CohortIndex out;
  out.root_dir = root_dir;
  for (const auto& r : records)
    if (r.split == split) out.records.push_back(r);
  return out;
}

std::string CohortIndex::resolve(const std::string& rel_path) const {
  if (rel_path.empty() || rel_path.front() == '/') return rel_path;
  return (fs::path(root_dir) / rel_path).string();
}

void CohortIndex::validate() const {
  std::map<std::tuple<std::string, int, std::string>, int> seen;
  for (const auto& r : records)
    if (++seen[{r.subject_id, r.session_id, r.modality}] > 1)
      throw std::invalid_argument("duplicate (subject, session, modality): " + r.subject_id +
                                  "/" + std::to_string(r.session_id) + "/" + r.modality);
}

void CohortIndex::save(const std::string& manifest_path) const {
  std::ofstream f(manifest_path);
  if (!f) throw std::runtime_error("cannot write " + manifest_path);
  for (const auto& r : records) {
    json j{{"subject", r.subject_id}, {"session", r.session_id},  {"modality", r.modality},
           {"path", r.path},          {"split", r.split},         {"center", r.center_id},
           {"shape", r.shape}};
    if (!r.lesion_path.empty()) j["lesion"] = r.lesion_path;
    f << j.dump() << "\n";
  }
}

CohortIndex CohortIndex::load(const std::string& manifest_path) {
  std::ifstream f(manifest_path);
  if (!f) throw std::runtime_error("cannot read " + manifest_path);
  CohortIndex idx;
  idx.root_dir = fs::path(manifest_path).parent_path().string();
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    ScanRecord r;
    r.subject_id = j.at("subject");
    r.session_id = j.at("session");
    r.modality = j.at("modality");
    r.path = j.at("path");
    r.split = j.value("split", "pretrain");
    r.center_id = j.value("center", 0);
    if (j.contains("shape")) r.shape = j["shape"].get<std::array<int64_t, 3>>();
    r.lesion_path = j.value("lesion", "");
    idx.records.push_back(std::move(r));
  }
  idx.validate();
  return idx;
}

namespace synth {

void CohortSpec::validate() const {
  if (n_subjects < 2) throw std::invalid_argument("CohortSpec: n_subjects must be >= 2");
  if (sessions_per_subject < 1) throw std::invalid_argument("CohortSpec: sessions_per_subject >= 1");
  if (modalities.empty()) throw std::invalid_argument("CohortSpec: at least one modality");
  if (lesion_fraction < 0 || lesion_fraction > 1)
    throw std::invalid_argument("CohortSpec: lesion_fraction in [0,1]");
  for (auto d : volume_shape)
    if (d < 16) throw std::invalid_argument("CohortSpec: volume_shape too small");
  if (n_centers < 1) throw std::invalid_argument("CohortSpec: n_centers >= 1");
}

namespace {

struct Blob {
  double c[3];
  double sigma;
  double amp;
};

}  // namespace

SubjectAnatomy make_anatomy(const CohortSpec& spec, int subject) {
  Rng rng = Rng(spec.seed).fork(11).fork(static_cast<uint64_t>(subject));
  const auto& sh = spec.volume_shape;
  SubjectAnatomy a;
  a.structure_field = Tensor({sh[0], sh[1], sh[2]});
  a.brain_mask = Tensor({sh[0], sh[1], sh[2]});

  // brain support: subject-specific ellipsoid
  double rad[3];
  for (int i = 0; i < 3; ++i) rad[i] = (0.30 + 0.10 * rng.uniform()) * static_cast<double>(sh[i]);

  // smooth internal structure: superposition of random blobs
  std::vector<Blob> blobs;
  int n_blobs = 10 + static_cast<int>(rng.uniform_int(7));
  for (int b = 0; b < n_blobs; ++b) {
    Blob bl;
    for (int i = 0; i < 3; ++i)
      bl.c[i] = sh[i] / 2.0 + rng.uniform(-0.5, 0.5) * rad[i];
    bl.sigma = (0.05 + 0.15 * rng.uniform()) * static_cast<double>(sh[0]);
    bl.amp = rng.uniform(0.8, 2.0) * (rng.bernoulli(0.5) ? -1.0 : 1.0);
    blobs.push_back(bl);
  }

  // subject-specific large-scale signature: a linear intensity ramp along a
  // random direction, a global morphological trait shared by all modalities
  double grad_dir[3];
  double gn = 0;
  for (int i = 0; i < 3; ++i) {
    grad_dir[i] = rng.normal();
    gn += grad_dir[i] * grad_dir[i];
  }
  gn = std::sqrt(std::max(gn, 1e-12));
  double grad_amp = rng.uniform(0.4, 0.8);
  for (int i = 0; i < 3; ++i) grad_dir[i] *= grad_amp / gn;

  double smax = 1e-9, smin = 1e9;
  int64_t i = 0;
  for (int64_t z = 0; z < sh[0]; ++z)
    for (int64_t y = 0; y < sh[1]; ++y)
      for (int64_t x = 0; x < sh[2]; ++x, ++i) {
        double dz = (z - sh[0] / 2.0) / rad[0], dy = (y - sh[1] / 2.0) / rad[1],
               dx = (x - sh[2] / 2.0) / rad[2];
        double r2 = dz * dz + dy * dy + dx * dx;
        if (r2 >= 1.0) continue;
        a.brain_mask[i] = 1.f;
        double s = 0.3;
        for (const auto& b : blobs) {
          double ez = (z - b.c[0]) / b.sigma, ey = (y - b.c[1]) / b.sigma,
                 ex = (x - b.c[2]) / b.sigma;
          s += b.amp * std::exp(-0.5 * (ez * ez + ey * ey + ex * ex));
        }
        // cortical rim gradient keeps edges informative near the boundary
        s += 0.4 * r2;
        s += grad_dir[0] * dz + grad_dir[1] * dy + grad_dir[2] * dx;
        a.structure_field[i] = static_cast<float>(s);
        smax = std::max(smax, s);
        smin = std::min(smin, s);
      }
  // normalize to [0,1] inside the brain
  double span = smax - smin > 1e-9 ? smax - smin : 1.0;
  for (int64_t j = 0; j < a.structure_field.numel(); ++j)
    if (a.brain_mask[j] != 0.f)
      a.structure_field[j] = static_cast<float>((a.structure_field[j] - smin) / span);
  return a;
}

Tensor apply_modality(const Tensor& structure_field, const Tensor& brain_mask, int modality_idx,
                      Rng& noise_rng) {
  // fixed per-modality transfer: even ids monotone, odd ids inverted+bent
  Rng coef_rng = Rng(0x6d6f64ULL).fork(static_cast<uint64_t>(modality_idx));
  double base = coef_rng.uniform(30, 60);
  double gain = coef_rng.uniform(30, 60);
  double bend = coef_rng.uniform(0.5, 2.0);
  bool invert = modality_idx % 2 == 1;
  double noise_sigma = coef_rng.uniform(0.2, 0.5);

  Tensor out(structure_field.shape);
  for (int64_t i = 0; i < out.numel(); ++i) {
    if (brain_mask[i] == 0.f) continue;
    double s = std::clamp(static_cast<double>(structure_field[i]), 0.0, 1.0);
    double t = invert ? 1.0 - s : s;
    double v = base + gain * std::pow(t, bend) + 0.15 * gain * std::sin(3.0 * M_PI * s);
    out[i] = static_cast<float>(v + noise_sigma * noise_rng.normal());
    if (out[i] <= 0.f) out[i] = 0.01f;  // keep in-brain voxels inside the nonzero mask
  }
  return out;
}

namespace {

Tensor shift_integer(const Tensor& t, const int64_t off[3]) {
  Tensor out(t.shape);
  int64_t n0 = t.dim(0), n1 = t.dim(1), n2 = t.dim(2);
  for (int64_t z = 0; z < n0; ++z)
    for (int64_t y = 0; y < n1; ++y)
      for (int64_t x = 0; x < n2; ++x) {
        int64_t sz = z - off[0], sy = y - off[1], sx = x - off[2];
        float v = 0.f;
        if (sz >= 0 && sz < n0 && sy >= 0 && sy < n1 && sx >= 0 && sx < n2)
          v = t[(sz * n1 + sy) * n2 + sx];
        out[(z * n1 + y) * n2 + x] = v;
      }
  return out;
}

}  // namespace

CohortIndex generate_cohort(const CohortSpec& spec, const std::string& out_dir) {
  spec.validate();
  fs::create_directories(out_dir);
  CohortIndex idx;
  idx.root_dir = out_dir;
  bool downstream = spec.lesion_fraction > 0;

  for (int s = 0; s < spec.n_subjects; ++s) {
    char sid[16];
    std::snprintf(sid, sizeof(sid), "sub%03d", s);
    SubjectAnatomy anat = make_anatomy(spec, s);
    Rng subj_rng = Rng(spec.seed).fork(12).fork(static_cast<uint64_t>(s));

    std::string split;
    if (downstream)
      split = "finetune";
    else
      split = (s % 10 == 9) ? "validation" : "pretrain";
    int center = s % spec.n_centers;

    // lesion shared across sessions/modalities of the subject
    Tensor lesion;
    bool has_lesion = downstream && subj_rng.bernoulli(spec.lesion_fraction);
    if (has_lesion) {
      lesion = Tensor(anat.brain_mask.shape);
      const auto& sh = spec.volume_shape;
      int n_blobs = 1 + static_cast<int>(subj_rng.uniform_int(3));
      for (int b = 0; b < n_blobs; ++b) {
        double c[3], r = subj_rng.uniform(4.0, 8.0);
        // rejection-sample a center inside the brain
        for (int tries = 0; tries < 64; ++tries) {
          for (int i = 0; i < 3; ++i) c[i] = subj_rng.uniform(0.2, 0.8) * static_cast<double>(sh[i]);
          int64_t ci = ((static_cast<int64_t>(c[0]) * sh[1]) + static_cast<int64_t>(c[1])) * sh[2] +
                       static_cast<int64_t>(c[2]);
          if (anat.brain_mask[ci] != 0.f) break;
        }
        int64_t i = 0;
        for (int64_t z = 0; z < sh[0]; ++z)
          for (int64_t y = 0; y < sh[1]; ++y)
            for (int64_t x = 0; x < sh[2]; ++x, ++i) {
              double dz = z - c[0], dy = y - c[1], dx = x - c[2];
              if (dz * dz + dy * dy + dx * dx < r * r && anat.brain_mask[i] != 0.f) lesion[i] = 1.f;
            }
      }
    }

    for (int ses = 0; ses < spec.sessions_per_subject; ++ses) {
      Rng ses_rng = subj_rng.fork(static_cast<uint64_t>(ses) + 17);
      int64_t jitter[3];
      for (auto& j : jitter) j = ses_rng.uniform_int(5) - 2;  // +-2 voxels, shared in-session
      Tensor field = shift_integer(anat.structure_field, jitter);
      Tensor mask = shift_integer(anat.brain_mask, jitter);
      Tensor les = has_lesion ? shift_integer(lesion, jitter) : Tensor();

      std::string lesion_rel;
      if (has_lesion) {
        char nm[64];
        std::snprintf(nm, sizeof(nm), "%s_ses%d_lesion.nii.gz", sid, ses);
        Volume lv;
        lv.data = les;
        lv.modality = "lesion";
        write_nifti((fs::path(out_dir) / nm).string(), lv);
        lesion_rel = nm;
      }

      for (size_t m = 0; m < spec.modalities.size(); ++m) {
        Rng noise_rng = ses_rng.fork(1000 + m);
        Tensor img = apply_modality(field, mask, static_cast<int>(m), noise_rng);
        if (has_lesion) {
          // hyperintense blobs, scaled by the modality's in-brain std
          double mean = 0, var = 0;
          int64_t n = 0;
          for (int64_t i = 0; i < img.numel(); ++i)
            if (mask[i] != 0.f) {
              mean += img[i];
              ++n;
            }
          mean /= std::max<int64_t>(n, 1);
          for (int64_t i = 0; i < img.numel(); ++i)
            if (mask[i] != 0.f) var += (img[i] - mean) * (img[i] - mean);
          double sd = std::sqrt(var / std::max<int64_t>(n, 1));
          for (int64_t i = 0; i < img.numel(); ++i)
            if (les[i] != 0.f) img[i] += static_cast<float>(spec.lesion_intensity * sd);
        }
        Volume v;
        v.data = img;
        v.modality = spec.modalities[m];
        char nm[64];
        std::snprintf(nm, sizeof(nm), "%s_ses%d_%s.nii.gz", sid, ses, spec.modalities[m].c_str());
        write_nifti((fs::path(out_dir) / nm).string(), v);

        ScanRecord r;
        r.subject_id = sid;
        r.session_id = ses;
        r.modality = spec.modalities[m];
        r.path = nm;
        r.split = split;
        r.center_id = center;
        r.shape = spec.volume_shape;
        r.lesion_path = lesion_rel;
        idx.records.push_back(std::move(r));
      }
    }
  }
  idx.validate();
  idx.save((fs::path(out_dir) / "manifest.jsonl").string());
  return idx;
}

}  // namespace synth
}  // namespace mcl3d
