#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mcl3d/config.hpp"
#include "mcl3d/embedeval.hpp"
#include "mcl3d/finetune.hpp"
#include "mcl3d/model.hpp"
#include "mcl3d/objectives.hpp"
#include "mcl3d/preproc.hpp"
#include "mcl3d/pretrain.hpp"
#include "mcl3d/synthcohort.hpp"

namespace py = pybind11;
using namespace mcl3d;

namespace {

Tensor tensor_from_array(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  Tensor t(std::vector<int64_t>(a.shape(), a.shape() + a.ndim()));
  std::copy(a.data(), a.data() + a.size(), t.data.begin());
  return t;
}

py::array_t<float> array_from_tensor(const Tensor& t) {
  py::array_t<float> a(t.shape);
  std::copy(t.data.begin(), t.data.end(), a.mutable_data());
  return a;
}

template <typename Cfg, config::Binder (*Bind)(Cfg&)>
Cfg config_from_dict(Cfg base, const py::dict& kv) {
  auto binder = Bind(base);
  for (auto item : kv)
    binder.set(py::str(item.first), py::str(item.second));
  return base;
}

}  // namespace

PYBIND11_MODULE(_mcl3d, m) {
  m.doc() = "3D multi-modal contrastive pretraining and lesion segmentation core";

  m.def(
      "generate_cohort",
      [](const py::dict& kv, const std::string& out_dir) {
        auto spec = config_from_dict<synth::CohortSpec, config::bind_cohort_spec>({}, kv);
        auto idx = synth::generate_cohort(spec, out_dir);
        py::list recs;
        for (const auto& r : idx.records) {
          py::dict d;
          d["subject_id"] = r.subject_id;
          d["session_id"] = r.session_id;
          d["modality"] = r.modality;
          d["path"] = r.path;
          d["split"] = r.split;
          d["center_id"] = r.center_id;
          d["lesion_path"] = r.lesion_path;
          recs.append(d);
        }
        return recs;
      },
      py::arg("spec"), py::arg("out_dir"),
      "Write a synthetic multi-modal cohort and return its manifest records.");

  m.def(
      "preprocess_volume",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& data,
         std::array<double, 3> spacing, const std::string& orientation) {
        if (data.ndim() != 3) throw std::invalid_argument("expected a 3D array");
        Volume v;
        v.data = tensor_from_array(data);
        v.spacing = spacing;
        v.orientation = orientation;
        auto res = preproc::preprocess_volume(v);
        py::dict out;
        out["kept"] = res.kept;
        out["reason"] = res.reason;
        if (res.kept) out["data"] = array_from_tensor(res.volume.data);
        return out;
      },
      py::arg("data"), py::arg("spacing") = std::array<double, 3>{1, 1, 1},
      py::arg("orientation") = "RAS",
      "Reorient, resample, crop, filter and normalize one scan.");

  m.def(
      "info_nce",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& q,
         const py::array_t<float, py::array::c_style | py::array::forcecast>& k,
         const std::vector<std::string>& subjects,
         const py::array_t<float, py::array::c_style | py::array::forcecast>& negatives,
         const std::vector<std::string>& negative_subjects, double temperature) {
        Tensor qt = tensor_from_array(q), kt = tensor_from_array(k);
        int64_t cap = std::max<int64_t>(1, negatives.size() ? negatives.shape(0) : 1);
        objectives::NegativeQueue queue(cap, qt.dim(1));
        if (negatives.size()) queue.enqueue(tensor_from_array(negatives), negative_subjects);
        auto res = objectives::info_nce(qt, kt, queue, subjects, temperature);
        return py::make_tuple(res.loss, array_from_tensor(res.d_q));
      },
      py::arg("q"), py::arg("k"), py::arg("subjects"),
      py::arg("negatives") = py::array_t<float>(), py::arg("negative_subjects") =
          std::vector<std::string>{},
      py::arg("temperature") = 0.2,
      "Contrastive loss of unit-norm queries/keys against a queue of negatives.");

  m.def("momentum_schedule", &model::momentum_schedule, py::arg("step"), py::arg("total_steps"),
        py::arg("m_start") = 0.996, py::arg("m_end") = 0.999, py::arg("ramp_fraction") = 0.2);

  m.def(
      "dice",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& a,
         const py::array_t<float, py::array::c_style | py::array::forcecast>& b) {
        return finetune::dice(tensor_from_array(a), tensor_from_array(b));
      },
      py::arg("pred"), py::arg("gt"));

  m.def("cosine_distance", &embed::cosine_distance, py::arg("a"), py::arg("b"));

  m.def(
      "run_pretraining",
      [](const py::dict& kv, const std::string& data_dir, const std::string& out_dir) {
        auto cfg =
            config_from_dict<pretrain::PretrainConfig, config::bind_pretrain>(
                pretrain::PretrainConfig::desk(), kv);
        cfg.out_dir = out_dir;
        auto idx = CohortIndex::load(data_dir + "/manifest.jsonl");
        return pretrain::run_pretraining(cfg, idx);
      },
      py::arg("config"), py::arg("data_dir"), py::arg("out_dir"),
      "Run self-supervised pretraining; returns the final checkpoint path.");

  m.def(
      "run_finetune",
      [](const py::dict& kv, const std::string& data_dir, const std::string& out_dir) {
        auto cfg = config_from_dict<finetune::FinetuneConfig, config::bind_finetune>({}, kv);
        cfg.out_dir = out_dir;
        auto idx = CohortIndex::load(data_dir + "/manifest.jsonl");
        auto samples = finetune::load_seg_samples(idx, cfg.modality);
        auto res = finetune::run_finetune(cfg, samples);
        py::list losses;
        for (const auto& s : res.metrics) losses.append(s.loss);
        return py::make_tuple(res.model_path, losses);
      },
      py::arg("config"), py::arg("data_dir"), py::arg("out_dir"),
      "Fine-tune lesion segmentation; returns (model path, per-step losses).");

  m.def(
      "evaluate_mean_dice",
      [](const std::string& model_path, const std::string& data_dir, const std::string& modality,
         int64_t window, double overlap) {
        auto seg = finetune::SegModel::load(model_path);
        auto idx = CohortIndex::load(data_dir + "/manifest.jsonl");
        auto samples = finetune::load_seg_samples(idx, modality);
        return finetune::evaluate_mean_dice(*seg, samples, window, overlap);
      },
      py::arg("model"), py::arg("data_dir"), py::arg("modality"), py::arg("window") = 64,
      py::arg("overlap") = 0.5);

  m.def(
      "alignment_report",
      [](const std::string& checkpoint, const std::string& data_dir, int64_t crop,
         uint64_t seed) {
        auto enc = embed::load_pretrained_encoder(checkpoint);
        auto idx = CohortIndex::load(data_dir + "/manifest.jsonl");
        auto rep = embed::alignment_report(embed::extract_embeddings(*enc, idx, crop), "", seed);
        py::dict d;
        d["cross_modality_mean"] = rep.cross_modality.mean;
        d["cross_modality_std"] = rep.cross_modality.std_dev;
        d["cross_subject_mean"] = rep.cross_subject.mean;
        d["cross_subject_std"] = rep.cross_subject.std_dev;
        d["reference_modality"] = rep.reference_modality;
        d["text"] = rep.format_text();
        return d;
      },
      py::arg("checkpoint"), py::arg("data_dir"), py::arg("crop") = 64, py::arg("seed") = 0);
}
