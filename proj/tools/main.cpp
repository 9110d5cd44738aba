#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "mcl3d/config.hpp"
#include "mcl3d/embedeval.hpp"
#include "mcl3d/finetune.hpp"
#include "mcl3d/png.hpp"
#include "mcl3d/preproc.hpp"
#include "mcl3d/pretrain.hpp"
#include "mcl3d/synthcohort.hpp"

namespace fs = std::filesystem;
using namespace mcl3d;

namespace {

struct KVOverrides {
  std::string config_file;
  std::vector<std::string> sets;  // key=value

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "key = value configuration file");
    app->add_option("--set", sets, "override a config key (key=value, repeatable)")
        ->type_name("KEY=VALUE");
  }

  // file first, then --set flags on top
  void apply(config::Binder& b) const {
    if (!config_file.empty()) b.apply(config::parse_kv_file(config_file));
    for (const auto& kv : sets) {
      auto eq = kv.find('=');
      if (eq == std::string::npos)
        throw config::ParseError("--set expects key=value, got '" + kv + "'");
      b.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
  }
};

std::vector<int> parse_center_split(const std::string& s) {
  if (s.rfind("center:", 0) != 0)
    throw config::ParseError("--split expects center:IDS, got '" + s + "'");
  std::vector<int> ids;
  std::istringstream is(s.substr(7));
  std::string tok;
  while (std::getline(is, tok, ',')) ids.push_back(std::stoi(tok));
  if (ids.empty()) throw config::ParseError("--split lists no center ids");
  return ids;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
}

int cmd_synth(const KVOverrides& kv, const std::string& out_dir) {
  synth::CohortSpec spec;
  auto binder = config::bind_cohort_spec(spec);
  kv.apply(binder);
  spec.validate();
  auto idx = synth::generate_cohort(spec, out_dir);
  binder.write_snapshot((fs::path(out_dir) / "config_resolved.txt").string());
  std::cerr << "wrote " << idx.records.size() << " scans to " << out_dir << "\n";
  return 0;
}

int cmd_preprocess(const std::string& data_dir, const std::string& out_dir,
                   double min_extent_mm) {
  auto idx = CohortIndex::load((fs::path(data_dir) / "manifest.jsonl").string());
  CohortIndex out;
  out.root_dir = out_dir;
  fs::create_directories(out_dir);
  int dropped = 0;
  for (auto rec : idx.records) {
    Volume v = read_volume(idx.resolve(rec.path));
    auto res = preproc::preprocess_volume(v, min_extent_mm);
    if (!res.kept) {
      ++dropped;
      std::cerr << "dropped " << rec.path << " (" << res.reason << ")\n";
      continue;
    }
    fs::create_directories((fs::path(out_dir) / rec.path).parent_path());
    write_volume((fs::path(out_dir) / rec.path).string(), res.volume);
    if (!rec.lesion_path.empty()) {
      // carry the lesion mask through the same reorient/resample/crop chain
      Volume les = read_volume(idx.resolve(rec.lesion_path));
      les.brain_mask = v.brain_mask;
      Volume l = preproc::reorient_ras(les);
      l = preproc::resample_isotropic(l, 1.0);
      for (auto& x : l.data.data) x = x >= 0.5f ? 1.f : 0.f;
      if (!l.brain_mask) l.brain_mask = res.volume.brain_mask;
      l = preproc::crop_to_bbox(l);
      fs::create_directories((fs::path(out_dir) / rec.lesion_path).parent_path());
      write_volume((fs::path(out_dir) / rec.lesion_path).string(), l);
    }
    rec.shape = {res.volume.dim(0), res.volume.dim(1), res.volume.dim(2)};
    out.records.push_back(rec);
  }
  out.save((fs::path(out_dir) / "manifest.jsonl").string());
  std::cerr << "kept " << out.records.size() << " scans, dropped " << dropped << "\n";
  return 0;
}

int cmd_pretrain(const KVOverrides& kv, const std::string& preset, const std::string& data_dir,
                 const std::string& out_dir, const std::string& split,
                 const std::string& resume) {
  pretrain::PretrainConfig cfg = config::pretrain_preset(preset);
  cfg.out_dir = out_dir;
  auto binder = config::bind_pretrain(cfg);
  kv.apply(binder);
  cfg.validate();
  auto idx = CohortIndex::load((fs::path(data_dir) / "manifest.jsonl").string());
  if (!split.empty()) {
    auto filtered = idx.filter_split(split);
    if (!filtered.records.empty()) idx = filtered;
  }
  fs::create_directories(out_dir);
  binder.write_snapshot((fs::path(out_dir) / "config_resolved.txt").string());
  std::string ck = pretrain::run_pretraining(cfg, idx, resume, &std::cerr);
  std::cout << ck << "\n";
  return 0;
}

int cmd_finetune(const KVOverrides& kv, const std::string& preset, const std::string& data_dir,
                 const std::string& out_dir, const std::string& checkpoint,
                 const std::string& modality, double fraction, const std::string& holdout) {
  finetune::FinetuneConfig cfg = config::finetune_preset(preset);
  cfg.out_dir = out_dir;
  auto binder = config::bind_finetune(cfg);
  kv.apply(binder);
  if (!checkpoint.empty()) cfg.checkpoint = checkpoint;
  if (!modality.empty()) cfg.modality = modality;
  if (fraction > 0) cfg.data_fraction = fraction;
  cfg.validate();
  if (cfg.modality.empty()) throw config::ParseError("key 'modality': a value is required");

  auto idx = CohortIndex::load((fs::path(data_dir) / "manifest.jsonl").string());
  auto samples = finetune::load_seg_samples(idx, cfg.modality);
  std::vector<finetune::SegSample> train = samples;
  if (!holdout.empty())
    train = finetune::split_by_center(samples, parse_center_split("center:" + holdout)).first;

  fs::create_directories(out_dir);
  binder.write_snapshot((fs::path(out_dir) / "config_resolved.txt").string());
  auto res = finetune::run_finetune(cfg, train, &std::cerr);
  std::ofstream metrics((fs::path(out_dir) / "metrics.jsonl").string());
  for (const auto& m : res.metrics)
    metrics << "{\"step\":" << m.step << ",\"loss\":" << m.loss << ",\"bce\":" << m.bce
            << ",\"soft_dice\":" << m.soft_dice
            << ",\"encoder_frozen\":" << (m.encoder_frozen ? "true" : "false") << "}\n";
  std::cout << res.model_path << "\n";
  return 0;
}

int cmd_evaluate(const std::string& model_path, const std::string& data_dir,
                 const std::string& modality, const std::string& split, int64_t window,
                 double overlap, const std::string& out_path) {
  auto m = finetune::SegModel::load(model_path);
  auto idx = CohortIndex::load((fs::path(data_dir) / "manifest.jsonl").string());
  auto samples = finetune::load_seg_samples(idx, modality);
  std::vector<finetune::SegSample> eval_set = samples;
  if (!split.empty())
    eval_set = finetune::split_by_center(samples, parse_center_split(split)).second;
  if (eval_set.empty()) throw std::invalid_argument("evaluation set is empty");
  double d = finetune::evaluate_mean_dice(*m, eval_set, window, overlap);
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "mean_dice " << d << " over " << eval_set.size() << " scans\n";
  std::cout << os.str();
  if (!out_path.empty()) write_text(out_path, os.str());
  return 0;
}

int cmd_eval_align(const std::string& checkpoint, const std::string& data_dir, int64_t crop,
                   uint64_t seed, const std::string& out_path) {
  auto enc = embed::load_pretrained_encoder(checkpoint);
  auto idx = CohortIndex::load((fs::path(data_dir) / "manifest.jsonl").string());
  auto recs = embed::extract_embeddings(*enc, idx, crop);
  auto rep = embed::alignment_report(recs, "", seed);
  std::cout << rep.format_text();
  if (!out_path.empty()) write_text(out_path, rep.format_text());
  return 0;
}

int cmd_tsne(const std::string& checkpoint, const std::string& data_dir, int n, uint64_t seed,
             int64_t crop, const std::string& out_path) {
  auto enc = embed::load_pretrained_encoder(checkpoint);
  auto idx = CohortIndex::load((fs::path(data_dir) / "manifest.jsonl").string());
  auto subjects = idx.subject_ids();
  if (n > 0 && static_cast<size_t>(n) < subjects.size()) {
    Rng rng = Rng(seed).fork(31);
    for (size_t i = subjects.size(); i > 1; --i)
      std::swap(subjects[i - 1],
                subjects[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)))]);
    subjects.resize(static_cast<size_t>(n));
    CohortIndex sub;
    sub.root_dir = idx.root_dir;
    for (const auto& r : idx.records)
      if (std::find(subjects.begin(), subjects.end(), r.subject_id) != subjects.end())
        sub.records.push_back(r);
    idx = sub;
  }
  auto recs = embed::extract_embeddings(*enc, idx, crop);
  embed::tsne_export(recs, out_path);
  std::cerr << "wrote " << recs.size() << " coordinates to " << out_path << "\n";
  return 0;
}

int cmd_plot_tsne(const std::string& coords_path, const std::string& out_path) {
  auto pts = embed::read_coords(coords_path);
  embed::plot_scatter_png(pts, out_path);
  std::cerr << "wrote " << out_path << "\n";
  return 0;
}

int cmd_ablate(const KVOverrides& kv, const std::string& preset, const std::string& data_dir,
               const std::string& out_dir, const std::string& modality,
               const std::vector<std::string>& variant_specs, const std::string& fractions_csv,
               const std::string& holdout) {
  finetune::FinetuneConfig cfg = config::finetune_preset(preset);
  cfg.out_dir = out_dir;
  auto binder = config::bind_finetune(cfg);
  kv.apply(binder);
  if (!modality.empty()) cfg.modality = modality;
  cfg.validate();

  std::vector<std::pair<std::string, std::string>> variants;
  for (const auto& vs : variant_specs) {
    auto eq = vs.find('=');
    if (eq == std::string::npos)
      throw config::ParseError("--variant expects NAME=CHECKPOINT, got '" + vs + "'");
    variants.emplace_back(vs.substr(0, eq), vs.substr(eq + 1));
  }
  if (variants.empty()) variants.emplace_back("From Scratch", "scratch");
  std::vector<double> fractions;
  std::istringstream is(fractions_csv);
  std::string tok;
  while (std::getline(is, tok, ',')) fractions.push_back(std::stod(tok));

  auto idx = CohortIndex::load((fs::path(data_dir) / "manifest.jsonl").string());
  auto samples = finetune::load_seg_samples(idx, cfg.modality);
  auto [train, test] =
      finetune::split_by_center(samples, parse_center_split("center:" + holdout));

  fs::create_directories(out_dir);
  binder.write_snapshot((fs::path(out_dir) / "config_resolved.txt").string());
  auto table = finetune::run_ablation(cfg, variants, fractions, train, test, &std::cerr);
  std::cout << table.format_text();
  write_text((fs::path(out_dir) / "ablation.txt").string(), table.format_text());
  write_text((fs::path(out_dir) / "ablation.json").string(), table.format_json());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3D multi-modal contrastive pretraining and lesion segmentation"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic cohort");
  KVOverrides synth_kv;
  synth_kv.attach(synth_cmd);
  std::string synth_out;
  synth_cmd->add_option("--out", synth_out, "output directory")->required();

  // preprocess
  auto* prep_cmd = app.add_subcommand("preprocess", "normalize a cohort in place");
  std::string prep_data, prep_out;
  double prep_min_extent = 120.0;
  prep_cmd->add_option("--data", prep_data, "cohort directory with manifest.jsonl")->required();
  prep_cmd->add_option("--out", prep_out, "output directory")->required();
  prep_cmd->add_option("--min-extent", prep_min_extent, "minimum extent per axis in mm");

  // pretrain
  auto* pre_cmd = app.add_subcommand("pretrain", "self-supervised pretraining");
  KVOverrides pre_kv;
  pre_kv.attach(pre_cmd);
  std::string pre_preset = "desk", pre_data, pre_out, pre_split = "pretrain", pre_resume;
  pre_cmd->add_option("--preset", pre_preset, "desk or paper");
  pre_cmd->add_option("--data", pre_data, "cohort directory")->required();
  pre_cmd->add_option("--out", pre_out, "output directory")->required();
  pre_cmd->add_option("--split", pre_split, "manifest split to train on (empty = all)");
  pre_cmd->add_option("--resume", pre_resume, "checkpoint to resume from");

  // finetune
  auto* ft_cmd = app.add_subcommand("finetune", "supervised lesion segmentation");
  KVOverrides ft_kv;
  ft_kv.attach(ft_cmd);
  std::string ft_preset = "desk", ft_data, ft_out, ft_ck, ft_mod, ft_holdout;
  double ft_fraction = 0;
  ft_cmd->add_option("--preset", ft_preset, "desk or paper");
  ft_cmd->add_option("--data", ft_data, "cohort directory")->required();
  ft_cmd->add_option("--out", ft_out, "output directory")->required();
  ft_cmd->add_option("--checkpoint", ft_ck, "pretraining checkpoint or 'scratch'");
  ft_cmd->add_option("--modality", ft_mod, "modality to fine-tune on");
  ft_cmd->add_option("--fraction", ft_fraction, "training data fraction");
  ft_cmd->add_option("--holdout", ft_holdout, "comma-separated held-out center ids");

  // evaluate
  auto* ev_cmd = app.add_subcommand("evaluate", "mean dice of a trained model");
  std::string ev_model, ev_data, ev_mod, ev_split, ev_out;
  int64_t ev_window = 64;
  double ev_overlap = 0.5;
  ev_cmd->add_option("--model", ev_model, "segmentation model file")->required();
  ev_cmd->add_option("--data", ev_data, "cohort directory")->required();
  ev_cmd->add_option("--modality", ev_mod, "modality to evaluate")->required();
  ev_cmd->add_option("--split", ev_split, "center:IDS held-out split (empty = all)");
  ev_cmd->add_option("--window", ev_window, "inference window");
  ev_cmd->add_option("--overlap", ev_overlap, "window overlap fraction");
  ev_cmd->add_option("--out", ev_out, "result file");

  // eval-align
  auto* al_cmd = app.add_subcommand("eval-align", "embedding alignment report");
  std::string al_ck, al_data, al_out;
  int64_t al_crop = 64;
  uint64_t al_seed = 0;
  al_cmd->add_option("--checkpoint", al_ck, "pretraining checkpoint")->required();
  al_cmd->add_option("--data", al_data, "cohort directory")->required();
  al_cmd->add_option("--crop", al_crop, "central crop size");
  al_cmd->add_option("--seed", al_seed, "session-selection seed");
  al_cmd->add_option("--out", al_out, "report file");

  // tsne
  auto* ts_cmd = app.add_subcommand("tsne", "2D embedding coordinates");
  std::string ts_ck, ts_data, ts_out = "coords.tsv";
  int ts_n = 30;
  uint64_t ts_seed = 0;
  int64_t ts_crop = 64;
  ts_cmd->add_option("--checkpoint", ts_ck, "pretraining checkpoint")->required();
  ts_cmd->add_option("--data", ts_data, "cohort directory")->required();
  ts_cmd->add_option("--n", ts_n, "number of subjects to sample");
  ts_cmd->add_option("--seed", ts_seed, "subject-selection seed");
  ts_cmd->add_option("--crop", ts_crop, "central crop size");
  ts_cmd->add_option("--out", ts_out, "coordinates file");

  // plot-tsne
  auto* pl_cmd = app.add_subcommand("plot-tsne", "scatter plot of exported coordinates");
  std::string pl_coords, pl_out = "fig.png";
  pl_cmd->add_option("coords", pl_coords, "coordinates file")->required();
  pl_cmd->add_option("--out", pl_out, "output image");

  // ablate
  auto* ab_cmd = app.add_subcommand("ablate", "fine-tune grid over variants and fractions");
  KVOverrides ab_kv;
  ab_kv.attach(ab_cmd);
  std::string ab_preset = "desk", ab_data, ab_out, ab_mod, ab_fracs = "1.0", ab_holdout;
  std::vector<std::string> ab_variants;
  ab_cmd->add_option("--preset", ab_preset, "desk or paper");
  ab_cmd->add_option("--data", ab_data, "cohort directory")->required();
  ab_cmd->add_option("--out", ab_out, "output directory")->required();
  ab_cmd->add_option("--modality", ab_mod, "modality to fine-tune on")->required();
  ab_cmd->add_option("--variant", ab_variants, "NAME=CHECKPOINT (repeatable)");
  ab_cmd->add_option("--fractions", ab_fracs, "comma-separated data fractions");
  ab_cmd->add_option("--holdout", ab_holdout, "held-out center ids")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    if (*synth_cmd) return cmd_synth(synth_kv, synth_out);
    if (*prep_cmd) return cmd_preprocess(prep_data, prep_out, prep_min_extent);
    if (*pre_cmd) return cmd_pretrain(pre_kv, pre_preset, pre_data, pre_out, pre_split, pre_resume);
    if (*ft_cmd)
      return cmd_finetune(ft_kv, ft_preset, ft_data, ft_out, ft_ck, ft_mod, ft_fraction,
                          ft_holdout);
    if (*ev_cmd)
      return cmd_evaluate(ev_model, ev_data, ev_mod, ev_split, ev_window, ev_overlap, ev_out);
    if (*al_cmd) return cmd_eval_align(al_ck, al_data, al_crop, al_seed, al_out);
    if (*ts_cmd) return cmd_tsne(ts_ck, ts_data, ts_n, ts_seed, ts_crop, ts_out);
    if (*pl_cmd) return cmd_plot_tsne(pl_coords, pl_out);
    if (*ab_cmd)
      return cmd_ablate(ab_kv, ab_preset, ab_data, ab_out, ab_mod, ab_variants, ab_fracs,
                        ab_holdout);
  } catch (const config::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
