#include "mcl3d/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "mcl3d/volume.hpp"

namespace mcl3d::finetune {

namespace fs = std::filesystem;

void SegSample::validate() const {
  check_same_shape(image, label, "SegSample");
  for (int64_t i = 0; i < label.numel(); ++i)
    if (label[i] != 0.f && label[i] != 1.f)
      throw std::invalid_argument("SegSample: label must be binary");
}

int64_t FinetuneConfig::frozen_steps() const {
  if (from_scratch()) return 0;
  return static_cast<int64_t>(std::ceil(freeze_fraction * static_cast<double>(total_steps)));
}

void FinetuneConfig::validate() const {
  if (total_steps < 1 || batch_size < 1) throw std::invalid_argument("finetune: positive sizes");
  if (freeze_fraction < 0.0 || freeze_fraction > 1.0)
    throw std::invalid_argument("finetune: freeze_fraction must be in [0,1]");
  if (data_fraction <= 0.0 || data_fraction > 1.0)
    throw std::invalid_argument("finetune: data_fraction must be in (0,1]");
  if (window % encoder.bottleneck_stride() != 0)
    throw std::invalid_argument("finetune: window must be divisible by the bottleneck stride");
  if (window_overlap < 0.0 || window_overlap >= 1.0)
    throw std::invalid_argument("finetune: window_overlap must be in [0,1)");
  encoder.validate();
}

FinetuneConfig FinetuneConfig::paper() {
  FinetuneConfig c;
  c.total_steps = 5000;
  c.window = 96;
  c.encoder = model::EncoderConfig::paper();
  return c;
}

SegModel::SegModel(const model::EncoderConfig& cfg, int fpn_dim, Rng& rng)
    : cfg_(cfg), fpn_dim_(fpn_dim) {
  enc_ = std::make_unique<model::Encoder>(cfg, rng, "online");
  dec_ = std::make_unique<model::FPNDecoder>(cfg, fpn_dim, 1, rng, "seg_decoder");
}

Tensor SegModel::forward(const Tensor& x) {
  enc_->forward(x);
  return dec_->forward(enc_->stage_outputs());
}

void SegModel::backward(const Tensor& d_logits) {
  enc_->backward(dec_->backward(d_logits));
}

void SegModel::collect(nn::ParamRefs& out) {
  enc_->collect(out);
  dec_->collect(out);
}

nn::ParamRefs SegModel::encoder_params() {
  nn::ParamRefs ps;
  enc_->collect(ps);
  return ps;
}

void SegModel::save(const std::string& path, int64_t step) const {
  model::Checkpoint ck;
  ck.step = step;
  ck.meta = model::encoder_config_meta(cfg_);
  ck.meta["kind"] = "segmodel";
  ck.meta["fpn_dim"] = std::to_string(fpn_dim_);
  nn::ParamRefs ps;
  const_cast<SegModel*>(this)->collect(ps);
  model::pack_params(ps, ck);
  ck.save(path);
}

std::unique_ptr<SegModel> SegModel::load(const std::string& path, int* fpn_dim_out) {
  model::Checkpoint ck = model::Checkpoint::load(path);
  if (ck.meta.count("kind") == 0 || ck.meta.at("kind") != "segmodel")
    throw std::runtime_error(path + ": not a segmentation model file");
  model::EncoderConfig cfg = model::encoder_config_from_meta(ck.meta);
  int fpn = std::stoi(ck.meta.at("fpn_dim"));
  Rng rng(0);
  auto m = std::make_unique<SegModel>(cfg, fpn, rng);
  nn::ParamRefs ps;
  m->collect(ps);
  model::unpack_params(ck, ps);
  if (fpn_dim_out) *fpn_dim_out = fpn;
  return m;
}

SegLossResult seg_loss(const Tensor& logits, const Tensor& labels) {
  check_same_shape(logits, labels, "seg_loss");
  int64_t n = logits.numel();
  SegLossResult res;
  res.d_logits = Tensor(logits.shape);

  double bce = 0, sp = 0, sy = 0, spy = 0;
  std::vector<double> p(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    double x = logits[i], y = labels[i];
    bce += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
    double pi = 1.0 / (1.0 + std::exp(-x));
    p[static_cast<size_t>(i)] = pi;
    sp += pi;
    sy += y;
    spy += pi * y;
  }
  const double eps = 1.0;
  double denom = sp + sy + eps;
  double d = (2.0 * spy + eps) / denom;
  res.bce = bce / static_cast<double>(n);
  res.soft_dice = 1.0 - d;
  res.loss = res.bce + res.soft_dice;
  for (int64_t i = 0; i < n; ++i) {
    double y = labels[i], pi = p[static_cast<size_t>(i)];
    double d_bce = (pi - y) / static_cast<double>(n);
    double dD_dp = (2.0 * y * denom - (2.0 * spy + eps)) / (denom * denom);
    res.d_logits[i] = static_cast<float>(d_bce - dD_dp * pi * (1.0 - pi));
  }
  return res;
}

double dice(const Tensor& pred, const Tensor& gt) {
  check_same_shape(pred, gt, "dice");
  int64_t inter = 0, np = 0, ng = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    bool a = pred[i] != 0.f, b = gt[i] != 0.f;
    inter += a && b;
    np += a;
    ng += b;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

namespace {

Tensor pad_to(const Tensor& vol, int64_t minimum) {
  int64_t d0 = std::max(vol.dim(0), minimum), d1 = std::max(vol.dim(1), minimum),
          d2 = std::max(vol.dim(2), minimum);
  if (d0 == vol.dim(0) && d1 == vol.dim(1) && d2 == vol.dim(2)) return vol;
  Tensor out({d0, d1, d2});
  for (int64_t z = 0; z < vol.dim(0); ++z)
    for (int64_t y = 0; y < vol.dim(1); ++y)
      std::copy(vol.ptr() + (z * vol.dim(1) + y) * vol.dim(2),
                vol.ptr() + (z * vol.dim(1) + y + 1) * vol.dim(2),
                out.ptr() + (z * d1 + y) * d2);
  return out;
}

std::vector<int64_t> window_starts(int64_t extent, int64_t window, double overlap) {
  int64_t step = std::max<int64_t>(1, std::llround(static_cast<double>(window) * (1.0 - overlap)));
  std::vector<int64_t> starts;
  for (int64_t s = 0;; s += step) {
    if (s + window >= extent) {
      starts.push_back(extent - window);
      break;
    }
    starts.push_back(s);
  }
  starts.erase(std::unique(starts.begin(), starts.end()), starts.end());
  return starts;
}

}  // namespace

Tensor sliding_window_logits(SegModel& m, const Tensor& vol, int64_t window, double overlap) {
  if (vol.ndim() != 3) throw std::invalid_argument("sliding window: 3D volume expected");
  Tensor padded = pad_to(vol, window);
  int64_t d0 = padded.dim(0), d1 = padded.dim(1), d2 = padded.dim(2);
  Tensor acc({d0, d1, d2}), cnt({d0, d1, d2});
  auto s0 = window_starts(d0, window, overlap);
  auto s1 = window_starts(d1, window, overlap);
  auto s2 = window_starts(d2, window, overlap);
  Tensor win({1, 1, window, window, window});
  for (int64_t z0 : s0)
    for (int64_t y0 : s1)
      for (int64_t x0 : s2) {
        for (int64_t z = 0; z < window; ++z)
          for (int64_t y = 0; y < window; ++y)
            std::copy(padded.ptr() + ((z0 + z) * d1 + y0 + y) * d2 + x0,
                      padded.ptr() + ((z0 + z) * d1 + y0 + y) * d2 + x0 + window,
                      win.ptr() + (z * window + y) * window);
        Tensor logits = m.forward(win);
        for (int64_t z = 0; z < window; ++z)
          for (int64_t y = 0; y < window; ++y)
            for (int64_t x = 0; x < window; ++x) {
              int64_t o = ((z0 + z) * d1 + y0 + y) * d2 + x0 + x;
              acc[o] += logits[(z * window + y) * window + x];
              cnt[o] += 1.f;
            }
      }
  for (int64_t i = 0; i < acc.numel(); ++i) acc[i] /= cnt[i];
  if (padded.same_shape(vol)) return acc;
  Tensor out(vol.shape);
  for (int64_t z = 0; z < vol.dim(0); ++z)
    for (int64_t y = 0; y < vol.dim(1); ++y)
      std::copy(acc.ptr() + (z * d1 + y) * d2, acc.ptr() + (z * d1 + y) * d2 + vol.dim(2),
                out.ptr() + (z * vol.dim(1) + y) * vol.dim(2));
  return out;
}

Tensor sliding_window_infer(SegModel& m, const Tensor& vol, int64_t window, double overlap) {
  Tensor logits = sliding_window_logits(m, vol, window, overlap);
  Tensor mask(logits.shape);
  for (int64_t i = 0; i < logits.numel(); ++i) mask[i] = logits[i] > 0.f ? 1.f : 0.f;
  return mask;
}

std::pair<std::vector<SegSample>, std::vector<SegSample>> split_by_center(
    const std::vector<SegSample>& samples, const std::vector<int>& held_out_centers) {
  std::set<int> present, held(held_out_centers.begin(), held_out_centers.end());
  for (const auto& s : samples) present.insert(s.center_id);
  for (int c : held)
    if (!present.count(c))
      throw std::invalid_argument("split_by_center: unknown center " + std::to_string(c));
  std::pair<std::vector<SegSample>, std::vector<SegSample>> out;
  for (const auto& s : samples)
    (held.count(s.center_id) ? out.second : out.first).push_back(s);
  if (out.first.empty()) throw std::invalid_argument("split_by_center: empty training partition");
  return out;
}

std::vector<size_t> data_fraction_subset(size_t n, double fraction, uint64_t seed) {
  if (fraction <= 0.0 || fraction > 1.0)
    throw std::invalid_argument("data_fraction_subset: fraction must be in (0,1]");
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng = Rng(seed).fork(77);
  for (size_t i = 0; i + 1 < n; ++i) {
    size_t j = i + static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(n - i)));
    std::swap(idx[i], idx[j]);
  }
  size_t keep = static_cast<size_t>(std::ceil(fraction * static_cast<double>(n)));
  idx.resize(std::max<size_t>(1, keep));
  return idx;
}

std::vector<SegSample> load_seg_samples(const CohortIndex& index, const std::string& modality) {
  std::vector<SegSample> out;
  for (const auto& rec : index.records) {
    if (rec.modality != modality || rec.lesion_path.empty()) continue;
    SegSample s;
    s.subject_id = rec.subject_id;
    s.session_id = rec.session_id;
    s.center_id = rec.center_id;
    s.image = read_volume(index.resolve(rec.path)).data;
    s.label = read_volume(index.resolve(rec.lesion_path)).data;
    for (auto& v : s.label.data) v = v != 0.f ? 1.f : 0.f;
    s.validate();
    out.push_back(std::move(s));
  }
  return out;
}

FinetuneResult run_finetune(const FinetuneConfig& cfg, const std::vector<SegSample>& train,
                            std::ostream* progress,
                            const std::function<void(int64_t, SegModel&)>& on_step) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("finetune: empty training set");
  fs::create_directories(cfg.out_dir);

  Rng init_rng = Rng(cfg.seed).fork(200);
  SegModel m(cfg.encoder, cfg.fpn_dim, init_rng);
  if (!cfg.from_scratch()) {
    model::Checkpoint ck = model::Checkpoint::load(cfg.checkpoint);
    model::EncoderConfig from_ck = model::encoder_config_from_meta(ck.meta);
    if (from_ck.stage_dims != cfg.encoder.stage_dims ||
        from_ck.stage_depths != cfg.encoder.stage_depths ||
        from_ck.patch_embed_stride != cfg.encoder.patch_embed_stride)
      throw std::runtime_error("finetune: checkpoint encoder configuration does not match");
    model::unpack_params(ck, m.encoder_params());  // decoder stays freshly initialized
  }

  nn::ParamRefs params;
  m.collect(params);
  nn::AdamWConfig oc;
  oc.lr = cfg.lr;
  oc.weight_decay = cfg.weight_decay;
  nn::AdamW opt(params, oc);

  std::vector<const nn::Param*> frozen;
  for (auto* p : m.encoder_params()) frozen.push_back(p);
  int64_t n_frozen = cfg.frozen_steps();

  auto subset = data_fraction_subset(train.size(), cfg.data_fraction, cfg.seed);
  Rng crop_rng = Rng(cfg.seed).fork(201);
  int64_t W = cfg.window;

  FinetuneResult res;
  Tensor batch({cfg.batch_size, 1, W, W, W}), labels({cfg.batch_size, 1, W, W, W});
  for (int64_t step = 0; step < cfg.total_steps; ++step) {
    for (int64_t b = 0; b < cfg.batch_size; ++b) {
      const SegSample& s =
          train[subset[static_cast<size_t>(crop_rng.uniform_int(
              static_cast<int64_t>(subset.size())))]];
      Tensor img = pad_to(s.image, W), lab = pad_to(s.label, W);
      std::array<int64_t, 3> o;
      for (int a = 0; a < 3; ++a)
        o[static_cast<size_t>(a)] = crop_rng.uniform_int(img.dim(a) - W + 1);
      for (int64_t z = 0; z < W; ++z)
        for (int64_t y = 0; y < W; ++y)
          for (int64_t x = 0; x < W; ++x) {
            int64_t src = ((o[0] + z) * img.dim(1) + o[1] + y) * img.dim(2) + o[2] + x;
            int64_t dst = ((b * W + z) * W + y) * W + x;
            batch[dst] = img[src];
            labels[dst] = lab[src];
          }
    }
    Tensor logits = m.forward(batch);
    auto loss = seg_loss(logits, labels);
    nn::zero_grads(params);
    m.backward(loss.d_logits);
    bool frozen_now = step < n_frozen;
    if (frozen_now)
      opt.step(frozen);
    else
      opt.step();
    res.metrics.push_back({step, loss.loss, loss.bce, loss.soft_dice, frozen_now});
    if (on_step) on_step(step, m);
    if (progress && (step % 50 == 0 || step + 1 == cfg.total_steps))
      *progress << "finetune step " << step << " loss " << loss.loss << "\n";
  }
  res.model_path = (fs::path(cfg.out_dir) / "segmodel.bin").string();
  m.save(res.model_path, cfg.total_steps);
  return res;
}

double evaluate_mean_dice(SegModel& m, const std::vector<SegSample>& test, int64_t window,
                          double overlap) {
  if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
  double total = 0;
  for (const auto& s : test)
    total += dice(sliding_window_infer(m, s.image, window, overlap), s.label);
  return total / static_cast<double>(test.size());
}

std::string AblationTable::format_text() const {
  std::ostringstream os;
  os << "Training data fraction (mean test DSC)\n";
  os << std::left;
  os.width(14);
  os << "Variant";
  for (double f : fractions) {
    std::ostringstream h;
    h << static_cast<int>(std::lround(f * 100)) << "%";
    os.width(10);
    os << h.str();
  }
  os << "\n";
  for (const auto& v : variants) {
    os.width(14);
    os << v;
    for (double f : fractions) {
      std::string cell = "-";
      for (const auto& c : cells)
        if (c.variant == v && c.fraction == f)
          cell = c.available ? [&] {
            char buf[16];
            std::snprintf(buf, sizeof(buf), "%.4f", c.mean_dice);
            return std::string(buf);
          }()
                             : "n/a";
      os.width(10);
      os << cell;
    }
    os << "\n";
  }
  return os.str();
}

std::string AblationTable::format_json() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < cells.size(); ++i) {
    const auto& c = cells[i];
    if (i) os << ",";
    os << "{\"variant\":\"" << c.variant << "\",\"fraction\":" << c.fraction
       << ",\"mean_dice\":" << c.mean_dice << ",\"available\":" << (c.available ? "true" : "false")
       << "}";
  }
  os << "]";
  return os.str();
}

AblationTable run_ablation(const FinetuneConfig& base,
                           const std::vector<std::pair<std::string, std::string>>& variants,
                           const std::vector<double>& fractions,
                           const std::vector<SegSample>& train,
                           const std::vector<SegSample>& test, std::ostream* progress) {
  AblationTable table;
  table.fractions = fractions;
  for (const auto& [name, ckpt] : variants) {
    table.variants.push_back(name);
    if (ckpt != "scratch" && !fs::exists(ckpt)) {
      if (progress) *progress << "warning: missing checkpoint for " << name << ", row skipped\n";
      for (double f : fractions) table.cells.push_back({name, f, 0.0, false});
      continue;
    }
    for (double f : fractions) {
      FinetuneConfig cfg = base;
      cfg.checkpoint = ckpt;
      cfg.data_fraction = f;
      cfg.out_dir = (fs::path(base.out_dir) / (name + "_" + std::to_string(f))).string();
      auto res = run_finetune(cfg, train, progress);
      auto m = SegModel::load(res.model_path);
      double d = evaluate_mean_dice(*m, test, cfg.window, cfg.window_overlap);
      table.cells.push_back({name, f, d, true});
      if (progress) *progress << name << " @ " << f << " -> " << d << "\n";
    }
  }
  return table;
}

}  // namespace mcl3d::finetune
