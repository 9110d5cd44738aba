#include "mcl3d/pretrain.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace mcl3d::pretrain {

namespace fs = std::filesystem;

Variant variant_from_string(const std::string& s) {
  if (s == "cl") return Variant::CL;
  if (s == "mcl") return Variant::MCL;
  if (s == "cl_mim") return Variant::CL_MIM;
  if (s == "mcl_mim") return Variant::MCL_MIM;
  throw std::invalid_argument("unknown variant: " + s);
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::CL: return "cl";
    case Variant::MCL: return "mcl";
    case Variant::CL_MIM: return "cl_mim";
    case Variant::MCL_MIM: return "mcl_mim";
  }
  return "?";
}

void PretrainConfig::validate() const {
  if (total_steps < 1 || batch_size < 1 || queue_capacity < 1)
    throw std::invalid_argument("pretrain: positive sizes required");
  if (mask_ratio_lo < 0.0 || mask_ratio_hi > 1.0 || mask_ratio_lo > mask_ratio_hi)
    throw std::invalid_argument("pretrain: mask ratio range must be within [0,1], lo <= hi");
  if (patch_size % encoder.bottleneck_stride() != 0)
    throw std::invalid_argument("pretrain: patch size must be divisible by the bottleneck stride");
  weights.validate();
  encoder.validate();
}

PretrainConfig PretrainConfig::paper() {
  PretrainConfig c;
  c.total_steps = 200000;
  c.batch_size = 16;
  c.queue_capacity = 16384;
  c.patch_size = 96;
  c.checkpoint_every = 10000;
  c.encoder = model::EncoderConfig::paper();
  return c;
}

std::string StepMetrics::to_json() const {
  std::ostringstream os;
  os.precision(10);
  os << "{\"step\":" << step << ",\"loss_cl\":" << loss_cl << ",\"loss_mim\":" << loss_mim
     << ",\"loss_total\":" << loss_total << ",\"grad_norm_cl\":" << grad_norm_cl
     << ",\"grad_norm_mim\":" << grad_norm_mim << ",\"momentum\":" << momentum
     << ",\"mask_ratio\":" << mask_ratio << ",\"queue_size\":" << queue_size
     << ",\"empty_negatives\":" << (empty_negatives ? "true" : "false") << "}";
  return os.str();
}

namespace {

Rng init_rng(uint64_t seed, uint64_t stream) { return Rng(seed).fork(stream); }

}  // namespace

Trainer::Trainer(const PretrainConfig& cfg, const CohortIndex& index)
    : cfg_(cfg),
      index_(&index),
      store_(index),
      queue_(cfg.queue_capacity, cfg.encoder.projection_dim),
      spatial_rng_(init_rng(cfg.seed, 1)),
      intensity_rng_(init_rng(cfg.seed, 2)),
      mask_rng_(init_rng(cfg.seed, 3)) {
  cfg_.validate();
  if (index.subject_ids().size() < 2)
    throw std::invalid_argument("pretrain: cohort must contain at least 2 subjects");

  Rng r_online = init_rng(cfg.seed, 100), r_mom = init_rng(cfg.seed, 101);
  Rng r_hq = init_rng(cfg.seed, 102), r_hk = init_rng(cfg.seed, 103);
  Rng r_dec = init_rng(cfg.seed, 104);
  int width = cfg.encoder.stage_dims.back();
  online_ = std::make_unique<model::Encoder>(cfg.encoder, r_online, "online");
  momentum_ = std::make_unique<model::Encoder>(cfg.encoder, r_mom, "momentum");
  head_q_ = std::make_unique<model::ProjectionHead>(width, cfg.encoder.projection_dim, r_hq,
                                                    "online.proj");
  head_k_ = std::make_unique<model::ProjectionHead>(width, cfg.encoder.projection_dim, r_hk,
                                                    "momentum.proj");
  decoder_ = std::make_unique<model::FPNDecoder>(cfg.encoder, cfg.fpn_dim, 1, r_dec, "decoder");

  online_->collect(trainables_);
  head_q_->collect(trainables_);
  decoder_->collect(trainables_);

  momentum_->collect(momenta_);
  head_k_->collect(momenta_);
  online_->collect(online_ema_src_);
  head_q_->collect(online_ema_src_);

  // key branch starts as an exact copy of the online branch
  model::momentum_update(online_ema_src_, momenta_, 0.0);

  nn::AdamWConfig oc;
  oc.lr = cfg_.lr;
  oc.weight_decay = cfg_.weight_decay;
  opt_ = std::make_unique<nn::AdamW>(trainables_, oc);
}

nn::ParamRefs Trainer::trainable_params() { return trainables_; }

nn::ParamRefs Trainer::online_encoder_params() {
  nn::ParamRefs ps;
  online_->collect(ps);
  return ps;
}

nn::ParamRefs Trainer::momentum_encoder_params() {
  nn::ParamRefs ps;
  momentum_->collect(ps);
  return ps;
}

StepMetrics Trainer::step() {
  StepMetrics m;
  m.step = step_;
  const bool mim = uses_mim(cfg_.variant);

  auto batch = sampler::make_batch(*index_, store_, pair_mode(cfg_.variant), cfg_.batch_size,
                                   cfg_.patch_size, cfg_.augment, spatial_rng_, intensity_rng_);

  // online (query) forward, masked for MIM variants
  model::MaskPair mask;
  std::vector<uint8_t> voxel_mask;
  Tensor bott;
  if (mim) {
    m.mask_ratio = mask_rng_.uniform(cfg_.mask_ratio_lo, cfg_.mask_ratio_hi);
    int64_t g = cfg_.patch_size / cfg_.encoder.bottleneck_stride();
    int factor = cfg_.encoder.bottleneck_stride() / cfg_.encoder.patch_embed_stride;
    mask = model::make_bottleneck_mask(cfg_.batch_size, {g, g, g}, factor, m.mask_ratio,
                                       mask_rng_);
    bott = online_->forward(batch.query_views, &mask.patch);
    int64_t pg = g * factor;
    voxel_mask = objectives::upsample_mask(mask.patch, cfg_.batch_size, {pg, pg, pg},
                                           cfg_.encoder.patch_embed_stride);
  } else {
    bott = online_->forward(batch.query_views);
  }
  Tensor q = head_q_->forward(model::pooled_mean(bott));

  // momentum (key) forward: unmasked, no gradient
  Tensor k = head_k_->forward(model::pooled_mean(momentum_->forward(batch.key_views)));

  auto nce = objectives::info_nce(q, k, queue_, batch.subject_ids, cfg_.weights.temperature);
  m.loss_cl = nce.loss;
  m.empty_negatives = nce.empty_negatives;

  objectives::ReconResult rec;
  Tensor pred;
  if (mim) {
    pred = decoder_->forward(online_->stage_outputs());
    rec = objectives::masked_recon_loss(pred, batch.mim_targets, voxel_mask);
    m.loss_mim = rec.loss;
  }
  m.loss_total = objectives::combined_loss(m.loss_cl, m.loss_mim, cfg_.weights);
  if (!std::isfinite(m.loss_total)) {
    std::ofstream dump(fs::path(cfg_.out_dir) / "diagnostic_dump.txt");
    dump << "non-finite loss at step " << step_ << "\n"
         << "loss_cl=" << m.loss_cl << " loss_mim=" << m.loss_mim << "\n"
         << "subjects:";
    for (const auto& s : batch.subject_ids) dump << ' ' << s;
    dump << "\nmodalities_q:";
    for (const auto& s : batch.modality_q) dump << ' ' << s;
    dump << "\n";
    throw std::runtime_error("non-finite loss at step " + std::to_string(step_) +
                             " (diagnostic dump written)");
  }

  // per-branch gradients from the shared cached forward
  nn::zero_grads(trainables_);
  online_->backward(model::pooled_mean_backward(head_q_->backward(nce.d_q), bott.shape));
  m.grad_norm_cl = nn::grad_l2_norm(trainables_);
  std::vector<Tensor> g_cl;
  g_cl.reserve(trainables_.size());
  for (auto* p : trainables_) g_cl.push_back(p->grad);

  if (mim) {
    nn::zero_grads(trainables_);
    auto d_stages = decoder_->backward(rec.d_pred);
    online_->backward(d_stages);
    m.grad_norm_mim = nn::grad_l2_norm(trainables_);
  }
  double lcl = cfg_.weights.lambda_cl, lmim = cfg_.weights.lambda_mim;
  for (size_t i = 0; i < trainables_.size(); ++i) {
    Tensor& g = trainables_[i]->grad;
    const Tensor& gc = g_cl[i];
    for (int64_t j = 0; j < g.numel(); ++j)
      g[j] = static_cast<float>((mim ? lmim : 0.0) * g[j] + lcl * gc[j]);
  }
  opt_->step();

  m.momentum = model::momentum_schedule(step_, cfg_.total_steps);
  model::momentum_update(online_ema_src_, momenta_, m.momentum);
  queue_.enqueue(k, batch.subject_ids);
  m.queue_size = queue_.size();
  ++step_;
  return m;
}

model::Checkpoint Trainer::make_checkpoint() const {
  model::Checkpoint ck;
  ck.step = step_;
  ck.meta = model::encoder_config_meta(cfg_.encoder);
  ck.meta["variant"] = to_string(cfg_.variant);
  ck.meta["total_steps"] = std::to_string(cfg_.total_steps);
  ck.meta["patch_size"] = std::to_string(cfg_.patch_size);
  ck.meta["seed"] = std::to_string(cfg_.seed);
  ck.meta["rng.spatial"] = std::to_string(spatial_rng_.state());
  ck.meta["rng.intensity"] = std::to_string(intensity_rng_.state());
  ck.meta["rng.mask"] = std::to_string(mask_rng_.state());
  ck.meta["opt.t"] = std::to_string(opt_->t());
  {
    std::string subj;
    auto ids = queue_.snapshot_subjects();
    for (size_t i = 0; i < ids.size(); ++i) subj += (i ? ";" : "") + ids[i];
    ck.meta["queue.subjects"] = subj;
  }
  auto* self = const_cast<Trainer*>(this);
  model::pack_params(self->trainables_, ck);
  model::pack_params(self->momenta_, ck);
  for (size_t i = 0; i < self->trainables_.size(); ++i) {
    ck.tensors.emplace_back("opt.m." + self->trainables_[i]->name, self->opt_->m_slot(i));
    ck.tensors.emplace_back("opt.v." + self->trainables_[i]->name, self->opt_->v_slot(i));
  }
  if (queue_.size() > 0) ck.tensors.emplace_back("queue.keys", queue_.snapshot_keys());
  return ck;
}

void Trainer::restore(const model::Checkpoint& ck) {
  model::EncoderConfig enc = model::encoder_config_from_meta(ck.meta);
  if (enc.stage_dims != cfg_.encoder.stage_dims || enc.stage_depths != cfg_.encoder.stage_depths)
    throw std::runtime_error("checkpoint encoder configuration does not match");
  model::unpack_params(ck, trainables_);
  model::unpack_params(ck, momenta_);
  for (size_t i = 0; i < trainables_.size(); ++i) {
    const Tensor* mt = ck.find("opt.m." + trainables_[i]->name);
    const Tensor* vt = ck.find("opt.v." + trainables_[i]->name);
    if (!mt || !vt) throw std::runtime_error("checkpoint is missing optimizer state");
    opt_->m_slot(i) = *mt;
    opt_->v_slot(i) = *vt;
  }
  opt_->set_t(std::stoll(ck.meta.at("opt.t")));
  spatial_rng_.set_state(std::stoull(ck.meta.at("rng.spatial")));
  intensity_rng_.set_state(std::stoull(ck.meta.at("rng.intensity")));
  mask_rng_.set_state(std::stoull(ck.meta.at("rng.mask")));
  step_ = ck.step;
  const Tensor* qk = ck.find("queue.keys");
  if (qk) {
    std::vector<std::string> ids;
    std::istringstream is(ck.meta.at("queue.subjects"));
    std::string tok;
    while (std::getline(is, tok, ';')) ids.push_back(tok);
    queue_ = objectives::NegativeQueue::restore(cfg_.queue_capacity, *qk, ids);
  }
}

std::string run_pretraining(const PretrainConfig& cfg, const CohortIndex& index,
                            const std::string& resume_from, std::ostream* progress) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  Trainer trainer(cfg, index);
  std::ios_base::openmode mode = std::ios::out;
  if (!resume_from.empty()) {
    trainer.restore(model::Checkpoint::load(resume_from));
    mode = std::ios::app;
  }
  std::ofstream metrics(fs::path(cfg.out_dir) / "metrics.jsonl", mode);
  while (trainer.current_step() < cfg.total_steps) {
    StepMetrics m = trainer.step();
    metrics << m.to_json() << "\n";
    if (progress && (m.step % 100 == 0 || m.step + 1 == cfg.total_steps))
      *progress << "step " << m.step << " loss " << m.loss_total << "\n";
    if (cfg.checkpoint_every > 0 && (m.step + 1) % cfg.checkpoint_every == 0 &&
        m.step + 1 < cfg.total_steps)
      trainer.make_checkpoint().save(
          (fs::path(cfg.out_dir) / ("checkpoint_" + std::to_string(m.step + 1) + ".bin")).string());
  }
  metrics.flush();
  std::string final_path = (fs::path(cfg.out_dir) / "checkpoint_final.bin").string();
  trainer.make_checkpoint().save(final_path);
  return final_path;
}

}  // namespace mcl3d::pretrain
