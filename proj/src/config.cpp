#include "mcl3d/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace mcl3d::config {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(trim(tok));
  if (!out.empty() && out.back().empty()) out.pop_back();
  return out;
}

template <typename T>
T parse_int(const std::string& key, const std::string& v) {
  T out{};
  std::string t = trim(v);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  if (ec != std::errc() || p != t.data() + t.size())
    throw ParseError("key '" + key + "': expected an integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  std::string t = trim(v);
  size_t pos = 0;
  double out;
  try {
    out = std::stod(t, &pos);
  } catch (const std::exception&) {
    throw ParseError("key '" + key + "': expected a number, got '" + v + "'");
  }
  if (pos != t.size())
    throw ParseError("key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  std::string t = trim(v);
  if (t == "true" || t == "1") return true;
  if (t == "false" || t == "0") return false;
  throw ParseError("key '" + key + "': expected true/false, got '" + v + "'");
}

std::string fmt_double(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::ostringstream os;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (i) os << ",";
    os << xs[i];
  }
  return os.str();
}

}  // namespace

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError("line " + std::to_string(lineno) + ": expected key = value, got '" + line +
                       "'");
    std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ParseError("line " + std::to_string(lineno) + ": empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

std::map<std::string, std::string> parse_kv_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot read config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_kv_text(ss.str());
}

void Binder::bind(const std::string& key, std::function<void(const std::string&)> set,
                  std::function<std::string()> get) {
  if (entries_.count(key)) throw std::logic_error("duplicate binding for key '" + key + "'");
  entries_[key] = {std::move(set), std::move(get)};
  order_.push_back(key);
}

void Binder::bind(const std::string& key, int* p) {
  bind(key, [key, p](const std::string& v) { *p = parse_int<int>(key, v); },
       [p] { return std::to_string(*p); });
}
void Binder::bind(const std::string& key, int64_t* p) {
  bind(key, [key, p](const std::string& v) { *p = parse_int<int64_t>(key, v); },
       [p] { return std::to_string(*p); });
}
void Binder::bind(const std::string& key, uint64_t* p) {
  bind(key, [key, p](const std::string& v) { *p = parse_int<uint64_t>(key, v); },
       [p] { return std::to_string(*p); });
}
void Binder::bind(const std::string& key, double* p) {
  bind(key, [key, p](const std::string& v) { *p = parse_double(key, v); },
       [p] { return fmt_double(*p); });
}
void Binder::bind(const std::string& key, bool* p) {
  bind(key, [key, p](const std::string& v) { *p = parse_bool(key, v); },
       [p] { return *p ? std::string("true") : std::string("false"); });
}
void Binder::bind(const std::string& key, std::string* p) {
  bind(key, [p](const std::string& v) { *p = v; }, [p] { return *p; });
}
void Binder::bind(const std::string& key, std::vector<int>* p) {
  bind(key,
       [key, p](const std::string& v) {
         std::vector<int> out;
         for (const auto& tok : split_commas(v)) out.push_back(parse_int<int>(key, tok));
         if (out.empty()) throw ParseError("key '" + key + "': empty list");
         *p = std::move(out);
       },
       [p] { return join(*p); });
}
void Binder::bind(const std::string& key, std::vector<std::string>* p) {
  bind(key,
       [key, p](const std::string& v) {
         auto out = split_commas(v);
         if (out.empty()) throw ParseError("key '" + key + "': empty list");
         *p = std::move(out);
       },
       [p] { return join(*p); });
}
void Binder::bind(const std::string& key, std::array<int64_t, 3>* p) {
  bind(key,
       [key, p](const std::string& v) {
         auto toks = split_commas(v);
         if (toks.size() != 3)
           throw ParseError("key '" + key + "': expected 3 comma-separated integers");
         for (size_t i = 0; i < 3; ++i) (*p)[i] = parse_int<int64_t>(key, toks[i]);
       },
       [p] {
         return std::to_string((*p)[0]) + "," + std::to_string((*p)[1]) + "," +
                std::to_string((*p)[2]);
       });
}

void Binder::set(const std::string& key, const std::string& value) {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ParseError("unknown key '" + key + "'");
  it->second.set(value);
}

void Binder::apply(const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) set(k, v);
}

std::string Binder::snapshot() const {
  std::ostringstream os;
  for (const auto& k : order_) os << k << " = " << entries_.at(k).get() << "\n";
  return os.str();
}

void Binder::write_snapshot(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write config snapshot to " + path);
  f << snapshot();
}

Binder bind_cohort_spec(synth::CohortSpec& spec) {
  Binder b;
  b.bind("subjects", &spec.n_subjects);
  b.bind("sessions", &spec.sessions_per_subject);
  b.bind("modalities", &spec.modalities);
  b.bind("shape", &spec.volume_shape);
  b.bind("lesion_fraction", &spec.lesion_fraction);
  b.bind("lesion_intensity", &spec.lesion_intensity);
  b.bind("seed", &spec.seed);
  b.bind("centers", &spec.n_centers);
  return b;
}

namespace {

void bind_encoder(Binder& b, model::EncoderConfig& e) {
  b.bind("encoder.patch_embed_stride", &e.patch_embed_stride);
  b.bind("encoder.stage_dims", &e.stage_dims);
  b.bind("encoder.stage_depths", &e.stage_depths);
  b.bind("encoder.window_size", &e.window_size);
  b.bind("encoder.projection_dim", &e.projection_dim);
  b.bind("encoder.head_dim", &e.head_dim);
}

}  // namespace

Binder bind_pretrain(pretrain::PretrainConfig& cfg) {
  Binder b;
  b.bind("variant",
         [&cfg](const std::string& v) {
           try {
             cfg.variant = pretrain::variant_from_string(v);
           } catch (const std::invalid_argument& e) {
             throw ParseError(std::string("key 'variant': ") + e.what());
           }
         },
         [&cfg] { return pretrain::to_string(cfg.variant); });
  b.bind("total_steps", &cfg.total_steps);
  b.bind("batch_size", &cfg.batch_size);
  b.bind("lr", &cfg.lr);
  b.bind("weight_decay", &cfg.weight_decay);
  b.bind("mask_ratio_lo", &cfg.mask_ratio_lo);
  b.bind("mask_ratio_hi", &cfg.mask_ratio_hi);
  b.bind("queue_capacity", &cfg.queue_capacity);
  b.bind("patch_size", &cfg.patch_size);
  b.bind("seed", &cfg.seed);
  b.bind("checkpoint_every", &cfg.checkpoint_every);
  b.bind("fpn_dim", &cfg.fpn_dim);
  b.bind("lambda_cl", &cfg.weights.lambda_cl);
  b.bind("lambda_mim", &cfg.weights.lambda_mim);
  b.bind("temperature", &cfg.weights.temperature);
  bind_encoder(b, cfg.encoder);
  return b;
}

Binder bind_finetune(finetune::FinetuneConfig& cfg) {
  Binder b;
  b.bind("checkpoint", &cfg.checkpoint);
  b.bind("modality", &cfg.modality);
  b.bind("total_steps", &cfg.total_steps);
  b.bind("freeze_fraction", &cfg.freeze_fraction);
  b.bind("data_fraction", &cfg.data_fraction);
  b.bind("window", &cfg.window);
  b.bind("window_overlap", &cfg.window_overlap);
  b.bind("batch_size", &cfg.batch_size);
  b.bind("lr", &cfg.lr);
  b.bind("weight_decay", &cfg.weight_decay);
  b.bind("seed", &cfg.seed);
  b.bind("fpn_dim", &cfg.fpn_dim);
  bind_encoder(b, cfg.encoder);
  return b;
}

pretrain::PretrainConfig pretrain_preset(const std::string& name) {
  if (name == "desk") return pretrain::PretrainConfig::desk();
  if (name == "paper") return pretrain::PretrainConfig::paper();
  throw ParseError("unknown preset '" + name + "' (expected desk or paper)");
}

finetune::FinetuneConfig finetune_preset(const std::string& name) {
  if (name == "desk") return {};
  if (name == "paper") return finetune::FinetuneConfig::paper();
  throw ParseError("unknown preset '" + name + "' (expected desk or paper)");
}

}  // namespace mcl3d::config
