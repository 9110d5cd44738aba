#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mcl3d/finetune.hpp"
#include "mcl3d/pretrain.hpp"
#include "mcl3d/synthcohort.hpp"

namespace mcl3d::config {

struct ParseError : std::runtime_error {
  explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

// "key = value" lines; '#' starts a comment; later lines win.
std::map<std::string, std::string> parse_kv_text(const std::string& text);
std::map<std::string, std::string> parse_kv_file(const std::string& path);

// Maps string keys onto config fields. Unknown keys and malformed values
// raise ParseError naming the offending key.
class Binder {
 public:
  void bind(const std::string& key, int* p);
  void bind(const std::string& key, int64_t* p);
  void bind(const std::string& key, uint64_t* p);
  void bind(const std::string& key, double* p);
  void bind(const std::string& key, bool* p);
  void bind(const std::string& key, std::string* p);
  void bind(const std::string& key, std::vector<int>* p);              // comma-separated
  void bind(const std::string& key, std::vector<std::string>* p);      // comma-separated
  void bind(const std::string& key, std::array<int64_t, 3>* p);        // comma-separated
  void bind(const std::string& key, std::function<void(const std::string&)> set,
            std::function<std::string()> get);

  void set(const std::string& key, const std::string& value);
  void apply(const std::map<std::string, std::string>& kv);

  std::string snapshot() const;  // resolved "key = value" lines, binding order
  void write_snapshot(const std::string& path) const;

  const std::vector<std::string>& keys() const { return order_; }

 private:
  struct Entry {
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
  };
  std::map<std::string, Entry> entries_;
  std::vector<std::string> order_;
};

// Field bindings for each subcommand's config; a preset picks the base
// values the file/flag overrides start from.
Binder bind_cohort_spec(synth::CohortSpec& spec);
Binder bind_pretrain(pretrain::PretrainConfig& cfg);
Binder bind_finetune(finetune::FinetuneConfig& cfg);

pretrain::PretrainConfig pretrain_preset(const std::string& name);   // desk | paper
finetune::FinetuneConfig finetune_preset(const std::string& name);   // desk | paper

}  // namespace mcl3d::config
