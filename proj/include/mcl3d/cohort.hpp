#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace mcl3d {

struct ScanRecord {
  std::string subject_id;
  int session_id = 0;
  std::string modality;
  std::string path;          // volume file, relative to the manifest dir
  std::string split;         // pretrain | finetune | validation
  int center_id = 0;
  std::array<int64_t, 3> shape{0, 0, 0};
  std::string lesion_path;   // empty when the scan has no lesion mask
};

// subjects -> sessions -> modality scans, backed by a jsonl manifest.
struct CohortIndex {
  std::string root_dir;
  std::vector<ScanRecord> records;

  using SessionKey = std::pair<std::string, int>;

  // (subject, session) -> record indices, insertion-ordered by key
  std::map<SessionKey, std::vector<size_t>> sessions() const;

  std::vector<std::string> subject_ids() const;

  CohortIndex filter_split(const std::string& split) const;

  std::string resolve(const std::string& rel_path) const;

  void validate() const;  // unique (subject, session, modality)

  void save(const std::string& manifest_path) const;
  static CohortIndex load(const std::string& manifest_path);
};

}  // namespace mcl3d
