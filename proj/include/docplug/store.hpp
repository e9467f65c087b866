#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "docplug/plugin.hpp"

namespace docplug {

// On-disk plugin store. Each document is encoded exactly once; every task and
// run reads the same bytes back.
//
// Format (all integers little-endian):
//   header:  "PLGD" | u32 version=1 | model_hash[32] | u32 d | u32 count
//   records: count x { u32 id_len | id bytes | u32 L_d | L_d*d f32 }
//   index:   count x { u32 id_len | id bytes | u64 record_offset }
//   trailer: u64 index_offset | "PLGI"
// The index and trailer are rewritten after each append, so a reader never
// sees a record that is not indexed.
class PluginStore {
 public:
  // Creates an empty store file for the given backbone lineage.
  static PluginStore create(const std::string& path, const Hash32& model_hash, int d);
  // Opens an existing store; verifies magic, version and trailer.
  static PluginStore open(const std::string& path);

  void save(const DocumentPlugin& plugin);
  DocumentPlugin get(const std::string& doc_id) const;
  bool has(const std::string& doc_id) const { return index_.count(doc_id) > 0; }
  uint32_t count() const { return static_cast<uint32_t>(index_.size()); }
  std::vector<std::string> doc_ids() const;

  const Hash32& model_hash() const { return model_hash_; }
  int d() const { return d_; }
  const std::string& path() const { return path_; }

  // Number of records fetched through get(); lets tests verify that a
  // training mode which should ignore the store really does.
  uint64_t reads() const { return reads_; }

 private:
  PluginStore() = default;

  std::string path_;
  Hash32 model_hash_{};
  int d_ = 0;
  std::map<std::string, uint64_t> index_;  // doc_id -> record offset
  uint64_t records_end_ = 0;               // file offset one past the last record
  mutable uint64_t reads_ = 0;
};

Hash32 file_sha256(const std::string& path);

}  // namespace docplug
