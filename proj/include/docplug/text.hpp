#pragma once

#include <map>
#include <string>
#include <vector>

#include "docplug/util.hpp"

namespace docplug {

// Reserved token ids. Sentinels are mask placeholders for span prediction and
// are never produced by tokenizing raw text.
inline constexpr int kPadId = 0;
inline constexpr int kEosId = 1;
inline constexpr int kUnkId = 2;
inline constexpr int kNumSentinels = 100;
inline constexpr int kFirstSentinelId = 3;
inline constexpr int kReservedIds = kFirstSentinelId + kNumSentinels;  // 103

inline int sentinel_id(int k) {
  if (k < 0 || k >= kNumSentinels) throw InputError("sentinel index out of range");
  return kFirstSentinelId + k;
}
inline bool is_sentinel(int id) { return id >= kFirstSentinelId && id < kReservedIds; }

class Vocabulary {
 public:
  Vocabulary() = default;

  // Builds from word counts: keep tokens with count >= min_count, at most
  // max_types, ordered by (count desc, token asc) for stable ids.
  static Vocabulary build(const std::map<std::string, int64_t>& counts, int min_count = 2,
                          int max_types = 50000);

  int size() const { return kReservedIds + static_cast<int>(tokens_.size()); }
  int id_of(const std::string& token) const;  // kUnkId when absent
  bool contains(const std::string& token) const;
  const std::string& token_of(int id) const;

  // One natural token per line; line number equals id - kReservedIds.
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);
  std::string serialize() const;
  static Vocabulary deserialize(const std::string& text);

 private:
  std::vector<std::string> tokens_;  // natural tokens, index = id - kReservedIds
  std::map<std::string, int> ids_;
};

// Lowercases and splits on whitespace; punctuation characters become
// standalone tokens. Deterministic; empty text gives an empty list.
std::vector<std::string> split_words(const std::string& text);
std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab);
std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab);

// Splits at '.', '!' or '?' followed by whitespace or end of text.
// No empty sentences; joining with single spaces reproduces the
// whitespace-normalized input.
std::vector<std::string> split_sentences(const std::string& text);

struct Document {
  std::string doc_id;
  std::vector<std::vector<int>> sentences;  // token ids per sentence
  std::string raw_text;

  std::vector<int> all_tokens() const;
};

struct Corpus {
  std::vector<Document> docs;
  std::map<std::string, int> index;  // doc_id -> position

  const Document& by_id(const std::string& doc_id) const;
  bool has(const std::string& doc_id) const { return index.count(doc_id) > 0; }
  size_t size() const { return docs.size(); }
};

struct IngestOptions {
  int min_count = 2;
  int max_types = 50000;
};

// Corpus file: UTF-8, one JSON object per line, {"id": string, "text": string}.
std::vector<std::pair<std::string, std::string>> read_corpus_records(const std::string& path);

struct IngestResult {
  Corpus corpus;
  Vocabulary vocab;
};
IngestResult ingest_corpus(const std::string& path, const IngestOptions& opts = {});
// Same pipeline over in-memory (id, text) records.
IngestResult ingest_records(const std::vector<std::pair<std::string, std::string>>& records,
                            const IngestOptions& opts = {});
// Re-tokenizes records against an existing vocabulary (no vocab rebuild).
Corpus tokenize_records(const std::vector<std::pair<std::string, std::string>>& records,
                        const Vocabulary& vocab);

}  // namespace docplug
