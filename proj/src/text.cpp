#include "docplug/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace docplug {

Vocabulary Vocabulary::build(const std::map<std::string, int64_t>& counts, int min_count,
                             int max_types) {
  std::vector<std::pair<std::string, int64_t>> kept;
  for (const auto& [tok, cnt] : counts) {
    if (cnt >= min_count) kept.emplace_back(tok, cnt);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (static_cast<int>(kept.size()) > max_types) kept.resize(static_cast<size_t>(max_types));
  Vocabulary v;
  v.tokens_.reserve(kept.size());
  for (const auto& [tok, cnt] : kept) {
    (void)cnt;
    v.ids_[tok] = kReservedIds + static_cast<int>(v.tokens_.size());
    v.tokens_.push_back(tok);
  }
  return v;
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnkId : it->second;
}

bool Vocabulary::contains(const std::string& token) const { return ids_.count(token) > 0; }

const std::string& Vocabulary::token_of(int id) const {
  static const std::string pad = "<pad>";
  static const std::string eos = "</s>";
  static const std::string unk = "unk";
  static std::vector<std::string> sentinels;
  if (sentinels.empty()) {
    for (int i = 0; i < kNumSentinels; ++i) {
      sentinels.push_back("<extra_id_" + std::to_string(i) + ">");
    }
  }
  if (id == kPadId) return pad;
  if (id == kEosId) return eos;
  if (id == kUnkId) return unk;
  if (is_sentinel(id)) return sentinels[static_cast<size_t>(id - kFirstSentinelId)];
  int idx = id - kReservedIds;
  if (idx < 0 || idx >= static_cast<int>(tokens_.size())) {
    throw InputError("token id out of range: " + std::to_string(id));
  }
  return tokens_[static_cast<size_t>(idx)];
}

std::string Vocabulary::serialize() const {
  std::string out;
  for (const auto& t : tokens_) {
    out += t;
    out += '\n';
  }
  return out;
}

void Vocabulary::save(const std::string& path) const { write_file_atomic(path, serialize()); }

Vocabulary Vocabulary::deserialize(const std::string& text) {
  Vocabulary v;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (v.ids_.count(line)) throw FormatError("duplicate vocabulary token: " + line);
    v.ids_[line] = kReservedIds + static_cast<int>(v.tokens_.size());
    v.tokens_.push_back(line);
  }
  return v;
}

Vocabulary Vocabulary::load(const std::string& path) { return deserialize(read_file(path)); }

namespace {

bool is_word_char(unsigned char c) {
  // bytes >= 0x80 are UTF-8 continuation/lead bytes; keep them inside words
  return std::isalnum(c) || c == '_' || c >= 0x80;
}

}  // namespace

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&]() {
    if (!cur.empty()) {
      words.push_back(cur);
      cur.clear();
    }
  };
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      flush();
    } else if (is_word_char(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      // punctuation: standalone single-char token
      flush();
      words.push_back(std::string(1, static_cast<char>(c)));
    }
  }
  flush();
  return words;
}

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) ids.push_back(vocab.id_of(w));
  return ids;
}

std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (id == kPadId) continue;
    if (!out.empty()) out += ' ';
    out += vocab.token_of(id);
  }
  return out;
}

std::vector<std::string> split_sentences(const std::string& text) {
  std::vector<std::string> sentences;
  std::string cur;
  auto flush = [&]() {
    size_t a = cur.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) {
      cur.clear();
      return;
    }
    size_t b = cur.find_last_not_of(" \t\r\n");
    sentences.push_back(cur.substr(a, b - a + 1));
    cur.clear();
  };
  for (size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    cur.push_back(c);
    if (c == '.' || c == '!' || c == '?') {
      bool at_end = i + 1 >= text.size();
      bool before_space = !at_end && std::isspace(static_cast<unsigned char>(text[i + 1]));
      if (at_end || before_space) flush();
    }
  }
  flush();
  return sentences;
}

std::vector<int> Document::all_tokens() const {
  std::vector<int> out;
  for (const auto& s : sentences) out.insert(out.end(), s.begin(), s.end());
  return out;
}

const Document& Corpus::by_id(const std::string& doc_id) const {
  auto it = index.find(doc_id);
  if (it == index.end()) throw NotFoundError("document not found: " + doc_id);
  return docs[static_cast<size_t>(it->second)];
}

namespace {

Document make_document(const std::string& id, const std::string& text, const Vocabulary& vocab) {
  Document doc;
  doc.doc_id = id;
  doc.raw_text = text;
  for (const auto& s : split_sentences(text)) {
    std::vector<int> ids = tokenize(s, vocab);
    if (!ids.empty()) doc.sentences.push_back(std::move(ids));
  }
  if (doc.sentences.empty()) {
    // degenerate but non-empty input (e.g. only whitespace-separated dots)
    std::vector<int> ids = tokenize(text, vocab);
    if (!ids.empty()) doc.sentences.push_back(std::move(ids));
  }
  return doc;
}

std::vector<std::pair<std::string, std::string>> read_jsonl_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus file: " + path);
  std::vector<std::pair<std::string, std::string>> records;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": bad JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j.contains("text") || !j["id"].is_string() ||
        !j["text"].is_string()) {
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": expected {\"id\": string, \"text\": string}");
    }
    records.emplace_back(j["id"].get<std::string>(), j["text"].get<std::string>());
  }
  return records;
}

}  // namespace

IngestResult ingest_records(const std::vector<std::pair<std::string, std::string>>& records,
                            const IngestOptions& opts) {
  std::map<std::string, int64_t> counts;
  for (const auto& [id, text] : records) {
    (void)id;
    for (const auto& w : split_words(text)) ++counts[w];
  }
  IngestResult result;
  result.vocab = Vocabulary::build(counts, opts.min_count, opts.max_types);
  result.corpus = tokenize_records(records, result.vocab);
  return result;
}

Corpus tokenize_records(const std::vector<std::pair<std::string, std::string>>& records,
                        const Vocabulary& vocab) {
  Corpus corpus;
  for (const auto& [id, text] : records) {
    if (corpus.index.count(id)) throw InputError("duplicate doc_id: " + id);
    Document doc = make_document(id, text, vocab);
    if (doc.sentences.empty()) throw InputError("document has no tokens: " + id);
    corpus.index[id] = static_cast<int>(corpus.docs.size());
    corpus.docs.push_back(std::move(doc));
  }
  return corpus;
}

std::vector<std::pair<std::string, std::string>> read_corpus_records(const std::string& path) {
  return read_jsonl_records(path);
}

IngestResult ingest_corpus(const std::string& path, const IngestOptions& opts) {
  return ingest_records(read_jsonl_records(path), opts);
}

}  // namespace docplug
