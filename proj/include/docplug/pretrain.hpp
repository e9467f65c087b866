#pragma once

#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "docplug/model.hpp"
#include "docplug/optim.hpp"
#include "docplug/text.hpp"

namespace docplug {

enum class TaskKind { kRecurringSpan, kNextSentence, kDownstream };

struct TrainingExample {
  TaskKind task = TaskKind::kRecurringSpan;
  std::vector<int> query_ids;   // <= max_query_len after truncation
  std::vector<int> target_ids;  // <= max_target_len, ends with EOS
  Document context_doc;         // sentences excluded from the query
};

struct SpanOccurrence {
  int sentence = 0;
  int offset = 0;
};

struct RecurringSpan {
  std::vector<int> tokens;
  std::vector<SpanOccurrence> occurrences;  // >= 2, non-overlapping
  int length() const { return static_cast<int>(tokens.size()); }
};

class Stopwords {
 public:
  static Stopwords load(const std::string& path, const Vocabulary& vocab);
  static Stopwords from_tokens(const std::vector<std::string>& words, const Vocabulary& vocab);
  bool contains(int token_id) const { return ids_.count(token_id) > 0; }
  bool all_stopwords(const std::vector<int>& tokens) const;

 private:
  std::set<int> ids_;
};

// Maximal repeated word n-grams (length 2..10, >= 2 non-overlapping
// occurrences counted greedily left to right within sentences), minus spans
// made only of stopwords. Sorted by length descending, ties broken by
// earliest first occurrence; at most 15 returned.
std::vector<RecurringSpan> mine_recurring_spans(const Document& doc, const Stopwords& stopwords);

inline constexpr int kMaxSpans = 15;
inline constexpr int kMinSpanLen = 2;
inline constexpr int kMaxSpanLen = 10;
inline constexpr int kRspQuerySentences = 5;
inline constexpr double kRspFraction = 0.7;

struct PretrainLimits {
  int max_query_len = 196;
  int max_target_len = 128;
};

// Samples up to five span-bearing sentences as the query (document order),
// replaces each distinct span with a distinct sentinel at every occurrence,
// and targets "sentinel span" pairs in first-appearance order. Returns
// nullopt when no sentence qualifies (skip-document signal).
std::optional<TrainingExample> build_rsp_example(const Document& doc,
                                                 const std::vector<RecurringSpan>& spans,
                                                 uint64_t rng_seed,
                                                 const PretrainLimits& limits = {});

// Query is sentence i, target is sentences i+1 and i+2, context is the rest.
// Returns nullopt for documents with fewer than four sentences.
std::optional<TrainingExample> build_nsg_example(const Document& doc, uint64_t rng_seed,
                                                 const PretrainLimits& limits = {});
// Deterministic core with the start sentence fixed (0-based i, i+2 < n).
TrainingExample build_nsg_example_at(const Document& doc, int start_sentence,
                                     const PretrainLimits& limits = {});

// Endless example stream: per document visit, recurring-span prediction with
// probability 0.7, next-sentence generation otherwise; skip signals fall
// through to the next document.
class MixStream {
 public:
  MixStream(const Corpus& corpus, const Stopwords& stopwords, uint64_t seed,
            PretrainLimits limits = {});
  TrainingExample next();

 private:
  const Corpus* corpus_;
  const Stopwords* stopwords_;
  Rng rng_;
  PretrainLimits limits_;
  size_t cursor_ = 0;
  std::vector<std::vector<RecurringSpan>> spans_;  // mined once per document
};

struct PretrainOptions {
  int steps = 2000;
  int batch_size = 2;
  double lr = 2e-4;
  uint64_t seed = 42;
  std::function<void(int, double)> on_step;  // (step index, mean per-example loss)
};

// One multi-task step over a batch: the context is encoded to a fresh plugin
// with gradients flowing through the document encoding, mapped, inserted;
// the returned loss is the sum of per-example NLL contributions.
Tensor pretrain_step(const Model& model, const std::vector<TrainingExample>& batch);

// Full plugin-learning loop over all model parameters. Returns the logged
// mean per-example loss per step.
std::vector<double> pretrain(Model& model, const Corpus& corpus, const Stopwords& stopwords,
                             const PretrainOptions& opts);

}  // namespace docplug
