#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "docplug/adapt.hpp"
#include "docplug/model.hpp"
#include "docplug/store.hpp"
#include "docplug/text.hpp"

namespace docplug {

// Two synthetic tasks over one shared document collection, so a single
// plugin store can serve both tunings:
//  - qa:     "the code of <key> is"            -> the two-word code
//  - verify: "the code of <key> is <code> ?"   -> yes / no
// Every code appears in exactly one document and twice within it; keys are
// re-bound to fresh codes per document; train/dev/test splits use disjoint
// (key, code) pairs. The answer is never inferable from the query alone.
struct TaskSplit {
  std::vector<TaskRow> train, dev, test;
};

struct SyntheticTask {
  std::vector<std::pair<std::string, std::string>> corpus_records;  // (doc_id, text)
  TaskSplit qa;
  TaskSplit verify;
  int n_distinct_answers = 0;
  double qa_chance = 0.0;      // 1 / n_distinct_answers
  double verify_chance = 0.5;  // balanced yes/no
};

struct TaskGenOptions {
  int n_docs = 200;
  int pairs_per_doc = 5;
  int distractors = 2;
  uint64_t seed = 42;
  // Extra documents appended for plugin learning only: same key pool, codes
  // drawn from the combinations the task left unused, no QA/verification
  // rows. A large pool keeps pretraining from memorizing facts instead of
  // reading plugins.
  int pretrain_docs = 0;
  // Size of the shared key vocabulary. Keys are re-bound to different codes
  // in every document, so a key is meaningless without its document.
  int key_pool = 64;
};

SyntheticTask gen_task(const TaskGenOptions& opts);
void save_task(const SyntheticTask& task, const std::string& out_dir);

enum class EvalMode { kNone, kPlugged, kCoupled };
enum class EvalKind { kGenerate, kYesNo };

struct EvalMetrics {
  double exact_match = 0.0;
  double accuracy = 0.0;
  int n = 0;
  double chance = 0.0;
};

// Pluggable row predictors so the scoring path can be tested in isolation.
using GenerateFn = std::function<std::vector<int>(const TaskRow&)>;
using YesNoFn = std::function<bool(const TaskRow&)>;

EvalMetrics evaluate_generate(const std::vector<TaskRow>& rows, const Vocabulary& vocab,
                              const GenerateFn& generate);
EvalMetrics evaluate_yesno(const std::vector<TaskRow>& rows, const YesNoFn& classify);

// Greedy decoding vs gold answer (exact match), or the yes/no logit
// comparison for verification rows. Coupled mode re-encodes the document
// with the query and bypasses plugins entirely.
EvalMetrics evaluate(const Model& model, const Vocabulary& vocab,
                     const std::vector<TaskRow>& rows, EvalMode mode, EvalKind kind,
                     const PluginStore* store, const Corpus* corpus, bool force = false);

std::string metrics_json(const std::map<std::string, EvalMetrics>& by_name);
std::string metrics_table(const std::map<std::string, EvalMetrics>& by_name);

}  // namespace docplug
