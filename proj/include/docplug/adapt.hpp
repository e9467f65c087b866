#pragma once

#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "docplug/model.hpp"
#include "docplug/store.hpp"
#include "docplug/text.hpp"

namespace docplug {

struct AdapterConfig {
  int r = 16;
  double init_std = 1e-2;
  uint64_t seed = 7;
};

// Attaches one bottleneck adapter after the feed-forward layer norm of every
// encoder and decoder block. Double attachment is an error.
void attach_adapters(Model& model, const AdapterConfig& cfg);

enum class TuneMode { kPet, kFull };
enum class TrainInput {
  kPluggedDuring,  // plugin loaded from the store for every example
  kQueryOnly,      // no plugin; the baseline for plugging-after-tuning
  kCoupled,        // document text concatenated with the query (upper bound)
};

// The set of trainable parameter names. PET: adapters plus the mapping
// network. Full: every model parameter. Stored plugin contents are data,
// not parameters, and are never trainable.
struct FreezeMask {
  std::set<std::string> trainable;

  static FreezeMask pet(const Model& model);
  static FreezeMask full(const Model& model);
  bool allows(const std::string& name) const { return trainable.count(name) > 0; }
  std::vector<Tensor> select(const Model& model) const;
};

struct TaskRow {
  std::string query;
  std::string doc_id;
  std::string answer;
};

// Task dataset file: one JSON object per line,
// {"query": string, "doc_id": string, "answer": string}.
std::vector<TaskRow> load_task_rows(const std::string& path);
void save_task_rows(const std::string& path, const std::vector<TaskRow>& rows);

struct DownstreamOptions {
  TuneMode mode = TuneMode::kPet;
  TrainInput input = TrainInput::kPluggedDuring;
  double lr = 1e-3;  // PET grid is {1e-4, 5e-4, 1e-3}; full fine-tuning uses 2e-5
  int steps = 1000;
  int batch_size = 2;
  uint64_t seed = 42;
  bool force = false;  // bypass the plugin/model hash check
  std::function<void(int, double)> on_step;
};

// Tunes the model in place on task rows. Plugged training loads each row's
// plugin from the store (cached per doc). Coupled training needs the corpus
// for document text. Returns the mean per-example loss per step.
std::vector<double> train_downstream(Model& model, const Vocabulary& vocab,
                                     const PluginStore* store, const Corpus* corpus,
                                     const std::vector<TaskRow>& rows,
                                     const DownstreamOptions& opts);

// Greedy answer for one query, optionally with the document plugin inserted
// (post-hoc knowledge injection when the model was tuned without plugins).
std::vector<int> infer(const Model& model, const Vocabulary& vocab, const PluginStore* store,
                       const std::string& query, const std::optional<std::string>& doc_id,
                       bool plug_at_inference, int max_new = 16, bool force = false);

// Checksum over named parameters at f32 precision; pass a predicate to
// restrict which names participate.
Hash32 hash_params(const Model& model,
                   const std::function<bool(const std::string&)>& include = nullptr);

}  // namespace docplug
