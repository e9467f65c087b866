#pragma once

#include <cstdint>
#include <string>

#include "docplug/model.hpp"
#include "docplug/text.hpp"

namespace docplug {

// Documents are truncated head-first to this many tokens before encoding.
inline constexpr int kDocTokenCap = 512;

// A frozen, task-agnostic document representation: the raw encoder states of
// the document, plus lineage metadata. The mapping network is applied at
// insertion time, never baked in, so the same plugin serves every task.
struct DocumentPlugin {
  std::string doc_id;
  Tensor raw_states;  // H_d, [L_d x d], values at f32 precision
  Hash32 model_hash{};
  int64_t created_at = 0;  // unix seconds; 0 when loaded from a store

  int length() const { return raw_states.dim(0); }
  int width() const { return raw_states.dim(1); }
};

// Encodes the document once with the backbone (no plugin inserted, no
// gradient retained). Values are rounded to f32 so a store round-trip is
// bit-exact.
DocumentPlugin encode_document(const Document& doc, const Model& backbone);

// Applies the mapping network rowwise: p_i = h_i + W2 . relu(W1 . h_i).
// Shared mode yields one prefix reused by every plugged layer; per-layer
// mode yields one prefix per plugged layer.
Prefixes map_plugin(const DocumentPlugin& plugin, const Model& model);

// A backbone view with mapped prefixes inserted. Dropping the view (or
// encoding through the bare model) restores baseline behaviour exactly.
class PluggedModel {
 public:
  PluggedModel(const Model& model, Prefixes prefixes)
      : model_(&model), prefixes_(std::move(prefixes)) {}

  Tensor encode(const std::vector<int>& ids, std::vector<Tensor>* trace = nullptr) const {
    return model_->encode(ids, &prefixes_, trace);
  }
  std::vector<int> generate_greedy(const std::vector<int>& ids, int max_new,
                                   bool stop_at_eos = true) const {
    return model_->generate_greedy(ids, &prefixes_, max_new, stop_at_eos);
  }
  const Prefixes& prefixes() const { return prefixes_; }
  const Model& model() const { return *model_; }

 private:
  const Model* model_;
  Prefixes prefixes_;
};

// Maps and inserts. Throws CompatError when the plugin was encoded by a
// different backbone lineage, unless force is set.
PluggedModel insert(const Model& model, const DocumentPlugin& plugin, bool force = false);

}  // namespace docplug
