#include "docplug/adapt.hpp"

#include <fstream>
#include <map>

#include "docplug/optim.hpp"
#include "docplug/plugin.hpp"
#include "json.hpp"

namespace docplug {

void attach_adapters(Model& model, const AdapterConfig& cfg) {
  model.attach_adapters(cfg.r, cfg.init_std, cfg.seed);
}

FreezeMask FreezeMask::pet(const Model& model) {
  FreezeMask mask;
  for (const auto& p : model.params()) {
    const std::string& n = p.name();
    if (n.find(".adapter.") != std::string::npos || n.rfind("map.", 0) == 0) {
      mask.trainable.insert(n);
    }
  }
  if (mask.trainable.empty()) throw UsageError("PET mask empty: attach adapters first");
  return mask;
}

FreezeMask FreezeMask::full(const Model& model) {
  FreezeMask mask;
  for (const auto& p : model.params()) mask.trainable.insert(p.name());
  return mask;
}

std::vector<Tensor> FreezeMask::select(const Model& model) const {
  std::vector<Tensor> out;
  for (const auto& p : model.params()) {
    if (allows(p.name())) out.push_back(p);
  }
  return out;
}

std::vector<TaskRow> load_task_rows(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open task file: " + path);
  std::vector<TaskRow> rows;
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
    if (!j.contains("query") || !j.contains("doc_id") || !j.contains("answer")) {
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": expected {query, doc_id, answer}");
    }
    rows.push_back({j["query"].get<std::string>(), j["doc_id"].get<std::string>(),
                    j["answer"].get<std::string>()});
  }
  return rows;
}

void save_task_rows(const std::string& path, const std::vector<TaskRow>& rows) {
  std::string out;
  for (const auto& r : rows) {
    nlohmann::json j;
    j["query"] = r.query;
    j["doc_id"] = r.doc_id;
    j["answer"] = r.answer;
    out += j.dump();
    out += '\n';
  }
  write_file_atomic(path, out);
}

namespace {

std::vector<int> query_ids_for(const TaskRow& row, const Vocabulary& vocab, const Model& model,
                               const Corpus* corpus, TrainInput input) {
  std::vector<int> ids;
  if (input == TrainInput::kCoupled) {
    if (!corpus) throw UsageError("coupled training needs the document corpus");
    ids = corpus->by_id(row.doc_id).all_tokens();
    std::vector<int> q = tokenize(row.query, vocab);
    ids.insert(ids.end(), q.begin(), q.end());
    if (static_cast<int>(ids.size()) > model.config().max_len) {
      throw InputError("coupled input for doc '" + row.doc_id + "' exceeds max_len");
    }
  } else {
    ids = tokenize(row.query, vocab);
    if (static_cast<int>(ids.size()) > model.config().max_query_len) {
      ids.resize(static_cast<size_t>(model.config().max_query_len));
    }
  }
  if (ids.empty()) throw InputError("empty query");
  return ids;
}

std::vector<int> answer_ids_for(const TaskRow& row, const Vocabulary& vocab, const Model& model) {
  std::vector<int> ids = tokenize(row.answer, vocab);
  ids.push_back(kEosId);
  if (static_cast<int>(ids.size()) > model.config().max_target_len) {
    ids.resize(static_cast<size_t>(model.config().max_target_len) - 1);
    ids.push_back(kEosId);
  }
  return ids;
}

// Plugins are immutable, so one read per document serves the whole run.
class PluginCache {
 public:
  explicit PluginCache(const PluginStore& store) : store_(store) {}

  const DocumentPlugin& get(const std::string& doc_id) {
    auto it = cache_.find(doc_id);
    if (it != cache_.end()) return it->second;
    DocumentPlugin plugin;
    try {
      plugin = store_.get(doc_id);
    } catch (const NotFoundError& e) {
      throw InputError(std::string("task row references unknown document: ") + e.what());
    }
    return cache_.emplace(doc_id, std::move(plugin)).first->second;
  }

 private:
  const PluginStore& store_;
  std::map<std::string, DocumentPlugin> cache_;
};

}  // namespace

std::vector<double> train_downstream(Model& model, const Vocabulary& vocab,
                                     const PluginStore* store, const Corpus* corpus,
                                     const std::vector<TaskRow>& rows,
                                     const DownstreamOptions& opts) {
  if (rows.empty()) throw InputError("train_downstream: no rows");
  bool plugged = opts.input == TrainInput::kPluggedDuring;
  if (plugged) {
    if (!store) throw UsageError("plugged training needs a plugin store");
    if (!opts.force && store->model_hash() != model.origin_hash()) {
      throw CompatError("plugin store was built by a different backbone (pass force to override)");
    }
  }

  FreezeMask mask =
      opts.mode == TuneMode::kPet ? FreezeMask::pet(model) : FreezeMask::full(model);
  Adam optimizer(mask.select(model), opts.lr);
  std::optional<PluginCache> cache;
  if (plugged) cache.emplace(*store);

  Rng rng(opts.seed);
  std::vector<double> losses;
  losses.reserve(static_cast<size_t>(opts.steps));
  for (int step = 0; step < opts.steps; ++step) {
    optimizer.zero_grad();
    Tensor total;
    for (int b = 0; b < opts.batch_size; ++b) {
      const TaskRow& row = rows[static_cast<size_t>(rng.next_below(rows.size()))];
      std::vector<int> q = query_ids_for(row, vocab, model, corpus, opts.input);
      std::vector<int> a = answer_ids_for(row, vocab, model);
      Tensor enc;
      if (plugged) {
        Prefixes prefixes = map_plugin(cache->get(row.doc_id), model);
        enc = model.encode(q, &prefixes);
      } else {
        enc = model.encode(q);
      }
      Tensor loss = model.decode_loss(enc, a);
      total = total.defined() ? add(total, loss) : loss;
    }
    backward(total);
    optimizer.step();
    double mean_loss = total.item() / opts.batch_size;
    losses.push_back(mean_loss);
    if (opts.on_step) opts.on_step(step, mean_loss);
  }
  model.zero_grads();
  return losses;
}

std::vector<int> infer(const Model& model, const Vocabulary& vocab, const PluginStore* store,
                       const std::string& query, const std::optional<std::string>& doc_id,
                       bool plug_at_inference, int max_new, bool force) {
  std::vector<int> q = tokenize(query, vocab);
  if (q.empty()) throw InputError("empty query");
  if (static_cast<int>(q.size()) > model.config().max_query_len) {
    q.resize(static_cast<size_t>(model.config().max_query_len));
  }
  if (!plug_at_inference) {
    return model.generate_greedy(q, nullptr, max_new);
  }
  if (!store) throw UsageError("plugged inference needs a plugin store");
  if (!doc_id) throw InputError("plugged inference needs a doc_id");
  PluggedModel view = insert(model, store->get(*doc_id), force);
  return view.generate_greedy(q, max_new);
}

Hash32 hash_params(const Model& model, const std::function<bool(const std::string&)>& include) {
  std::string buf;
  for (const auto& p : model.params()) {
    if (include && !include(p.name())) continue;
    buf += p.name();
    buf += '\0';
    buf += format_bytes_le_f32(p.data());
  }
  return sha256(buf);
}

}  // namespace docplug
