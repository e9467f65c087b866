#include "docplug/taskbench.hpp"

#include <algorithm>
#include <sstream>

#include "docplug/plugin.hpp"
#include "json.hpp"

namespace docplug {

namespace {

const std::vector<std::string>& code_first_words() {
  static const std::vector<std::string> words = {
      "amber",  "basalt", "cobalt", "crimson", "dusty",  "ebony",  "fawn",    "golden",
      "hazel",  "indigo", "jade",   "khaki",   "lilac",  "maroon", "navy",    "ochre",
      "pearl",  "quartz", "russet", "sable",   "teal",   "umber",  "violet",  "walnut",
      "xenon",  "yellow", "zinc",   "copper",  "silver", "bronze", "scarlet", "ivory",
      "onyx",   "coral",  "slate",  "plum",    "rose",   "mint",   "storm",   "frost"};
  return words;
}

const std::vector<std::string>& code_second_words() {
  static const std::vector<std::string> words = {
      "falcon",  "badger", "heron",   "lynx",    "otter",  "raven",  "stoat",  "viper",
      "walrus",  "yak",    "zebra",   "bison",   "crane",  "dingo",  "egret",  "ferret",
      "gecko",   "ibex",   "jackal",  "kestrel", "lemur",  "marten", "newt",   "osprey",
      "panther", "quail",  "rooster", "shrike",  "tapir",  "urchin", "weasel", "condor",
      "magpie",  "puffin", "salmon",  "tortoise", "vulture", "wombat", "beetle", "moth"};
  return words;
}

const std::vector<std::string>& distractor_templates() {
  static const std::vector<std::string> templates = {
      "the gate answered yes today .",
      "every sentry whispered no at dusk .",
      "sector seven stays calm at night .",
      "one courier waits near an old bridge .",
      "rain covered this valley before dawn .",
  };
  return templates;
}

// Statement templates rotate per pair so that, within one document, the only
// word n-grams that repeat are the codes themselves; recurring-span mining
// then masks exactly the facts a plugin must supply. The code always sits
// two tokens after its key.
std::string fact_sentence(int variant, const std::string& key, const std::string& code) {
  switch (variant % 5) {
    case 0: return "the code of " + key + " is " + code + " . ";
    case 1: return "records say " + key + " equals " + code + " . ";
    case 2: return "the manifest maps " + key + " onto " + code + " . ";
    case 3: return "note that " + key + " yields " + code + " . ";
    default: return "logs confirm " + key + " reads " + code + " . ";
  }
}

std::string echo_sentence(int variant, const std::string& key, const std::string& code) {
  switch (variant % 5) {
    case 0: return "agent " + key + " keeps " + code + " in the vault . ";
    case 1: return "courier " + key + " carries " + code + " tonight . ";
    case 2: return "label " + key + " marks " + code + " twice . ";
    case 3: return "entry " + key + " stores " + code + " below deck . ";
    default: return "badge " + key + " shows " + code + " proudly . ";
  }
}

struct Pair {
  std::string key;
  std::string code;  // two words separated by a space
  int doc_idx = 0;
};

}  // namespace

SyntheticTask gen_task(const TaskGenOptions& opts) {
  if (opts.n_docs < 1 || opts.pairs_per_doc < 1) throw InputError("gen_task: counts must be >= 1");
  if (opts.key_pool < opts.pairs_per_doc) {
    throw InputError("gen_task: key pool smaller than pairs_per_doc");
  }
  const auto& first = code_first_words();
  const auto& second = code_second_words();
  int64_t total_pairs = static_cast<int64_t>(opts.n_docs) * opts.pairs_per_doc;
  int64_t combos = static_cast<int64_t>(first.size()) * static_cast<int64_t>(second.size());
  if (total_pairs > combos) {
    throw InputError("gen_task: code vocabulary exhausted (" + std::to_string(total_pairs) +
                     " pairs requested, " + std::to_string(combos) + " codes available)");
  }

  Rng rng(opts.seed);
  // deterministic shuffle of all (first, second) combos, unique per task pair
  std::vector<int> combo_order(static_cast<size_t>(combos));
  for (size_t i = 0; i < combo_order.size(); ++i) combo_order[i] = static_cast<int>(i);
  for (size_t i = combo_order.size(); i > 1; --i) {
    size_t j = static_cast<size_t>(rng.next_below(i));
    std::swap(combo_order[i - 1], combo_order[j]);
  }
  auto combo_code = [&](int combo) {
    return first[static_cast<size_t>(combo) / second.size()] + " " +
           second[static_cast<size_t>(combo) % second.size()];
  };
  // Keys come from a small shared pool and are re-bound to fresh codes in
  // every document. A key alone therefore carries no information; only the
  // document (and hence its plugin) resolves it.
  auto sample_keys = [&](int count) {
    std::vector<int> ids(static_cast<size_t>(opts.key_pool));
    for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
    std::vector<std::string> keys;
    for (int p = 0; p < count; ++p) {
      size_t pick = static_cast<size_t>(rng.next_below(ids.size()));
      keys.push_back("k" + std::to_string(ids[pick]));
      ids.erase(ids.begin() + static_cast<std::ptrdiff_t>(pick));
    }
    return keys;
  };

  SyntheticTask task;
  std::vector<Pair> pairs;
  pairs.reserve(static_cast<size_t>(total_pairs));
  auto add_doc = [&](const std::string& doc_id, int doc_ordinal,
                     const std::vector<Pair>& doc_pairs) {
    std::string text;
    for (size_t p = 0; p < doc_pairs.size(); ++p) {
      // the code appears twice per document so it mines as a recurring span
      text += fact_sentence(static_cast<int>(p), doc_pairs[p].key, doc_pairs[p].code);
      text += echo_sentence(static_cast<int>(p), doc_pairs[p].key, doc_pairs[p].code);
    }
    // the first two distractor slots carry the yes/no sentences so both
    // answer words always survive the vocabulary cutoff
    const auto& templates = distractor_templates();
    for (int j = 0; j < opts.distractors; ++j) {
      size_t pick = j < 2 ? static_cast<size_t>(j)
                          : 2 + (static_cast<size_t>(doc_ordinal + j)) % (templates.size() - 2);
      text += templates[pick];
      text += ' ';
    }
    task.corpus_records.emplace_back(doc_id, text);
  };

  for (int d = 0; d < opts.n_docs; ++d) {
    std::vector<std::string> keys = sample_keys(opts.pairs_per_doc);
    std::vector<Pair> doc_pairs;
    for (int p = 0; p < opts.pairs_per_doc; ++p) {
      Pair pair;
      pair.key = keys[static_cast<size_t>(p)];
      pair.code = combo_code(combo_order[static_cast<size_t>(d * opts.pairs_per_doc + p)]);
      pair.doc_idx = d;
      doc_pairs.push_back(pair);
      pairs.push_back(std::move(pair));
    }
    add_doc("doc" + std::to_string(d), d, doc_pairs);
  }

  // plugin-learning pool: same keys, re-bound to codes the task never uses
  int64_t spare = combos - total_pairs;
  for (int d = 0; d < opts.pretrain_docs; ++d) {
    if (spare <= 0) throw InputError("gen_task: no spare codes left for the pretraining pool");
    std::vector<std::string> keys = sample_keys(opts.pairs_per_doc);
    std::vector<Pair> doc_pairs;
    for (int p = 0; p < opts.pairs_per_doc; ++p) {
      int combo = combo_order[static_cast<size_t>(
          total_pairs + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(spare))))];
      Pair pair;
      pair.key = keys[static_cast<size_t>(p)];
      pair.code = combo_code(combo);
      doc_pairs.push_back(std::move(pair));
    }
    add_doc("pool" + std::to_string(d), opts.n_docs + d, doc_pairs);
  }

  task.n_distinct_answers = static_cast<int>(pairs.size());
  task.qa_chance = 1.0 / static_cast<double>(pairs.size());

  // split by pair: disjoint (key, code) sets across train/dev/test
  std::vector<size_t> order(pairs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (size_t i = order.size(); i > 1; --i) {
    size_t j = static_cast<size_t>(rng.next_below(i));
    std::swap(order[i - 1], order[j]);
  }
  size_t n_train = order.size() * 8 / 10;
  size_t n_dev = order.size() / 10;

  for (size_t rank = 0; rank < order.size(); ++rank) {
    const Pair& pair = pairs[order[rank]];
    std::string doc_id = "doc" + std::to_string(pair.doc_idx);
    TaskRow qa_row{"the code of " + pair.key + " is", doc_id, pair.code};
    // balanced verification: one true row and one corrupted row per pair
    std::string wrong = pair.code;
    while (wrong == pair.code) {
      wrong = pairs[static_cast<size_t>(rng.next_below(pairs.size()))].code;
    }
    TaskRow yes_row{"the code of " + pair.key + " is " + pair.code + " ?", doc_id, "yes"};
    TaskRow no_row{"the code of " + pair.key + " is " + wrong + " ?", doc_id, "no"};

    if (rank < n_train) {
      task.qa.train.push_back(qa_row);
      task.verify.train.push_back(yes_row);
      task.verify.train.push_back(no_row);
    } else if (rank < n_train + n_dev) {
      task.qa.dev.push_back(qa_row);
      task.verify.dev.push_back(yes_row);
      task.verify.dev.push_back(no_row);
    } else {
      task.qa.test.push_back(qa_row);
      task.verify.test.push_back(yes_row);
      task.verify.test.push_back(no_row);
    }
  }
  return task;
}

void save_task(const SyntheticTask& task, const std::string& out_dir) {
  std::string corpus;
  for (const auto& [id, text] : task.corpus_records) {
    nlohmann::json j;
    j["id"] = id;
    j["text"] = text;
    corpus += j.dump();
    corpus += '\n';
  }
  write_file_atomic(out_dir + "/corpus.jsonl", corpus);
  save_task_rows(out_dir + "/qa_train.jsonl", task.qa.train);
  save_task_rows(out_dir + "/qa_dev.jsonl", task.qa.dev);
  save_task_rows(out_dir + "/qa_test.jsonl", task.qa.test);
  save_task_rows(out_dir + "/verify_train.jsonl", task.verify.train);
  save_task_rows(out_dir + "/verify_dev.jsonl", task.verify.dev);
  save_task_rows(out_dir + "/verify_test.jsonl", task.verify.test);

  nlohmann::json meta;
  meta["n_docs"] = task.corpus_records.size();
  meta["n_distinct_answers"] = task.n_distinct_answers;
  meta["qa_chance"] = task.qa_chance;
  meta["verify_chance"] = task.verify_chance;
  write_file_atomic(out_dir + "/task_meta.json", meta.dump(2) + "\n");
}

EvalMetrics evaluate_generate(const std::vector<TaskRow>& rows, const Vocabulary& vocab,
                              const GenerateFn& generate) {
  EvalMetrics m;
  m.n = static_cast<int>(rows.size());
  if (rows.empty()) return m;
  int hits = 0;
  for (const auto& row : rows) {
    std::vector<int> gold = tokenize(row.answer, vocab);
    if (generate(row) == gold) ++hits;
  }
  m.exact_match = static_cast<double>(hits) / static_cast<double>(rows.size());
  m.accuracy = m.exact_match;
  return m;
}

EvalMetrics evaluate_yesno(const std::vector<TaskRow>& rows, const YesNoFn& classify) {
  EvalMetrics m;
  m.n = static_cast<int>(rows.size());
  m.chance = 0.5;
  if (rows.empty()) return m;
  int hits = 0;
  for (const auto& row : rows) {
    bool said_yes = classify(row);
    bool gold_yes = row.answer == "yes";
    if (said_yes == gold_yes) ++hits;
  }
  m.accuracy = static_cast<double>(hits) / static_cast<double>(rows.size());
  m.exact_match = m.accuracy;
  return m;
}

EvalMetrics evaluate(const Model& model, const Vocabulary& vocab,
                     const std::vector<TaskRow>& rows, EvalMode mode, EvalKind kind,
                     const PluginStore* store, const Corpus* corpus, bool force) {
  if (mode == EvalMode::kPlugged) {
    if (!store) throw UsageError("plugged evaluation needs a plugin store");
    if (!force && store->model_hash() != model.origin_hash()) {
      throw CompatError("plugin store was built by a different backbone");
    }
  }
  if (mode == EvalMode::kCoupled && !corpus) {
    throw UsageError("coupled evaluation needs the document corpus");
  }

  std::map<std::string, Prefixes> prefix_cache;
  auto prefixes_for = [&](const std::string& doc_id) -> const Prefixes* {
    auto it = prefix_cache.find(doc_id);
    if (it == prefix_cache.end()) {
      NoGradGuard ng;
      it = prefix_cache.emplace(doc_id, map_plugin(store->get(doc_id), model)).first;
    }
    return &it->second;
  };

  auto input_ids = [&](const TaskRow& row) {
    std::vector<int> ids;
    if (mode == EvalMode::kCoupled) {
      ids = corpus->by_id(row.doc_id).all_tokens();
      std::vector<int> q = tokenize(row.query, vocab);
      ids.insert(ids.end(), q.begin(), q.end());
      if (static_cast<int>(ids.size()) > model.config().max_len) {
        throw InputError("coupled input exceeds max_len for doc " + row.doc_id);
      }
    } else {
      ids = tokenize(row.query, vocab);
      if (static_cast<int>(ids.size()) > model.config().max_query_len) {
        ids.resize(static_cast<size_t>(model.config().max_query_len));
      }
    }
    return ids;
  };

  if (kind == EvalKind::kGenerate) {
    GenerateFn gen = [&](const TaskRow& row) {
      const Prefixes* p = mode == EvalMode::kPlugged ? prefixes_for(row.doc_id) : nullptr;
      return model.generate_greedy(input_ids(row), p, 8);
    };
    return evaluate_generate(rows, vocab, gen);
  }

  int yes_id = vocab.id_of("yes");
  int no_id = vocab.id_of("no");
  if (yes_id == kUnkId || no_id == kUnkId) {
    throw InputError("verification needs 'yes' and 'no' in the vocabulary");
  }
  YesNoFn classify = [&](const TaskRow& row) {
    NoGradGuard ng;
    const Prefixes* p = mode == EvalMode::kPlugged ? prefixes_for(row.doc_id) : nullptr;
    Tensor enc = model.encode(input_ids(row), p);
    Tensor logits = model.decode_logits(enc, {kPadId});
    return logits.at(0, yes_id) >= logits.at(0, no_id);
  };
  return evaluate_yesno(rows, classify);
}

std::string metrics_json(const std::map<std::string, EvalMetrics>& by_name) {
  nlohmann::json j;
  for (const auto& [name, m] : by_name) {
    j[name] = {{"exact_match", m.exact_match},
               {"accuracy", m.accuracy},
               {"n", m.n},
               {"chance", m.chance}};
  }
  return j.dump(2) + "\n";
}

std::string metrics_table(const std::map<std::string, EvalMetrics>& by_name) {
  std::ostringstream out;
  out << "setting                     EM      acc        n   chance\n";
  for (const auto& [name, m] : by_name) {
    char line[160];
    std::snprintf(line, sizeof(line), "%-24s %6.3f   %6.3f   %6d   %6.4f\n", name.c_str(),
                  m.exact_match, m.accuracy, m.n, m.chance);
    out << line;
  }
  return out.str();
}

}  // namespace docplug
