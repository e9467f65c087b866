#include "docplug/pretrain.hpp"

#include <algorithm>
#include <map>
#include <sstream>

#include "docplug/plugin.hpp"

namespace docplug {

Stopwords Stopwords::load(const std::string& path, const Vocabulary& vocab) {
  std::istringstream in(read_file(path));
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) words.push_back(line);
  }
  return from_tokens(words, vocab);
}

Stopwords Stopwords::from_tokens(const std::vector<std::string>& words, const Vocabulary& vocab) {
  Stopwords s;
  for (const auto& w : words) {
    if (vocab.contains(w)) s.ids_.insert(vocab.id_of(w));
  }
  // unknown tokens carry no maskable content either
  s.ids_.insert(kUnkId);
  return s;
}

bool Stopwords::all_stopwords(const std::vector<int>& tokens) const {
  for (int t : tokens) {
    if (!contains(t)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// span mining

std::vector<RecurringSpan> mine_recurring_spans(const Document& doc, const Stopwords& stopwords) {
  // All candidate n-grams with their in-sentence positions, in document order.
  std::map<std::vector<int>, std::vector<SpanOccurrence>> positions;
  for (int s = 0; s < static_cast<int>(doc.sentences.size()); ++s) {
    const auto& sent = doc.sentences[static_cast<size_t>(s)];
    int len = static_cast<int>(sent.size());
    for (int n = kMinSpanLen; n <= kMaxSpanLen; ++n) {
      for (int off = 0; off + n <= len; ++off) {
        std::vector<int> gram(sent.begin() + off, sent.begin() + off + n);
        positions[gram].push_back({s, off});
      }
    }
  }

  // Greedy left-to-right non-overlapping occurrence count per n-gram.
  std::map<std::vector<int>, std::vector<SpanOccurrence>> repeated;
  for (const auto& [gram, occs] : positions) {
    std::vector<SpanOccurrence> kept;
    int last_sentence = -1;
    int last_end = -1;
    for (const auto& occ : occs) {
      if (occ.sentence == last_sentence && occ.offset < last_end) continue;
      kept.push_back(occ);
      last_sentence = occ.sentence;
      last_end = occ.offset + static_cast<int>(gram.size());
    }
    if (kept.size() >= 2) repeated[gram] = std::move(kept);
  }

  // Maximality: drop an n-gram when a one-token extension repeats just as
  // often; the longer span subsumes it.
  auto count_of = [&](const std::vector<int>& gram) -> size_t {
    auto it = repeated.find(gram);
    return it == repeated.end() ? 0 : it->second.size();
  };
  std::vector<RecurringSpan> spans;
  for (const auto& [gram, occs] : repeated) {
    bool subsumed = false;
    if (static_cast<int>(gram.size()) < kMaxSpanLen) {
      for (const auto& occ : occs) {
        const auto& sent = doc.sentences[static_cast<size_t>(occ.sentence)];
        if (occ.offset > 0) {
          std::vector<int> ext(sent.begin() + occ.offset - 1,
                               sent.begin() + occ.offset + static_cast<int>(gram.size()));
          if (count_of(ext) == occs.size()) {
            subsumed = true;
            break;
          }
        }
        if (occ.offset + static_cast<int>(gram.size()) < static_cast<int>(sent.size())) {
          std::vector<int> ext(sent.begin() + occ.offset,
                               sent.begin() + occ.offset + static_cast<int>(gram.size()) + 1);
          if (count_of(ext) == occs.size()) {
            subsumed = true;
            break;
          }
        }
      }
    }
    if (subsumed) continue;
    if (stopwords.all_stopwords(gram)) continue;
    RecurringSpan span;
    span.tokens = gram;
    span.occurrences = occs;
    spans.push_back(std::move(span));
  }

  std::sort(spans.begin(), spans.end(), [](const RecurringSpan& a, const RecurringSpan& b) {
    if (a.length() != b.length()) return a.length() > b.length();
    const auto& fa = a.occurrences.front();
    const auto& fb = b.occurrences.front();
    if (fa.sentence != fb.sentence) return fa.sentence < fb.sentence;
    if (fa.offset != fb.offset) return fa.offset < fb.offset;
    return a.tokens < b.tokens;
  });
  if (static_cast<int>(spans.size()) > kMaxSpans) spans.resize(kMaxSpans);
  return spans;
}

// ---------------------------------------------------------------------------
// example builders

namespace {

Document make_context_doc(const Document& doc, const std::vector<bool>& in_query) {
  Document ctx;
  ctx.doc_id = doc.doc_id;
  for (size_t s = 0; s < doc.sentences.size(); ++s) {
    if (!in_query[s]) ctx.sentences.push_back(doc.sentences[s]);
  }
  return ctx;
}

void cap_target(std::vector<int>& target, int max_target_len) {
  if (static_cast<int>(target.size()) > max_target_len) {
    target.resize(static_cast<size_t>(max_target_len) - 1);
    target.push_back(kEosId);
  }
}

}  // namespace

std::optional<TrainingExample> build_rsp_example(const Document& doc,
                                                 const std::vector<RecurringSpan>& spans,
                                                 uint64_t rng_seed, const PretrainLimits& limits) {
  if (spans.empty()) return std::nullopt;

  std::vector<int> qualifying;  // sentences containing at least one occurrence
  {
    std::vector<bool> has_span(doc.sentences.size(), false);
    for (const auto& span : spans) {
      for (const auto& occ : span.occurrences) has_span[static_cast<size_t>(occ.sentence)] = true;
    }
    for (size_t s = 0; s < has_span.size(); ++s) {
      if (has_span[s]) qualifying.push_back(static_cast<int>(s));
    }
  }
  if (qualifying.empty()) return std::nullopt;
  if (qualifying.size() == doc.sentences.size()) {
    // no sentence left for the context; the plugin would be empty
    if (qualifying.size() <= static_cast<size_t>(kRspQuerySentences)) return std::nullopt;
  }

  // uniform sample without replacement, then back to document order
  Rng rng(rng_seed);
  std::vector<int> pool = qualifying;
  std::vector<int> sampled;
  int want = std::min<int>(kRspQuerySentences, static_cast<int>(pool.size()));
  for (int i = 0; i < want; ++i) {
    size_t pick = static_cast<size_t>(rng.next_below(pool.size()));
    sampled.push_back(pool[pick]);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  std::sort(sampled.begin(), sampled.end());

  std::vector<bool> in_query(doc.sentences.size(), false);
  for (int s : sampled) in_query[static_cast<size_t>(s)] = true;

  // occurrence lists per sampled sentence: (offset, span index), resolved
  // left to right preferring the longer span at equal offsets
  struct Occ {
    int offset;
    int span_idx;
  };
  std::map<int, std::vector<Occ>> by_sentence;
  for (int si = 0; si < static_cast<int>(spans.size()); ++si) {
    for (const auto& occ : spans[static_cast<size_t>(si)].occurrences) {
      if (in_query[static_cast<size_t>(occ.sentence)]) {
        by_sentence[occ.sentence].push_back({occ.offset, si});
      }
    }
  }

  TrainingExample ex;
  ex.task = TaskKind::kRecurringSpan;
  int next_sentinel = 0;
  for (int s : sampled) {
    const auto& sent = doc.sentences[static_cast<size_t>(s)];
    auto occs_it = by_sentence.find(s);
    std::vector<Occ> occs = occs_it == by_sentence.end() ? std::vector<Occ>() : occs_it->second;
    std::sort(occs.begin(), occs.end(), [&](const Occ& a, const Occ& b) {
      if (a.offset != b.offset) return a.offset < b.offset;
      int la = spans[static_cast<size_t>(a.span_idx)].length();
      int lb = spans[static_cast<size_t>(b.span_idx)].length();
      if (la != lb) return la > lb;
      return a.span_idx < b.span_idx;
    });
    int pos = 0;
    for (const auto& occ : occs) {
      if (occ.offset < pos) continue;  // consumed by a previous replacement
      if (next_sentinel >= kNumSentinels) break;
      ex.query_ids.insert(ex.query_ids.end(), sent.begin() + pos, sent.begin() + occ.offset);
      int sid = sentinel_id(next_sentinel++);
      ex.query_ids.push_back(sid);
      const auto& span_tokens = spans[static_cast<size_t>(occ.span_idx)].tokens;
      ex.target_ids.push_back(sid);
      ex.target_ids.insert(ex.target_ids.end(), span_tokens.begin(), span_tokens.end());
      pos = occ.offset + static_cast<int>(span_tokens.size());
    }
    ex.query_ids.insert(ex.query_ids.end(), sent.begin() + pos, sent.end());
  }

  if (static_cast<int>(ex.query_ids.size()) > limits.max_query_len) {
    ex.query_ids.resize(static_cast<size_t>(limits.max_query_len));
    // drop target pairs whose sentinel fell off the truncated query
    std::set<int> surviving(ex.query_ids.begin(), ex.query_ids.end());
    std::vector<int> kept;
    size_t i = 0;
    while (i < ex.target_ids.size()) {
      int sid = ex.target_ids[i];
      size_t j = i + 1;
      while (j < ex.target_ids.size() && !is_sentinel(ex.target_ids[j])) ++j;
      if (surviving.count(sid)) kept.insert(kept.end(), ex.target_ids.begin() + i, ex.target_ids.begin() + j);
      i = j;
    }
    ex.target_ids = std::move(kept);
  }
  if (ex.target_ids.empty()) return std::nullopt;
  ex.target_ids.push_back(kEosId);
  cap_target(ex.target_ids, limits.max_target_len);

  ex.context_doc = make_context_doc(doc, in_query);
  if (ex.context_doc.sentences.empty()) return std::nullopt;
  return ex;
}

TrainingExample build_nsg_example_at(const Document& doc, int start_sentence,
                                     const PretrainLimits& limits) {
  int n = static_cast<int>(doc.sentences.size());
  if (n < 4) throw InputError("next-sentence example needs at least 4 sentences");
  if (start_sentence < 0 || start_sentence + 2 >= n) {
    throw InputError("next-sentence start index out of range");
  }
  TrainingExample ex;
  ex.task = TaskKind::kNextSentence;
  ex.query_ids = doc.sentences[static_cast<size_t>(start_sentence)];
  for (int k = 1; k <= 2; ++k) {
    const auto& sent = doc.sentences[static_cast<size_t>(start_sentence + k)];
    ex.target_ids.insert(ex.target_ids.end(), sent.begin(), sent.end());
  }
  ex.target_ids.push_back(kEosId);

  std::vector<bool> excluded(doc.sentences.size(), false);
  for (int k = 0; k <= 2; ++k) excluded[static_cast<size_t>(start_sentence + k)] = true;
  ex.context_doc = make_context_doc(doc, excluded);

  if (static_cast<int>(ex.query_ids.size()) > limits.max_query_len) {
    ex.query_ids.resize(static_cast<size_t>(limits.max_query_len));
  }
  cap_target(ex.target_ids, limits.max_target_len);
  return ex;
}

std::optional<TrainingExample> build_nsg_example(const Document& doc, uint64_t rng_seed,
                                                 const PretrainLimits& limits) {
  int n = static_cast<int>(doc.sentences.size());
  if (n < 4) return std::nullopt;
  Rng rng(rng_seed);
  int start = static_cast<int>(rng.next_below(static_cast<uint64_t>(n - 2)));
  return build_nsg_example_at(doc, start, limits);
}

// ---------------------------------------------------------------------------
// mixing

MixStream::MixStream(const Corpus& corpus, const Stopwords& stopwords, uint64_t seed,
                     PretrainLimits limits)
    : corpus_(&corpus), stopwords_(&stopwords), rng_(seed), limits_(limits) {
  if (corpus.docs.empty()) throw InputError("mix stream needs a non-empty corpus");
  spans_.reserve(corpus.docs.size());
  for (const auto& doc : corpus.docs) {
    spans_.push_back(mine_recurring_spans(doc, stopwords));
  }
}

TrainingExample MixStream::next() {
  size_t attempts = 0;
  size_t limit = 10 * corpus_->docs.size() + 100;
  while (attempts++ < limit) {
    size_t di = cursor_ % corpus_->docs.size();
    ++cursor_;
    const Document& doc = corpus_->docs[di];
    bool rsp = rng_.next_double() < kRspFraction;
    uint64_t seed = rng_.fork_seed();
    std::optional<TrainingExample> ex =
        rsp ? build_rsp_example(doc, spans_[di], seed, limits_)
            : build_nsg_example(doc, seed, limits_);
    if (ex) return std::move(*ex);
  }
  throw InputError("corpus produced no trainable examples");
}

// ---------------------------------------------------------------------------
// training

Tensor pretrain_step(const Model& model, const std::vector<TrainingExample>& batch) {
  if (batch.empty()) throw InputError("pretrain_step: empty batch");
  Tensor total;
  for (const auto& ex : batch) {
    std::vector<int> ctx_ids = ex.context_doc.all_tokens();
    if (static_cast<int>(ctx_ids.size()) > kDocTokenCap) ctx_ids.resize(kDocTokenCap);
    // plugin computed in real time; gradients flow through document encoding
    Tensor h_ctx = model.encode(ctx_ids);
    Prefixes prefixes = model.map_prefix(h_ctx);
    Tensor enc = model.encode(ex.query_ids, &prefixes);
    Tensor loss = model.decode_loss(enc, ex.target_ids);
    total = total.defined() ? add(total, loss) : loss;
  }
  return total;
}

std::vector<double> pretrain(Model& model, const Corpus& corpus, const Stopwords& stopwords,
                             const PretrainOptions& opts) {
  MixStream stream(corpus, stopwords, opts.seed,
                   {model.config().max_query_len, model.config().max_target_len});
  Adam optimizer(model.params(), opts.lr);
  std::vector<double> losses;
  losses.reserve(static_cast<size_t>(opts.steps));
  for (int step = 0; step < opts.steps; ++step) {
    std::vector<TrainingExample> batch;
    batch.reserve(static_cast<size_t>(opts.batch_size));
    for (int b = 0; b < opts.batch_size; ++b) batch.push_back(stream.next());
    optimizer.zero_grad();
    Tensor loss = pretrain_step(model, batch);
    backward(loss);
    optimizer.step();
    double mean_loss = loss.item() / opts.batch_size;
    losses.push_back(mean_loss);
    if (opts.on_step) opts.on_step(step, mean_loss);
  }
  return losses;
}

}  // namespace docplug
