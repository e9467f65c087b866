#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <set>

#include "doctest.h"
#include "docplug/pretrain.hpp"
#include "oracles.hpp"

using namespace docplug;

namespace {

#ifndef DOCPLUG_SOURCE_DIR
#define DOCPLUG_SOURCE_DIR "."
#endif

IngestResult ingest_one(const std::string& text) {
  return ingest_records({{"doc", text}}, {/*min_count=*/1});
}

Stopwords stopwords_for(const Vocabulary& vocab) {
  return Stopwords::load(std::string(DOCPLUG_SOURCE_DIR) + "/data/stopwords.txt", vocab);
}

}  // namespace

TEST_CASE("miner finds a thrice-repeated bigram and matches the brute-force oracle") {
  IngestResult r = ingest_one(
      "alan turing proved the halting problem. later alan turing built machines. "
      "people remember alan turing fondly. nothing else repeats here.");
  const Document& doc = r.corpus.docs[0];
  Stopwords stops = stopwords_for(r.vocab);
  std::vector<RecurringSpan> spans = mine_recurring_spans(doc, stops);

  std::vector<int> expect_tokens{r.vocab.id_of("alan"), r.vocab.id_of("turing")};
  bool found = false;
  for (const auto& span : spans) {
    if (span.tokens == expect_tokens) {
      found = true;
      CHECK(span.occurrences.size() == 3);
    }
  }
  CHECK(found);

  // every mined span's occurrence count agrees with the independent counter
  auto oracle = oracles::repeated_ngrams(doc.sentences, kMinSpanLen, kMaxSpanLen);
  for (const auto& span : spans) {
    REQUIRE(oracle.count(span.tokens));
    CHECK(static_cast<int>(span.occurrences.size()) == oracle[span.tokens]);
  }
}

TEST_CASE("miner edge cases: unique words and all-stopword spans yield nothing") {
  IngestResult unique = ingest_one("zebra quark mango. violet nebula crater. dune ember flute.");
  Stopwords stops1 = stopwords_for(unique.vocab);
  CHECK(mine_recurring_spans(unique.corpus.docs[0], stops1).empty());

  IngestResult stopdoc = ingest_one("the the and for. the the of in. was the the by.");
  Stopwords stops2 = stopwords_for(stopdoc.vocab);
  CHECK(mine_recurring_spans(stopdoc.corpus.docs[0], stops2).empty());
}

TEST_CASE("miner keeps at most 15 spans, longest first, ties by first occurrence") {
  std::string text;
  // 20 distinct repeated bigrams w0 u0 ... w19 u19
  for (int rep = 0; rep < 2; ++rep) {
    for (int i = 0; i < 20; ++i) {
      text += "w" + std::to_string(i) + " u" + std::to_string(i) + " filler" +
              std::to_string(rep * 20 + i) + " . ";
    }
  }
  // one long repeated trigram
  text += "aa bb cc tail1. aa bb cc tail2.";
  IngestResult r = ingest_one(text);
  Stopwords stops = stopwords_for(r.vocab);
  std::vector<RecurringSpan> spans = mine_recurring_spans(r.corpus.docs[0], stops);
  REQUIRE(static_cast<int>(spans.size()) == kMaxSpans);
  CHECK(spans[0].tokens.size() == 3);  // longest first
  for (size_t i = 1; i < spans.size(); ++i) {
    CHECK(spans[i].tokens.size() <= spans[i - 1].tokens.size());
    if (spans[i].tokens.size() == spans[i - 1].tokens.size()) {
      const auto& fa = spans[i - 1].occurrences.front();
      const auto& fb = spans[i].occurrences.front();
      CHECK((fa.sentence < fb.sentence ||
             (fa.sentence == fb.sentence && fa.offset <= fb.offset)));
    }
  }
}

TEST_CASE("recurring span example: single span, single qualifying sentence") {
  // six sentences; the span 'x y' appears in sentence 0 and sentence 3
  IngestResult r = ingest_one(
      "x y starts here. nothing one. nothing two. again x y appears. nothing three. "
      "nothing four.");
  const Document& doc = r.corpus.docs[0];
  Stopwords stops = stopwords_for(r.vocab);
  std::vector<RecurringSpan> spans = mine_recurring_spans(doc, stops);
  REQUIRE(spans.size() == 1);
  CHECK(spans[0].tokens ==
        std::vector<int>{r.vocab.id_of("x"), r.vocab.id_of("y")});

  auto ex = build_rsp_example(doc, spans, 5);
  REQUIRE(ex.has_value());
  CHECK(ex->task == TaskKind::kRecurringSpan);
  // both qualifying sentences are sampled (fewer than five qualify); each
  // occurrence gets its own sentinel
  int s0 = sentinel_id(0), s1 = sentinel_id(1);
  std::vector<int> expect_query{s0,
                                r.vocab.id_of("starts"),
                                r.vocab.id_of("here"),
                                r.vocab.id_of("."),
                                r.vocab.id_of("again"),
                                s1,
                                r.vocab.id_of("appears"),
                                r.vocab.id_of(".")};
  CHECK(ex->query_ids == expect_query);
  std::vector<int> expect_target{s0, r.vocab.id_of("x"), r.vocab.id_of("y"),
                                 s1, r.vocab.id_of("x"), r.vocab.id_of("y"), kEosId};
  CHECK(ex->target_ids == expect_target);
  CHECK(ex->context_doc.sentences.size() == 4);

  // determinism
  auto again = build_rsp_example(doc, spans, 5);
  CHECK(again->query_ids == ex->query_ids);
  CHECK(again->target_ids == ex->target_ids);
}

TEST_CASE("recurring span example skips documents with no qualifying sentence") {
  IngestResult r = ingest_one("alpha beta. gamma delta. epsilon zeta. eta theta.");
  const Document& doc = r.corpus.docs[0];
  Stopwords stops = stopwords_for(r.vocab);
  CHECK(!build_rsp_example(doc, mine_recurring_spans(doc, stops), 1).has_value());
}

TEST_CASE("sentinel properties hold on a random template corpus") {
  Rng rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    // random docs built from a small alphabet so spans repeat naturally
    std::string text;
    int n_sent = 6 + static_cast<int>(rng.next_below(5));
    for (int s = 0; s < n_sent; ++s) {
      for (int w = 0; w < 5; ++w) {
        text += "tok" + std::to_string(rng.next_below(8)) + " ";
      }
      text += ". ";
    }
    IngestResult r = ingest_one(text);
    Stopwords stops = stopwords_for(r.vocab);
    const Document& doc = r.corpus.docs[0];
    auto spans = mine_recurring_spans(doc, stops);
    auto ex = build_rsp_example(doc, spans, 1000 + static_cast<uint64_t>(trial));
    if (!ex) continue;

    // every sentinel in the target appears exactly once in the query,
    // in first-appearance order
    std::vector<int> target_sentinels;
    for (int id : ex->target_ids) {
      if (is_sentinel(id)) target_sentinels.push_back(id);
    }
    std::vector<int> query_sentinels;
    for (int id : ex->query_ids) {
      if (is_sentinel(id)) query_sentinels.push_back(id);
    }
    CHECK(query_sentinels == target_sentinels);
    std::set<int> uniq(query_sentinels.begin(), query_sentinels.end());
    CHECK(uniq.size() == query_sentinels.size());
    for (size_t k = 0; k < query_sentinels.size(); ++k) {
      CHECK(query_sentinels[k] == sentinel_id(static_cast<int>(k)));
    }

    // context sentences are a subset of the document's sentences, in order
    CHECK(!ex->context_doc.sentences.empty());
    size_t cursor = 0;
    for (const auto& ctx_sent : ex->context_doc.sentences) {
      bool matched = false;
      while (cursor < doc.sentences.size()) {
        if (doc.sentences[cursor++] == ctx_sent) {
          matched = true;
          break;
        }
      }
      CHECK(matched);
    }
  }
}

TEST_CASE("next-sentence example semantics") {
  IngestResult r = ingest_one("s one one. s two two. s three three. s four four. s five five.");
  const Document& doc = r.corpus.docs[0];
  REQUIRE(doc.sentences.size() == 5);

  // start at the second sentence (1-based i=2): context is {s1, s5}
  TrainingExample ex = build_nsg_example_at(doc, 1);
  CHECK(ex.task == TaskKind::kNextSentence);
  CHECK(ex.query_ids == doc.sentences[1]);
  std::vector<int> expect_target = doc.sentences[2];
  expect_target.insert(expect_target.end(), doc.sentences[3].begin(), doc.sentences[3].end());
  expect_target.push_back(kEosId);
  CHECK(ex.target_ids == expect_target);
  REQUIRE(ex.context_doc.sentences.size() == 2);
  CHECK(ex.context_doc.sentences[0] == doc.sentences[0]);
  CHECK(ex.context_doc.sentences[1] == doc.sentences[4]);

  // four-sentence documents leave exactly one context sentence
  IngestResult r4 = ingest_one("a one. b two. c three. d four.");
  for (int start = 0; start <= 1; ++start) {
    TrainingExample e4 = build_nsg_example_at(r4.corpus.docs[0], start);
    CHECK(e4.context_doc.sentences.size() == 1);
  }
  CHECK_THROWS_AS((void)build_nsg_example_at(r4.corpus.docs[0], 2), InputError);

  // too-short documents signal a skip
  IngestResult r3 = ingest_one("a one. b two. c three.");
  CHECK(!build_nsg_example(r3.corpus.docs[0], 9).has_value());
}

TEST_CASE("next-sentence golden example, seed 7") {
  IngestResult r = ingest_one("s one one. s two two. s three three. s four four. s five five.");
  const Document& doc = r.corpus.docs[0];
  auto ex = build_nsg_example(doc, 7);
  REQUIRE(ex.has_value());
  // frozen: seed 7 picks start sentence 0 of the 5-sentence fixture
  CHECK(ex->query_ids == doc.sentences[0]);
  std::vector<int> expect_target = doc.sentences[1];
  expect_target.insert(expect_target.end(), doc.sentences[2].begin(), doc.sentences[2].end());
  expect_target.push_back(kEosId);
  CHECK(ex->target_ids == expect_target);
  CHECK(ex->context_doc.sentences.size() == 2);
  auto again = build_nsg_example(doc, 7);
  CHECK(again->query_ids == ex->query_ids);
  CHECK(again->target_ids == ex->target_ids);
}

TEST_CASE("mixed stream: determinism, degenerate fallback, 70/30 ratio") {
  // corpus where both tasks always succeed
  std::vector<std::pair<std::string, std::string>> records;
  for (int d = 0; d < 5; ++d) {
    std::string text;
    for (int s = 0; s < 8; ++s) {
      text += "motif pair word" + std::to_string(s) + " motif pair tail" + std::to_string(s) +
              " . ";
    }
    records.emplace_back("d" + std::to_string(d), text);
  }
  IngestResult r = ingest_records(records, {1});
  Stopwords stops = stopwords_for(r.vocab);

  SUBCASE("same seed, same stream") {
    MixStream a(r.corpus, stops, 42);
    MixStream b(r.corpus, stops, 42);
    for (int i = 0; i < 50; ++i) {
      TrainingExample ea = a.next();
      TrainingExample eb = b.next();
      CHECK(ea.task == eb.task);
      CHECK(ea.query_ids == eb.query_ids);
      CHECK(ea.target_ids == eb.target_ids);
    }
  }

  SUBCASE("ratio over 10k draws within two points of 70/30") {
    MixStream stream(r.corpus, stops, 9);
    int rsp = 0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
      if (stream.next().task == TaskKind::kRecurringSpan) ++rsp;
    }
    double frac = static_cast<double>(rsp) / draws;
    CHECK(frac > 0.68);
    CHECK(frac < 0.72);
  }

  SUBCASE("all-unique-word corpus degenerates to pure next-sentence generation") {
    std::string text;
    int w = 0;
    for (int s = 0; s < 8; ++s) {
      for (int k = 0; k < 4; ++k) text += "only" + std::to_string(w++) + " ";
      text += ". ";
    }
    IngestResult u = ingest_records({{"u", text}}, {1});
    Stopwords ustops = stopwords_for(u.vocab);
    MixStream stream(u.corpus, ustops, 3);
    for (int i = 0; i < 200; ++i) {
      CHECK(stream.next().task == TaskKind::kNextSentence);
    }
  }
}

TEST_CASE("pretrain step: initial loss near ln V; zero learning rate freezes parameters") {
  std::vector<std::pair<std::string, std::string>> records;
  for (int d = 0; d < 4; ++d) {
    std::string text;
    for (int s = 0; s < 6; ++s) {
      text += "key" + std::to_string(d) + " item" + std::to_string(s) + " key" +
              std::to_string(d) + " more" + std::to_string(s) + " . ";
    }
    records.emplace_back("d" + std::to_string(d), text);
  }
  IngestResult r = ingest_records(records, {1});
  Stopwords stops = stopwords_for(r.vocab);

  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.n_enc_layers = 2;
  cfg.n_dec_layers = 2;
  cfg.n_plug = 1;
  cfg.vocab_size = r.vocab.size();
  cfg.max_len = 128;
  Model model(cfg, 21);

  MixStream stream(r.corpus, stops, 5);
  std::vector<TrainingExample> batch{stream.next(), stream.next()};
  Tensor loss = pretrain_step(model, batch);
  double per_example = loss.item() / 2.0;
  double lnv = std::log(static_cast<double>(cfg.vocab_size));
  CHECK(std::abs(per_example - lnv) / lnv < 0.05);
  model.zero_grads();

  // zero learning rate: parameters bitwise unchanged after a full step
  std::vector<std::vector<double>> before;
  for (const auto& p : model.params()) before.push_back(p.data());
  PretrainOptions opts;
  opts.steps = 2;
  opts.batch_size = 1;
  opts.lr = 0.0;
  opts.seed = 11;
  (void)pretrain(model, r.corpus, stops, opts);
  size_t i = 0;
  for (const auto& p : model.params()) CHECK(p.data() == before[i++]);
}

TEST_CASE("stopword list file matches the tokenizer's lowercase convention") {
  std::string path = std::string(DOCPLUG_SOURCE_DIR) + "/data/stopwords.txt";
  std::string content = read_file(path);
  REQUIRE(!content.empty());
  // pronouns and their inflections are present
  for (const char* w : {"i", "you", "he", "she", "it", "we", "they", "him", "her", "them",
                        "his", "hers", "its", "theirs", "myself", "themselves"}) {
    CHECK(content.find(std::string("\n") + w + "\n") != std::string::npos);
  }
}
