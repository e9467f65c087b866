// Mechanism probe: can the plugged pathway learn key->code retrieval when
// trained on it directly? Random-init model, inputs are a bare key query
// plus the document plugin, target is the code. Evaluated on unseen docs.
#include <cstdio>

#include "docplug/adapt.hpp"
#include "docplug/optim.hpp"
#include "docplug/plugin.hpp"
#include "docplug/taskbench.hpp"

using namespace docplug;

int main(int argc, char** argv) {
  int steps = argc > 1 ? std::atoi(argv[1]) : 1500;
  double lr = argc > 2 ? std::atof(argv[2]) : 1e-3;
  int n_plug = argc > 3 ? std::atoi(argv[3]) : 2;
  int pairs = argc > 4 ? std::atoi(argv[4]) : 5;
  bool query_template = argc > 5 ? std::atoi(argv[5]) != 0 : true;
  int d_model = argc > 6 ? std::atoi(argv[6]) : 64;
  int n_layers = argc > 7 ? std::atoi(argv[7]) : 4;
  int batch = argc > 8 ? std::atoi(argv[8]) : 4;

  SyntheticTask task = gen_task({200, pairs, 2, 42, 800});
  IngestResult r = ingest_records(task.corpus_records, {2});
  std::printf("steps=%d lr=%g n_plug=%d pairs=%d d=%d layers=%d batch=%d vocab=%d\n", steps, lr,
              n_plug, pairs, d_model, n_layers, batch, r.vocab.size());

  ModelConfig cfg;
  cfg.d_model = d_model;
  cfg.n_heads = 4;
  cfg.d_ff = 2 * d_model;
  cfg.n_enc_layers = n_layers;
  cfg.n_dec_layers = n_layers;
  cfg.n_plug = n_plug;
  cfg.vocab_size = r.vocab.size();
  cfg.max_len = 256;
  Model model(cfg, 42);

  // training pool: docs 200.. ; eval: task docs 0..199 (unseen bindings)
  auto key_of = [&](const std::string& query) {
    // queries look like "the code of kN is"
    size_t at = query.find(" k");
    std::string tail = query.substr(at + 1);
    return tail.substr(0, tail.find(' '));
  };

  auto make_example = [&](const Document& doc, Rng& rng, std::vector<int>& q,
                          std::vector<int>& t) {
    // pick a random fact sentence: keys sit two tokens before the code
    std::vector<std::pair<int, int>> key_positions;  // (sentence, key offset)
    for (int s = 0; s < static_cast<int>(doc.sentences.size()); ++s) {
      const auto& sent = doc.sentences[static_cast<size_t>(s)];
      for (int i = 0; i + 3 < static_cast<int>(sent.size()); ++i) {
        const std::string& tok = r.vocab.token_of(sent[static_cast<size_t>(i)]);
        if (tok.size() >= 2 && tok[0] == 'k' && std::isdigit(static_cast<unsigned char>(tok[1]))) {
          key_positions.push_back({s, i});
          break;  // one key per sentence
        }
      }
    }
    auto [s, i] = key_positions[static_cast<size_t>(rng.next_below(key_positions.size()))];
    const auto& sent = doc.sentences[static_cast<size_t>(s)];
    int key_id = sent[static_cast<size_t>(i)];
    int a = sent[static_cast<size_t>(i) + 2];
    int b = sent[static_cast<size_t>(i) + 3];
    q.clear();
    if (query_template) {
      for (const char* w : {"the", "code", "of"}) q.push_back(r.vocab.id_of(w));
      q.push_back(key_id);
      q.push_back(r.vocab.id_of("is"));
    } else {
      q.push_back(key_id);
    }
    t = {a, b, kEosId};
  };

  Adam opt(model.params(), lr);
  Rng rng(7);
  size_t pool_begin = 200;
  for (int step = 0; step < steps; ++step) {
    opt.zero_grad();
    Tensor total;
    for (int bi = 0; bi < batch; ++bi) {
      const Document& doc =
          r.corpus.docs[pool_begin + rng.next_below(r.corpus.docs.size() - pool_begin)];
      std::vector<int> q, t;
      make_example(doc, rng, q, t);
      std::vector<int> ctx = doc.all_tokens();
      Tensor h;
      {
        NoGradGuard ng;
        h = model.encode(ctx);  // frozen plugin, like downstream tuning
      }
      Prefixes p = model.map_prefix(h);
      Tensor loss = model.decode_loss(model.encode(q, &p), t);
      total = total.defined() ? add(total, loss) : loss;
    }
    backward(total);
    opt.step();
    if (step % 100 == 0) {
      std::printf("  step %d loss %.3f\n", step, total.item() / batch);
      std::fflush(stdout);
    }
  }

  // exact-match on unseen task docs
  NoGradGuard ng;
  int hits = 0, n = 0;
  for (const auto& row : task.qa.test) {
    const Document& doc = r.corpus.by_id(row.doc_id);
    Tensor h = model.encode(doc.all_tokens());
    Prefixes p = model.map_prefix(h);
    std::vector<int> q;
    if (query_template) {
      q = tokenize(row.query, r.vocab);
    } else {
      q = {r.vocab.id_of(key_of(row.query))};
    }
    std::vector<int> out = model.generate_greedy(q, &p, 4);
    if (out == tokenize(row.answer, r.vocab)) ++hits;
    ++n;
  }
  std::printf("unseen-doc EM = %.3f over %d rows\n", static_cast<double>(hits) / n, n);
  return 0;
}
