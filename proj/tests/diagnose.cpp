// Diagnostic: does plugin learning teach value retrieval from the prefix?
#include <cstdio>
#include <numeric>

#include "docplug/adapt.hpp"
#include "docplug/plugin.hpp"
#include "docplug/pretrain.hpp"
#include "docplug/taskbench.hpp"

using namespace docplug;

int main(int argc, char** argv) {
  int pretrain_steps = argc > 1 ? std::atoi(argv[1]) : 2000;
  double lr = argc > 2 ? std::atof(argv[2]) : 2e-4;
  int batch = argc > 3 ? std::atoi(argv[3]) : 2;
  int n_plug = argc > 4 ? std::atoi(argv[4]) : 2;
  int d_model = argc > 5 ? std::atoi(argv[5]) : 64;
  int heads = argc > 6 ? std::atoi(argv[6]) : 4;
  int pool = argc > 7 ? std::atoi(argv[7]) : 1000;  // pretrain docs beyond the 200 task docs
  int pairs = argc > 8 ? std::atoi(argv[8]) : 5;
  double attn_scale = argc > 9 ? std::atof(argv[9]) : 1.0;
  char tag[160];
  std::snprintf(tag, sizeof(tag), "s%d_lr%g_b%d_p%d_d%d_h%d_pool%d_pp%d_a%g", pretrain_steps, lr,
                batch, n_plug, d_model, heads, pool, pairs, attn_scale);
  std::string ckpt = std::string("/tmp/docplug_diag_") + tag + ".ckpt";
  std::printf("config %s\n", tag);

  SyntheticTask task = gen_task({200, pairs, 2, 42, pool});
  IngestResult r = ingest_records(task.corpus_records, {2});
  Stopwords stops =
      Stopwords::load(std::string(DOCPLUG_SOURCE_DIR) + "/data/stopwords.txt", r.vocab);
  // plugin learning sees only the pool; docs 0..199 stay unseen for probing
  Corpus pretrain_corpus;
  for (size_t i = 200; i < r.corpus.docs.size(); ++i) {
    pretrain_corpus.index[r.corpus.docs[i].doc_id] = static_cast<int>(pretrain_corpus.docs.size());
    pretrain_corpus.docs.push_back(r.corpus.docs[i]);
  }
  std::printf("vocab=%d pretrain_docs=%zu\n", r.vocab.size(), pretrain_corpus.docs.size());

  ModelConfig cfg;
  cfg.d_model = d_model;
  cfg.n_heads = heads;
  cfg.d_ff = 2 * d_model;
  cfg.n_enc_layers = 4;
  cfg.n_dec_layers = 4;
  cfg.n_plug = n_plug;
  cfg.vocab_size = r.vocab.size();
  cfg.max_len = 256;

  std::unique_ptr<Model> model;
  if (file_exists(ckpt)) {
    std::printf("loading %s\n", ckpt.c_str());
    model = load_checkpoint(ckpt).model;
  } else {
    model = std::make_unique<Model>(cfg, 42);
    if (attn_scale != 1.0) {
      for (auto p : model->params()) {
        const std::string& n = p.name();
        if (n.find(".wq") != std::string::npos || n.find(".wk") != std::string::npos) {
          std::vector<double> scaled = p.data();
          for (auto& v : scaled) v *= attn_scale;
          p.apply_update(scaled);
        }
      }
    }
    PretrainOptions popts;
    popts.steps = pretrain_steps;
    popts.batch_size = batch;
    popts.lr = lr;
    popts.seed = 42;
    popts.on_step = [&](int s, double l) {
      if (s % 200 == 0) {
        std::printf("  pretrain %d loss %.3f\n", s, l);
        std::fflush(stdout);
      }
    };
    pretrain(*model, pool > 0 ? pretrain_corpus : r.corpus, stops, popts);
    save_checkpoint(*model, r.vocab, ckpt, true);
  }

  // RSP-style cloze probe on training documents: query = S1 with the code
  // masked, context = the rest of the document. Compare target NLL with the
  // plugin inserted vs without, and report greedy EM of the code tokens.
  NoGradGuard ng;
  int n_docs_probe = 50;
  double nll_plug = 0, nll_none = 0;
  int em_plug = 0, em_none = 0, n_rows = 0;
  for (int d = 0; d < n_docs_probe; ++d) {
    const Document& doc = r.corpus.by_id("doc" + std::to_string(d));
    auto spans = mine_recurring_spans(doc, stops);
    auto ex = build_rsp_example(doc, spans, 1234 + d);
    if (!ex) continue;
    std::vector<int> ctx = ex->context_doc.all_tokens();
    Tensor h = model->encode(ctx);
    Prefixes p = model->map_prefix(h);
    Tensor enc_p = model->encode(ex->query_ids, &p);
    Tensor enc_n = model->encode(ex->query_ids);
    nll_plug += model->decode_loss(enc_p, ex->target_ids).item();
    nll_none += model->decode_loss(enc_n, ex->target_ids).item();
    ++n_rows;
  }
  std::printf("RSP cloze over %d docs: NLL plugged=%.3f none=%.3f (plugin gain %.3f)\n", n_rows,
              nll_plug / n_rows, nll_none / n_rows, (nll_none - nll_plug) / n_rows);

  // Direct value retrieval probe: query "the code of kN is <extra> ." with
  // S2 ("agent kN keeps A B in the vault") left in the context.
  int hits = 0, total = 0;
  for (const auto& row : task.qa.train) {
    if (total >= 100) break;
    const Document& doc = r.corpus.by_id(row.doc_id);
    std::string key = row.query.substr(std::string("the code of ").size());
    key = key.substr(0, key.find(' '));
    // context: everything but the S1 sentence of this key
    Document ctx;
    ctx.doc_id = doc.doc_id;
    std::vector<int> key_id{r.vocab.id_of(key)};
    std::vector<int> s1;
    for (const auto& sent : doc.sentences) {
      bool is_s1 = sent.size() > 2 && sent[0] == r.vocab.id_of("the") &&
                   sent[3] == key_id[0];
      if (is_s1 && s1.empty()) {
        s1 = sent;
      } else {
        ctx.sentences.push_back(sent);
      }
    }
    if (s1.empty()) continue;
    // masked query: replace the code tokens (positions 5,6) with one sentinel
    std::vector<int> query(s1.begin(), s1.begin() + 5);
    query.push_back(sentinel_id(0));
    query.push_back(s1.back());  // '.'
    std::vector<int> gold = tokenize(row.answer, r.vocab);
    std::vector<int> target{sentinel_id(0)};
    target.insert(target.end(), gold.begin(), gold.end());
    target.push_back(kEosId);

    Tensor h = model->encode(ctx.all_tokens());
    Prefixes p = model->map_prefix(h);
    std::vector<int> out_p = model->generate_greedy(query, &p, 6);
    std::vector<int> out_n = model->generate_greedy(query, nullptr, 6);
    std::vector<int> expect_p{sentinel_id(0), gold[0], gold[1]};
    if (out_p.size() >= 3 && std::vector<int>(out_p.begin(), out_p.begin() + 3) == expect_p) {
      ++em_plug;
    }
    if (out_n.size() >= 3 && std::vector<int>(out_n.begin(), out_n.begin() + 3) == expect_p) {
      ++em_none;
    }
    ++total;
  }
  std::printf("cloze retrieval EM over %d rows: plugged=%.2f none=%.2f\n", total,
              double(em_plug) / total, double(em_none) / total);
  (void)hits;
  return 0;
}
