// Command-line surface: encode documents once into a plugin store, then
// plug them into task models for training and inference.
//
//   gen-task   synthesize the key-value document collection and task files
//   pretrain   self-supervised plugin learning over a corpus
//   encode     build a plugin store from a corpus and a checkpoint
//   finetune   tune a task model (PET or full) with or without plugins
//   eval       score a task file; plugins optional or coupled upper bound
//   infer      answer a single query
//   bench      analytic inference-cost model (coupled vs plugged)

#include <sys/stat.h>

#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "docplug/adapt.hpp"
#include "docplug/costmodel.hpp"
#include "docplug/model.hpp"
#include "docplug/optim.hpp"
#include "docplug/plugin.hpp"
#include "docplug/pretrain.hpp"
#include "docplug/store.hpp"
#include "docplug/taskbench.hpp"
#include "json.hpp"

namespace {

using namespace docplug;

void ensure_dir(const std::string& path) {
  struct stat st {};
  if (stat(path.c_str(), &st) == 0) {
    if (!S_ISDIR(st.st_mode)) throw IoError("not a directory: " + path);
    return;
  }
  if (mkdir(path.c_str(), 0755) != 0) throw IoError("cannot create directory: " + path);
}

// Config file values fill in options the user did not pass on the command
// line; explicit flags always win.
struct ConfigLayer {
  std::map<std::string, std::string> values;

  void load(const std::string& path) { values = read_kv_file(path); }

  template <typename T>
  void fill(const CLI::Option* opt, const std::string& key, T& target) const {
    if (opt && opt->count() > 0) return;
    auto it = values.find(key);
    if (it == values.end()) return;
    std::istringstream in(it->second);
    T parsed;
    if constexpr (std::is_same_v<T, std::string>) {
      parsed = it->second;
    } else {
      in >> parsed;
      if (in.fail()) throw FormatError("config value for " + key + " unparsable: " + it->second);
    }
    target = parsed;
  }
};

std::string losses_csv(const std::vector<double>& losses) {
  std::ostringstream out;
  out << "step,loss\n";
  out.precision(17);
  for (size_t i = 0; i < losses.size(); ++i) out << i << "," << losses[i] << "\n";
  return out.str();
}

void write_run_config(const std::string& dir, const std::map<std::string, std::string>& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  write_file_atomic(dir + "/run_config.txt", out);
}

struct ModelFlags {
  int d_model = 64, n_heads = 4, d_ff = 128, n_enc = 4, n_dec = 4, n_plug = 2, max_len = 256;
  std::string sharing = "shared";

  ModelConfig to_config(int vocab_size) const {
    ModelConfig cfg;
    cfg.d_model = d_model;
    cfg.n_heads = n_heads;
    cfg.d_ff = d_ff;
    cfg.n_enc_layers = n_enc;
    cfg.n_dec_layers = n_dec;
    cfg.n_plug = n_plug;
    cfg.max_len = max_len;
    cfg.vocab_size = vocab_size;
    if (sharing == "shared") {
      cfg.plugin_sharing = PluginSharing::kShared;
    } else if (sharing == "per_layer") {
      cfg.plugin_sharing = PluginSharing::kPerLayer;
    } else {
      throw InputError("plugin_sharing must be shared or per_layer");
    }
    cfg.validate();
    return cfg;
  }
};

int run(int argc, char** argv) {
  CLI::App app{"plug-and-play document modules for a desk-scale transformer"};
  app.require_subcommand(1);

  // ---- gen-task ----
  auto* gen = app.add_subcommand("gen-task", "generate the synthetic key-value benchmark");
  std::string gen_out = "task";
  int gen_docs = 200, gen_pairs = 5, gen_distractors = 2;
  uint64_t gen_seed = 42;
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--n-docs", gen_docs);
  gen->add_option("--pairs", gen_pairs);
  gen->add_option("--distractors", gen_distractors);
  gen->add_option("--seed", gen_seed);

  // ---- pretrain ----
  auto* pre = app.add_subcommand("pretrain", "self-supervised plugin learning");
  std::string pre_corpus, pre_out = "run", pre_config, pre_stopwords = "data/stopwords.txt";
  int pre_steps = 2000, pre_batch = 2, pre_min_count = 2;
  double pre_lr = 2e-4;
  uint64_t pre_seed = 42;
  ModelFlags pre_model;
  pre->add_option("--corpus", pre_corpus, "corpus JSONL")->required();
  pre->add_option("--out", pre_out, "output directory");
  pre->add_option("--config", pre_config, "key=value config file");
  pre->add_option("--stopwords", pre_stopwords);
  auto* o_steps = pre->add_option("--steps", pre_steps);
  auto* o_batch = pre->add_option("--batch", pre_batch);
  auto* o_lr = pre->add_option("--lr", pre_lr);
  pre->add_option("--seed", pre_seed);
  pre->add_option("--min-count", pre_min_count, "vocabulary frequency cutoff");
  auto* o_dm = pre->add_option("--d-model", pre_model.d_model);
  auto* o_nh = pre->add_option("--n-heads", pre_model.n_heads);
  auto* o_dff = pre->add_option("--d-ff", pre_model.d_ff);
  auto* o_ne = pre->add_option("--n-enc", pre_model.n_enc);
  auto* o_nd = pre->add_option("--n-dec", pre_model.n_dec);
  auto* o_np = pre->add_option("--n-plug", pre_model.n_plug);
  auto* o_ml = pre->add_option("--max-len", pre_model.max_len);
  auto* o_sh = pre->add_option("--sharing", pre_model.sharing, "shared | per_layer");

  // ---- encode ----
  auto* enc = app.add_subcommand("encode", "encode a corpus into a plugin store");
  std::string enc_ckpt, enc_corpus, enc_out = "plugins.plgd";
  enc->add_option("--checkpoint", enc_ckpt)->required();
  enc->add_option("--corpus", enc_corpus)->required();
  enc->add_option("--out", enc_out, "store file");

  // ---- finetune ----
  auto* fin = app.add_subcommand("finetune", "downstream task tuning");
  std::string fin_ckpt, fin_train, fin_out = "task_run", fin_store, fin_corpus, fin_config;
  std::string fin_mode = "pet", fin_plugging = "during";
  int fin_steps = 1200, fin_batch = 2, fin_adapter_r = 16;
  double fin_lr = -1.0;
  uint64_t fin_seed = 42;
  bool fin_force = false;
  fin->add_option("--checkpoint", fin_ckpt)->required();
  fin->add_option("--train", fin_train, "task rows JSONL")->required();
  fin->add_option("--out", fin_out);
  fin->add_option("--store", fin_store, "plugin store (needed for --plugging during)");
  fin->add_option("--corpus", fin_corpus, "corpus JSONL (needed for --plugging coupled)");
  fin->add_option("--config", fin_config);
  fin->add_option("--mode", fin_mode, "pet | full");
  fin->add_option("--plugging", fin_plugging, "during | none | coupled");
  auto* f_steps = fin->add_option("--steps", fin_steps);
  auto* f_batch = fin->add_option("--batch", fin_batch);
  auto* f_lr = fin->add_option("--lr", fin_lr, "default: 1e-3 for pet, 2e-5 for full");
  auto* f_ar = fin->add_option("--adapter-r", fin_adapter_r);
  fin->add_option("--seed", fin_seed);
  fin->add_flag("--force", fin_force, "skip the plugin/model hash check");

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "score a task file");
  std::string ev_ckpt, ev_data, ev_store, ev_corpus, ev_report, ev_mode = "none", ev_kind = "qa";
  bool ev_plug_alias = false, ev_force = false;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--store", ev_store);
  ev->add_option("--corpus", ev_corpus, "needed for --mode coupled");
  ev->add_option("--mode", ev_mode, "none | plugged | coupled");
  ev->add_option("--kind", ev_kind, "qa | verify");
  ev->add_option("--report", ev_report, "write metrics JSON here");
  ev->add_flag("--plug-at-inference", ev_plug_alias, "shorthand for --mode plugged");
  ev->add_flag("--force", ev_force);

  // ---- infer ----
  auto* inf = app.add_subcommand("infer", "answer one query");
  std::string inf_ckpt, inf_query, inf_store;
  std::string inf_doc;
  bool inf_plug = false, inf_force = false;
  int inf_max_new = 16;
  inf->add_option("--checkpoint", inf_ckpt)->required();
  inf->add_option("--query", inf_query)->required();
  inf->add_option("--store", inf_store);
  inf->add_option("--doc-id", inf_doc);
  inf->add_flag("--plug", inf_plug, "insert the document plugin before decoding");
  inf->add_flag("--force", inf_force);
  inf->add_option("--max-new", inf_max_new);

  // ---- bench ----
  auto* bench = app.add_subcommand("bench", "analytic FLOPs model");
  std::string bench_config = "configs/t5_large.cfg", bench_json, bench_csv;
  int bench_lq = 48, bench_ld = 512, bench_lans = 32;
  bool bench_no_mapping = false, bench_sweep = false;
  bench->add_option("--paper-config", bench_config, "architecture key=value file");
  bench->add_option("--L-q", bench_lq);
  bench->add_option("--L-d", bench_ld);
  bench->add_option("--L-ans", bench_lans);
  bench->add_flag("--no-mapping", bench_no_mapping, "exclude the mapping network cost");
  bench->add_option("--json", bench_json, "write the report JSON here");
  bench->add_flag("--sweep", bench_sweep, "emit a CSV over document lengths");
  bench->add_option("--csv", bench_csv, "write the sweep CSV here (default stdout)");

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) {
    SyntheticTask task = gen_task({gen_docs, gen_pairs, gen_distractors, gen_seed});
    ensure_dir(gen_out);
    save_task(task, gen_out);
    write_run_config(gen_out, {{"subcommand", "gen-task"},
                               {"n_docs", std::to_string(gen_docs)},
                               {"pairs", std::to_string(gen_pairs)},
                               {"distractors", std::to_string(gen_distractors)},
                               {"seed", std::to_string(gen_seed)}});
    std::cout << "seed=" << gen_seed << " docs=" << gen_docs
              << " qa_rows=" << task.qa.train.size() + task.qa.dev.size() + task.qa.test.size()
              << " -> " << gen_out << "\n";
    return 0;
  }

  if (pre->parsed()) {
    ConfigLayer cfg;
    if (!pre_config.empty()) cfg.load(pre_config);
    cfg.fill(o_steps, "pretrain_steps", pre_steps);
    cfg.fill(o_batch, "pretrain_batch", pre_batch);
    cfg.fill(o_lr, "pretrain_lr", pre_lr);
    cfg.fill(o_dm, "d_model", pre_model.d_model);
    cfg.fill(o_nh, "n_heads", pre_model.n_heads);
    cfg.fill(o_dff, "d_ff", pre_model.d_ff);
    cfg.fill(o_ne, "n_enc_layers", pre_model.n_enc);
    cfg.fill(o_nd, "n_dec_layers", pre_model.n_dec);
    cfg.fill(o_np, "n_plug", pre_model.n_plug);
    cfg.fill(o_ml, "max_len", pre_model.max_len);
    cfg.fill(o_sh, "plugin_sharing", pre_model.sharing);

    IngestOptions iopts;
    iopts.min_count = pre_min_count;
    IngestResult ingested = ingest_corpus(pre_corpus, iopts);
    Stopwords stops = Stopwords::load(pre_stopwords, ingested.vocab);
    Model model(pre_model.to_config(ingested.vocab.size()), pre_seed);

    std::cout << "seed=" << pre_seed << " vocab=" << ingested.vocab.size()
              << " docs=" << ingested.corpus.size() << " steps=" << pre_steps << "\n";
    PretrainOptions popts;
    popts.steps = pre_steps;
    popts.batch_size = pre_batch;
    popts.lr = pre_lr;
    popts.seed = pre_seed;
    popts.on_step = [&](int step, double loss) {
      if (step % 100 == 0) std::cout << "step " << step << "  loss " << loss << "\n";
    };
    std::vector<double> losses = pretrain(model, ingested.corpus, stops, popts);

    ensure_dir(pre_out);
    save_checkpoint(model, ingested.vocab, pre_out + "/backbone.ckpt", /*restamp_origin=*/true);
    ingested.vocab.save(pre_out + "/vocab.txt");
    write_file_atomic(pre_out + "/losses.csv", losses_csv(losses));
    write_run_config(pre_out, {{"subcommand", "pretrain"},
                               {"corpus", pre_corpus},
                               {"steps", std::to_string(pre_steps)},
                               {"batch", std::to_string(pre_batch)},
                               {"lr", std::to_string(pre_lr)},
                               {"seed", std::to_string(pre_seed)},
                               {"min_count", std::to_string(pre_min_count)},
                               {"d_model", std::to_string(pre_model.d_model)},
                               {"n_heads", std::to_string(pre_model.n_heads)},
                               {"d_ff", std::to_string(pre_model.d_ff)},
                               {"n_enc_layers", std::to_string(pre_model.n_enc)},
                               {"n_dec_layers", std::to_string(pre_model.n_dec)},
                               {"n_plug", std::to_string(pre_model.n_plug)},
                               {"max_len", std::to_string(pre_model.max_len)},
                               {"plugin_sharing", pre_model.sharing},
                               {"stopwords", pre_stopwords}});
    std::cout << "final loss " << losses.back() << " -> " << pre_out << "/backbone.ckpt\n";
    return 0;
  }

  if (enc->parsed()) {
    LoadedModel loaded = load_checkpoint(enc_ckpt);
    Corpus corpus = tokenize_records(read_corpus_records(enc_corpus), loaded.vocab);
    PluginStore store =
        PluginStore::create(enc_out, loaded.model->origin_hash(), loaded.model->config().d_model);
    for (const auto& doc : corpus.docs) {
      store.save(encode_document(doc, *loaded.model));
    }
    write_file_atomic(enc_out + ".run.txt", "subcommand = encode\ncheckpoint = " + enc_ckpt +
                                                "\ncorpus = " + enc_corpus + "\n");
    std::cout << "encoded " << store.count() << " documents -> " << enc_out << "\n";
    return 0;
  }

  if (fin->parsed()) {
    ConfigLayer cfg;
    if (!fin_config.empty()) cfg.load(fin_config);
    cfg.fill(f_steps, "finetune_steps", fin_steps);
    cfg.fill(f_batch, "finetune_batch", fin_batch);
    cfg.fill(f_ar, "adapter_r", fin_adapter_r);

    LoadedModel loaded = load_checkpoint(fin_ckpt);
    Model& model = *loaded.model;
    DownstreamOptions opts;
    if (fin_mode == "pet") {
      opts.mode = TuneMode::kPet;
      opts.lr = 1e-3;
      cfg.fill(f_lr, "pet_lr", opts.lr);
    } else if (fin_mode == "full") {
      opts.mode = TuneMode::kFull;
      opts.lr = 2e-5;
      cfg.fill(f_lr, "full_lr", opts.lr);
    } else {
      throw InputError("--mode must be pet or full");
    }
    if (f_lr->count() > 0) opts.lr = fin_lr;
    if (fin_plugging == "during") {
      opts.input = TrainInput::kPluggedDuring;
    } else if (fin_plugging == "none") {
      opts.input = TrainInput::kQueryOnly;
    } else if (fin_plugging == "coupled") {
      opts.input = TrainInput::kCoupled;
    } else {
      throw InputError("--plugging must be during, none or coupled");
    }
    opts.steps = fin_steps;
    opts.batch_size = fin_batch;
    opts.seed = fin_seed;
    opts.force = fin_force;
    opts.on_step = [&](int step, double loss) {
      if (step % 100 == 0) std::cout << "step " << step << "  loss " << loss << "\n";
    };

    if (opts.mode == TuneMode::kPet && !model.has_adapters()) {
      attach_adapters(model, {fin_adapter_r, 1e-2, fin_seed ^ 0x5eedu});
    }
    std::optional<PluginStore> store;
    if (!fin_store.empty()) store = PluginStore::open(fin_store);
    std::optional<Corpus> corpus;
    if (!fin_corpus.empty()) {
      corpus = tokenize_records(read_corpus_records(fin_corpus), loaded.vocab);
    }
    std::vector<TaskRow> rows = load_task_rows(fin_train);
    std::cout << "seed=" << fin_seed << " rows=" << rows.size() << " mode=" << fin_mode
              << " plugging=" << fin_plugging << " lr=" << opts.lr << "\n";
    std::vector<double> losses =
        train_downstream(model, loaded.vocab, store ? &*store : nullptr,
                         corpus ? &*corpus : nullptr, rows, opts);

    ensure_dir(fin_out);
    save_checkpoint(model, loaded.vocab, fin_out + "/task.ckpt", /*restamp_origin=*/false);
    write_file_atomic(fin_out + "/losses.csv", losses_csv(losses));
    write_run_config(fin_out, {{"subcommand", "finetune"},
                               {"checkpoint", fin_ckpt},
                               {"train", fin_train},
                               {"store", fin_store},
                               {"mode", fin_mode},
                               {"plugging", fin_plugging},
                               {"steps", std::to_string(fin_steps)},
                               {"batch", std::to_string(fin_batch)},
                               {"lr", std::to_string(opts.lr)},
                               {"adapter_r", std::to_string(fin_adapter_r)},
                               {"seed", std::to_string(fin_seed)}});
    std::cout << "final loss " << losses.back() << " -> " << fin_out << "/task.ckpt\n";
    return 0;
  }

  if (ev->parsed()) {
    LoadedModel loaded = load_checkpoint(ev_ckpt);
    if (ev_plug_alias) ev_mode = "plugged";
    EvalMode mode;
    if (ev_mode == "none") {
      mode = EvalMode::kNone;
    } else if (ev_mode == "plugged") {
      mode = EvalMode::kPlugged;
    } else if (ev_mode == "coupled") {
      mode = EvalMode::kCoupled;
    } else {
      throw InputError("--mode must be none, plugged or coupled");
    }
    EvalKind kind;
    if (ev_kind == "qa") {
      kind = EvalKind::kGenerate;
    } else if (ev_kind == "verify") {
      kind = EvalKind::kYesNo;
    } else {
      throw InputError("--kind must be qa or verify");
    }
    std::optional<PluginStore> store;
    if (!ev_store.empty()) store = PluginStore::open(ev_store);
    std::optional<Corpus> corpus;
    if (!ev_corpus.empty()) {
      corpus = tokenize_records(read_corpus_records(ev_corpus), loaded.vocab);
    }
    std::vector<TaskRow> rows = load_task_rows(ev_data);
    EvalMetrics m = evaluate(*loaded.model, loaded.vocab, rows, mode, kind,
                             store ? &*store : nullptr, corpus ? &*corpus : nullptr, ev_force);
    std::map<std::string, EvalMetrics> named{{ev_mode + "/" + ev_kind, m}};
    std::cout << metrics_table(named);
    if (!ev_report.empty()) write_file_atomic(ev_report, metrics_json(named));
    return 0;
  }

  if (inf->parsed()) {
    LoadedModel loaded = load_checkpoint(inf_ckpt);
    std::optional<PluginStore> store;
    if (!inf_store.empty()) store = PluginStore::open(inf_store);
    std::optional<std::string> doc_id;
    if (!inf_doc.empty()) doc_id = inf_doc;
    std::vector<int> answer = infer(*loaded.model, loaded.vocab, store ? &*store : nullptr,
                                    inf_query, doc_id, inf_plug, inf_max_new, inf_force);
    std::cout << detokenize(answer, loaded.vocab) << "\n";
    return 0;
  }

  if (bench->parsed()) {
    CostConfig cfg = CostConfig::from_kv_file(bench_config);
    if (bench_sweep) {
      std::string csv = cost_sweep_csv(cfg, bench_lq, bench_lans,
                                       {64, 128, 256, 512, 1024, 2048, 4096, 8192},
                                       !bench_no_mapping);
      if (bench_csv.empty()) {
        std::cout << csv;
      } else {
        write_file_atomic(bench_csv, csv);
        std::cout << "wrote " << bench_csv << "\n";
      }
      return 0;
    }
    CostComparison cmp = compare_costs(cfg, bench_lq, bench_ld, bench_lans, !bench_no_mapping);
    std::cout << cost_report_table(cmp, bench_lq, bench_ld, bench_lans);
    if (!bench_json.empty()) {
      write_file_atomic(bench_json, cost_report_json(cmp, bench_lq, bench_ld, bench_lans));
      std::cout << "wrote " << bench_json << "\n";
    }
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const docplug::CompatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
