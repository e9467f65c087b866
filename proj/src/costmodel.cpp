#include "docplug/costmodel.hpp"

#include <cmath>
#include <sstream>

#include "json.hpp"

namespace docplug {

namespace {

int kv_int(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw FormatError("cost config missing key: " + key);
  return std::stoi(it->second);
}

void check_lengths(int L_q, int L_d, int L_ans) {
  if (L_q < 1 || L_ans < 1 || L_d < 0) {
    throw InputError("cost model: L_q and L_ans must be >= 1, L_d >= 0");
  }
}

}  // namespace

CostConfig CostConfig::from_kv_file(const std::string& path) {
  auto kv = read_kv_file(path);
  CostConfig c;
  c.d_model = kv_int(kv, "d_model");
  c.n_heads = kv_int(kv, "n_heads");
  c.d_ff = kv_int(kv, "d_ff");
  c.n_enc_layers = kv_int(kv, "n_enc_layers");
  c.n_dec_layers = kv_int(kv, "n_dec_layers");
  c.vocab_size = kv_int(kv, "vocab_size");
  c.n_plug_enc = kv_int(kv, "n_plug");
  c.n_plug_dec = kv.count("n_plug_dec") ? kv_int(kv, "n_plug_dec") : 0;
  return c;
}

CostConfig CostConfig::from_model(const ModelConfig& cfg) {
  CostConfig c;
  c.d_model = cfg.d_model;
  c.n_heads = cfg.n_heads;
  c.d_ff = cfg.d_ff;
  c.n_enc_layers = cfg.n_enc_layers;
  c.n_dec_layers = cfg.n_dec_layers;
  c.vocab_size = cfg.vocab_size;
  c.n_plug_enc = cfg.n_plug;
  c.n_plug_dec = 0;  // the engine inserts plugins into the encoder only
  return c;
}

void CostReport::add(const std::string& name, double flops) {
  components[name] += flops;
  total += flops;
}

namespace {

// Decoder cost shared by both settings. L_enc is the encoder output length
// seen by cross-attention; plugged decoders add prefix K/V (computed once,
// cached like cross-attention K/V) plus wider self-attention scores.
void add_decoder(CostReport& r, const CostConfig& cfg, int L_enc, int L_prefix, int L_ans) {
  double d = cfg.d_model;
  double D = cfg.n_dec_layers;
  double T = L_ans;

  // per generated token: Q,K,V,O projections of one row
  double self_proj = D * T * 8.0 * d * d;
  // prefix K/V projections in plugged self-attention layers, once per query
  double self_prefix = static_cast<double>(cfg.n_plug_dec) * 4.0 * L_prefix * d * d;
  // scores over the growing cache (plus the prefix in plugged layers)
  double self_scores = 0.0;
  for (int t = 1; t <= L_ans; ++t) {
    self_scores += (D - cfg.n_plug_dec) * 4.0 * t * d;
    self_scores += static_cast<double>(cfg.n_plug_dec) * 4.0 * (L_prefix + t) * d;
  }
  r.add("decoder.self", self_proj + self_prefix + self_scores);

  double cross_kv = D * 4.0 * L_enc * d * d;      // once per query
  double cross_qo = D * T * 4.0 * d * d;          // per token
  double cross_scores = D * T * 4.0 * L_enc * d;  // per token
  r.add("decoder.cross", cross_kv + cross_qo + cross_scores);

  r.add("decoder.ffn", D * T * 4.0 * d * cfg.d_ff);
  r.add("lm_head", T * 2.0 * d * cfg.vocab_size);
}

}  // namespace

CostReport flops_coupled(const CostConfig& cfg, int L_q, int L_d, int L_ans) {
  check_lengths(L_q, L_d, L_ans);
  CostReport r;
  double d = cfg.d_model;
  double E = cfg.n_enc_layers;
  double L = L_q + L_d;  // document re-encoded with every query

  r.add("encoder.attn.proj", E * 8.0 * L * d * d);
  r.add("encoder.attn.score", E * 4.0 * L * L * d);
  r.add("encoder.ffn", E * 4.0 * L * d * cfg.d_ff);
  CostConfig plain = cfg;
  plain.n_plug_dec = 0;  // coupled inference uses no prefixes anywhere
  add_decoder(r, plain, static_cast<int>(L), 0, L_ans);
  return r;
}

CostReport flops_plugged(const CostConfig& cfg, int L_q, int L_d, int L_ans, bool count_mapping) {
  check_lengths(L_q, L_d, L_ans);
  if (cfg.n_plug_enc > cfg.n_enc_layers || cfg.n_plug_dec > cfg.n_dec_layers) {
    throw InputError("cost model: more plugged layers than layers");
  }
  CostReport r;
  double d = cfg.d_model;
  double E = cfg.n_enc_layers;
  double Pe = cfg.n_plug_enc;

  // queries only flow through Q and the output projection; plugged layers
  // additionally project the L_d prefix rows into K/V
  r.add("encoder.attn.proj", E * 8.0 * L_q * d * d + Pe * 4.0 * L_d * d * d);
  r.add("encoder.attn.score", (E - Pe) * 4.0 * static_cast<double>(L_q) * L_q * d +
                                  Pe * 4.0 * static_cast<double>(L_q) * (L_d + L_q) * d);
  // prefix tokens never enter the feed-forward layers
  r.add("encoder.ffn", E * 4.0 * L_q * d * cfg.d_ff);
  if (count_mapping && (cfg.n_plug_enc > 0 || cfg.n_plug_dec > 0)) {
    r.add("mapping", 8.0 * L_d * d * d);
  }
  add_decoder(r, cfg, L_q, L_d, L_ans);
  return r;
}

CostComparison compare_costs(const CostConfig& cfg, int L_q, int L_d, int L_ans,
                             bool count_mapping) {
  CostComparison cmp;
  cmp.coupled = flops_coupled(cfg, L_q, L_d, L_ans);
  cmp.plugged = flops_plugged(cfg, L_q, L_d, L_ans, count_mapping);
  cmp.ratio = cmp.coupled.total / cmp.plugged.total;
  cmp.savings = 1.0 - cmp.plugged.total / cmp.coupled.total;
  return cmp;
}

double validate_against_engine(const Model& model, int L_q, int L_d, int L_ans) {
  check_lengths(L_q, L_d, L_ans);
  const ModelConfig& mc = model.config();
  CostConfig cfg = CostConfig::from_model(mc);

  auto make_ids = [&](int n) {
    std::vector<int> ids(static_cast<size_t>(n));
    int natural = mc.vocab_size - kReservedIds;
    for (int i = 0; i < n; ++i) ids[static_cast<size_t>(i)] = kReservedIds + (i % natural);
    return ids;
  };
  std::vector<int> doc_ids = make_ids(L_d);
  std::vector<int> query_ids = make_ids(L_q);

  NoGradGuard ng;
  double worst = 0.0;

  // coupled: one concatenated pass
  {
    std::vector<int> both = doc_ids;
    both.insert(both.end(), query_ids.begin(), query_ids.end());
    flop_counter().reset();
    (void)model.generate_greedy(both, nullptr, L_ans, /*stop_at_eos=*/false);
    double engine = static_cast<double>(flop_counter().total());
    double analytic = flops_coupled(cfg, L_q, L_d, L_ans).total;
    worst = std::max(worst, std::abs(engine - analytic) / engine);
  }

  // plugged: document encoded offline, mapping counted at insertion
  {
    Prefixes prefixes;
    bool have_doc = L_d > 0;
    if (have_doc) {
      Tensor raw = model.encode(doc_ids);  // offline, not part of inference cost
      flop_counter().reset();
      prefixes = model.map_prefix(raw);
    } else {
      flop_counter().reset();
    }
    (void)model.generate_greedy(query_ids, have_doc ? &prefixes : nullptr, L_ans,
                                /*stop_at_eos=*/false);
    double engine = static_cast<double>(flop_counter().total());
    double analytic = flops_plugged(cfg, L_q, L_d, L_ans, /*count_mapping=*/true).total;
    worst = std::max(worst, std::abs(engine - analytic) / engine);
  }
  flop_counter().reset();
  return worst;
}

std::string cost_report_json(const CostComparison& cmp, int L_q, int L_d, int L_ans) {
  nlohmann::json j;
  j["lengths"] = {{"L_q", L_q}, {"L_d", L_d}, {"L_ans", L_ans}};
  for (const char* which : {"coupled", "plugged"}) {
    const CostReport& r = std::string(which) == "coupled" ? cmp.coupled : cmp.plugged;
    nlohmann::json comp;
    for (const auto& [name, v] : r.components) comp[name] = v;
    j[which] = {{"components", comp}, {"total", r.total}, {"gflops", r.total / 1e9}};
  }
  j["ratio"] = cmp.ratio;
  j["savings"] = cmp.savings;
  return j.dump(2) + "\n";
}

std::string cost_report_table(const CostComparison& cmp, int L_q, int L_d, int L_ans) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof(line), "inference cost model  (L_q=%d  L_d=%d  L_ans=%d)\n", L_q, L_d,
                L_ans);
  out << line << "\n";
  std::snprintf(line, sizeof(line), "%-22s %14s %14s\n", "component", "coupled", "plugged");
  out << line;
  std::map<std::string, std::pair<double, double>> rows;
  for (const auto& [name, v] : cmp.coupled.components) rows[name].first = v;
  for (const auto& [name, v] : cmp.plugged.components) rows[name].second = v;
  for (const auto& [name, pair] : rows) {
    std::snprintf(line, sizeof(line), "%-22s %14.3e %14.3e\n", name.c_str(), pair.first,
                  pair.second);
    out << line;
  }
  std::snprintf(line, sizeof(line), "%-22s %11.1f G  %11.1f G\n", "total", cmp.coupled.total / 1e9,
                cmp.plugged.total / 1e9);
  out << line;
  std::snprintf(line, sizeof(line), "\nratio (coupled/plugged): %.2f    savings: %.1f%%\n",
                cmp.ratio, 100.0 * cmp.savings);
  out << line;
  return out.str();
}

std::string cost_sweep_csv(const CostConfig& cfg, int L_q, int L_ans,
                           const std::vector<int>& doc_lengths, bool count_mapping) {
  std::ostringstream out;
  out << "L_d,coupled_flops,plugged_flops,ratio,savings\n";
  for (int L_d : doc_lengths) {
    CostComparison cmp = compare_costs(cfg, L_q, L_d, L_ans, count_mapping);
    char line[160];
    std::snprintf(line, sizeof(line), "%d,%.6e,%.6e,%.6f,%.6f\n", L_d, cmp.coupled.total,
                  cmp.plugged.total, cmp.ratio, cmp.savings);
    out << line;
  }
  return out.str();
}

}  // namespace docplug
