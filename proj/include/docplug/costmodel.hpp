#pragma once

#include <map>
#include <string>

#include "docplug/model.hpp"

namespace docplug {

// Architecture knobs for the analytic FLOP model. Kept separate from
// ModelConfig so paper-scale dimensions can be analyzed without ever
// instantiating the weights.
struct CostConfig {
  int d_model = 1024;
  int n_heads = 16;
  int d_ff = 4096;
  int n_enc_layers = 24;
  int n_dec_layers = 24;
  int vocab_size = 32128;
  int n_plug_enc = 12;  // encoder layers receiving prefixes
  int n_plug_dec = 12;  // decoder self-attention layers receiving prefixes

  static CostConfig from_kv_file(const std::string& path);
  static CostConfig from_model(const ModelConfig& cfg);
};

// Itemized matmul FLOPs (2*m*k*n per product) for one inference. The same
// convention as the instrumented tensor engine: softmax, norms, biases and
// activations are free.
struct CostReport {
  std::map<std::string, double> components;
  double total = 0.0;

  void add(const std::string& name, double flops);
};

// Encoding-task coupled inference: the document and query are concatenated
// and re-encoded, then L_ans tokens are decoded greedily with step caching
// (cross-attention K/V computed once, self-attention K/V appended per step).
CostReport flops_coupled(const CostConfig& cfg, int L_q, int L_d, int L_ans);

// Plugged inference: the encoder processes only the query; plugged layers
// add prefix K/V projections and wider attention scores; feed-forward cost
// depends on the query length alone. Mapping cost is one pass of
// h + W2.relu(W1.h) over the L_d prefix rows, counted once when enabled.
CostReport flops_plugged(const CostConfig& cfg, int L_q, int L_d, int L_ans,
                         bool count_mapping = true);

struct CostComparison {
  CostReport coupled;
  CostReport plugged;
  double ratio = 0.0;    // coupled / plugged
  double savings = 0.0;  // 1 - plugged / coupled
};

CostComparison compare_costs(const CostConfig& cfg, int L_q, int L_d, int L_ans,
                             bool count_mapping = true);

// Runs real coupled and plugged inference through the instrumented engine on
// a toy model and returns the maximum relative deviation between the
// FlopCounter totals and the analytic model.
double validate_against_engine(const Model& model, int L_q, int L_d, int L_ans);

std::string cost_report_json(const CostComparison& cmp, int L_q, int L_d, int L_ans);
std::string cost_report_table(const CostComparison& cmp, int L_q, int L_d, int L_ans);
// CSV sweep over document lengths at fixed L_q, L_ans.
std::string cost_sweep_csv(const CostConfig& cfg, int L_q, int L_ans,
                           const std::vector<int>& doc_lengths, bool count_mapping = true);

}  // namespace docplug
