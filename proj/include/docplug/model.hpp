#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "docplug/tensor.hpp"
#include "docplug/text.hpp"

namespace docplug {

enum class PluginSharing { kShared, kPerLayer };

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 128;
  int n_enc_layers = 4;
  int n_dec_layers = 4;
  int n_plug = 2;  // number of top encoder layers receiving plugins
  int vocab_size = 0;
  int max_len = 256;
  PluginSharing plugin_sharing = PluginSharing::kShared;
  int max_query_len = 196;
  int max_target_len = 128;
  int adapter_r = 0;  // 0 means no adapters

  void validate() const;
  int d_head() const { return d_model / n_heads; }
  // number of mapping-network (w1, w2) pairs
  int n_mapping() const { return plugin_sharing == PluginSharing::kShared ? 1 : n_plug; }

  std::string to_json() const;
  static ModelConfig from_json(const std::string& json_text);
};

// Mapped prefix tokens ready for insertion. Shared mode carries one tensor
// reused by every plugged layer; per-layer mode carries one per plugged layer.
struct Prefixes {
  std::vector<Tensor> per_layer;
  bool shared = true;

  const Tensor& for_slot(int k) const { return shared ? per_layer.front() : per_layer.at(static_cast<size_t>(k)); }
  int prefix_len() const { return per_layer.empty() ? 0 : per_layer.front().dim(0); }
};

struct AttentionWeights {
  Tensor wq, wk, wv, wo;  // each [d x d]
};

// Attention where queries come from h_q alone while keys/values are computed
// from cat(prefix, h_q). With no prefix this is exactly standard
// self-attention. Output has one row per h_q row; prefix rows are attended
// to but never produce output rows.
Tensor prefix_attention(const Tensor& h_q, const Tensor* prefix, const AttentionWeights& w,
                        int n_heads, const Tensor* additive_mask = nullptr);
// General attention with an explicit key/value source (used for
// cross-attention). additive_mask has shape [rows(h_q) x rows(h_kv)].
Tensor attention(const Tensor& h_q, const Tensor& h_kv, const AttentionWeights& w, int n_heads,
                 const Tensor* additive_mask = nullptr);

// Encoder-decoder transformer with pre-norm residual blocks, learned
// absolute positions for real tokens (prefix tokens get none), a tied
// input/output embedding, and optional plugin prefixes in the top n_plug
// encoder layers.
class Model {
 public:
  Model(ModelConfig cfg, uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  std::unique_ptr<Model> clone() const;

  const ModelConfig& config() const { return cfg_; }

  // --- forward ---
  // trace, when given, receives the output of every encoder layer.
  Tensor encode(const std::vector<int>& ids, const Prefixes* plugin = nullptr,
                std::vector<Tensor>* trace = nullptr) const;
  Tensor decode_loss(const Tensor& encoder_out, const std::vector<int>& target_ids) const;
  // Teacher-forced decoder pass over explicit decoder inputs -> [n x V] logits.
  Tensor decode_logits(const Tensor& encoder_out, const std::vector<int>& decoder_input_ids) const;
  std::vector<int> generate_greedy(const std::vector<int>& ids, const Prefixes* plugin,
                                   int max_new, bool stop_at_eos = true) const;

  // mapping network: p_i = h_i + W2 . relu(W1 . h_i), rowwise
  Tensor map_rows(const Tensor& h, int slot = 0) const;
  Prefixes map_prefix(const Tensor& h_d) const;

  // --- parameters ---
  const std::vector<Tensor>& params() const { return params_; }
  std::vector<Tensor> params_matching(const std::vector<std::string>& prefixes) const;
  Tensor param(const std::string& name) const;
  bool has_param(const std::string& name) const;
  void zero_grads() const;

  void attach_adapters(int r, double init_std, uint64_t seed);
  bool has_adapters() const { return cfg_.adapter_r > 0; }

  // Content hash covers config plus all parameter values at f32 precision.
  Hash32 content_hash() const;
  // Lineage hash of the backbone the plugins were encoded with. Stays fixed
  // through task tuning so stored plugins remain pluggable.
  Hash32 origin_hash() const;
  void restamp_origin();
  void set_origin(const Hash32& h) { origin_ = h; }

  // Rounds every parameter through f32, matching checkpoint precision.
  void quantize_params_f32();

 private:
  struct Layer {
    Tensor ln1_g, ln1_b;
    AttentionWeights self_attn;
    Tensor ln_cross_g, ln_cross_b;  // decoder only
    AttentionWeights cross_attn;    // decoder only
    Tensor ln2_g, ln2_b;
    Tensor ffn_w1, ffn_w2;
    Tensor adapter_down, adapter_up;  // optional
  };

  Tensor register_param(const std::string& name, Tensor t);
  Tensor make_weight(const std::string& name, std::vector<int> shape, Rng& rng, double stddev);
  void build_layers(Rng& rng);
  Tensor embed_with_positions(const std::vector<int>& ids) const;
  Tensor encoder_layer_forward(int layer_idx, const Tensor& x, const Tensor* prefix) const;
  Tensor ffn_block(const Layer& layer, const Tensor& x) const;
  Tensor output_logits(const Tensor& h) const;

  ModelConfig cfg_;
  Tensor tok_embed_;  // [V x d], tied with the output projection
  Tensor pos_embed_;  // [max_len x d]
  std::vector<Layer> enc_layers_;
  std::vector<Layer> dec_layers_;
  Tensor enc_final_g_, enc_final_b_;
  Tensor dec_final_g_, dec_final_b_;
  std::vector<Tensor> map_w1_, map_w2_;
  std::vector<Tensor> params_;
  std::map<std::string, Tensor> by_name_;
  std::optional<Hash32> origin_;

  friend struct ModelIo;
};

// h + relu(h . w_down) . w_up  — bottleneck residual adapter
Tensor adapter_forward(const Tensor& h, const Tensor& w_down, const Tensor& w_up);

// --- checkpoints ---
// Layout: "DPCK" | u32 version | u64 header_len | header JSON | f32 blob.
// The header records config, parameter names/shapes, the vocabulary, the
// origin hash and a checksum of the blob.
struct LoadedModel {
  std::unique_ptr<Model> model;
  Vocabulary vocab;
};

void save_checkpoint(Model& model, const Vocabulary& vocab, const std::string& path,
                     bool restamp_origin = false);
LoadedModel load_checkpoint(const std::string& path);

}  // namespace docplug
