#include "docplug/model.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace docplug {

void ModelConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || d_ff <= 0) throw InputError("config: dims must be positive");
  if (d_model % n_heads != 0) throw InputError("config: d_model must be divisible by n_heads");
  if (n_enc_layers <= 0 || n_dec_layers <= 0) throw InputError("config: need at least one layer");
  if (n_plug < 0 || n_plug > n_enc_layers) {
    throw InputError("config: n_plug must be in [0, n_enc_layers]");
  }
  if (vocab_size <= kReservedIds) throw InputError("config: vocab_size too small");
  if (max_len <= 0) throw InputError("config: max_len must be positive");
  if (adapter_r < 0) throw InputError("config: adapter_r must be >= 0");
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["d_model"] = d_model;
  j["n_heads"] = n_heads;
  j["d_ff"] = d_ff;
  j["n_enc_layers"] = n_enc_layers;
  j["n_dec_layers"] = n_dec_layers;
  j["n_plug"] = n_plug;
  j["vocab_size"] = vocab_size;
  j["max_len"] = max_len;
  j["plugin_sharing"] = plugin_sharing == PluginSharing::kShared ? "shared" : "per_layer";
  j["max_query_len"] = max_query_len;
  j["max_target_len"] = max_target_len;
  j["adapter_r"] = adapter_r;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& json_text) {
  nlohmann::json j = nlohmann::json::parse(json_text);
  ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.n_enc_layers = j.at("n_enc_layers").get<int>();
  c.n_dec_layers = j.at("n_dec_layers").get<int>();
  c.n_plug = j.at("n_plug").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_len = j.at("max_len").get<int>();
  std::string sharing = j.at("plugin_sharing").get<std::string>();
  if (sharing == "shared") {
    c.plugin_sharing = PluginSharing::kShared;
  } else if (sharing == "per_layer") {
    c.plugin_sharing = PluginSharing::kPerLayer;
  } else {
    throw FormatError("config: unknown plugin_sharing: " + sharing);
  }
  c.max_query_len = j.at("max_query_len").get<int>();
  c.max_target_len = j.at("max_target_len").get<int>();
  c.adapter_r = j.value("adapter_r", 0);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// attention

Tensor attention(const Tensor& h_q, const Tensor& h_kv, const AttentionWeights& w, int n_heads,
                 const Tensor* additive_mask) {
  int d = w.wq.dim(0);
  if (h_q.dim(1) != d || h_kv.dim(1) != d) {
    throw ShapeError("attention: hidden size does not match weights");
  }
  if (d % n_heads != 0) throw ShapeError("attention: d not divisible by n_heads");
  int d_head = d / n_heads;
  double att_scale = 1.0 / std::sqrt(static_cast<double>(d_head));

  Tensor q, k, v;
  {
    FlopScope fs("proj");
    q = matmul(h_q, w.wq);
    k = matmul(h_kv, w.wk);
    v = matmul(h_kv, w.wv);
  }
  std::vector<Tensor> head_outputs;
  head_outputs.reserve(static_cast<size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    Tensor qh = slice_cols(q, h * d_head, d_head);
    Tensor kh = slice_cols(k, h * d_head, d_head);
    Tensor vh = slice_cols(v, h * d_head, d_head);
    FlopScope fs("score");
    Tensor scores = scale(matmul(qh, transpose(kh)), att_scale);
    if (additive_mask) scores = add(scores, *additive_mask);
    Tensor weights = softmax_rows(scores);
    head_outputs.push_back(matmul(weights, vh));
  }
  Tensor ctx = concat(head_outputs, 1);
  FlopScope fs("proj");
  return matmul(ctx, w.wo);
}

Tensor prefix_attention(const Tensor& h_q, const Tensor* prefix, const AttentionWeights& w,
                        int n_heads, const Tensor* additive_mask) {
  if (prefix == nullptr || !prefix->defined() || prefix->dim(0) == 0) {
    return attention(h_q, h_q, w, n_heads, additive_mask);
  }
  if (prefix->dim(1) != h_q.dim(1)) {
    throw ShapeError("prefix_attention: prefix width does not match hidden size");
  }
  Tensor kv_src = concat({*prefix, h_q}, 0);
  return attention(h_q, kv_src, w, n_heads, additive_mask);
}

Tensor adapter_forward(const Tensor& h, const Tensor& w_down, const Tensor& w_up) {
  if (h.dim(1) != w_down.dim(0) || w_down.dim(1) != w_up.dim(0) || w_up.dim(1) != h.dim(1)) {
    throw ShapeError("adapter_forward: inconsistent shapes");
  }
  return add(h, matmul(relu(matmul(h, w_down)), w_up));
}

// ---------------------------------------------------------------------------
// model construction

namespace {
constexpr double kWeightStd = 0.02;
constexpr double kMappingStd = 0.01;
}  // namespace

Tensor Model::register_param(const std::string& name, Tensor t) {
  t.set_name(name);
  params_.push_back(t);
  by_name_[name] = t;
  return t;
}

Tensor Model::make_weight(const std::string& name, std::vector<int> shape, Rng& rng,
                          double stddev) {
  return register_param(name, Tensor::randn(std::move(shape), rng, stddev, 0.0, true));
}

void Model::build_layers(Rng& rng) {
  int d = cfg_.d_model;
  auto make_attn = [&](const std::string& base) {
    AttentionWeights w;
    w.wq = make_weight(base + ".wq", {d, d}, rng, kWeightStd);
    w.wk = make_weight(base + ".wk", {d, d}, rng, kWeightStd);
    w.wv = make_weight(base + ".wv", {d, d}, rng, kWeightStd);
    w.wo = make_weight(base + ".wo", {d, d}, rng, kWeightStd);
    return w;
  };
  auto make_ln = [&](const std::string& base, Tensor& g, Tensor& b) {
    g = register_param(base + ".g", Tensor::full({d}, 1.0, true));
    b = register_param(base + ".b", Tensor::zeros({d}, true));
  };

  for (int i = 0; i < cfg_.n_enc_layers; ++i) {
    Layer layer;
    std::string base = "enc.l" + std::to_string(i);
    make_ln(base + ".ln1", layer.ln1_g, layer.ln1_b);
    layer.self_attn = make_attn(base + ".attn");
    make_ln(base + ".ln2", layer.ln2_g, layer.ln2_b);
    layer.ffn_w1 = make_weight(base + ".ffn.w1", {d, cfg_.d_ff}, rng, kWeightStd);
    layer.ffn_w2 = make_weight(base + ".ffn.w2", {cfg_.d_ff, d}, rng, kWeightStd);
    enc_layers_.push_back(std::move(layer));
  }
  enc_final_g_ = register_param("enc.final_ln.g", Tensor::full({d}, 1.0, true));
  enc_final_b_ = register_param("enc.final_ln.b", Tensor::zeros({d}, true));

  for (int i = 0; i < cfg_.n_dec_layers; ++i) {
    Layer layer;
    std::string base = "dec.l" + std::to_string(i);
    make_ln(base + ".ln1", layer.ln1_g, layer.ln1_b);
    layer.self_attn = make_attn(base + ".self");
    make_ln(base + ".ln_cross", layer.ln_cross_g, layer.ln_cross_b);
    layer.cross_attn = make_attn(base + ".cross");
    make_ln(base + ".ln2", layer.ln2_g, layer.ln2_b);
    layer.ffn_w1 = make_weight(base + ".ffn.w1", {d, cfg_.d_ff}, rng, kWeightStd);
    layer.ffn_w2 = make_weight(base + ".ffn.w2", {cfg_.d_ff, d}, rng, kWeightStd);
    dec_layers_.push_back(std::move(layer));
  }
  dec_final_g_ = register_param("dec.final_ln.g", Tensor::full({d}, 1.0, true));
  dec_final_b_ = register_param("dec.final_ln.b", Tensor::zeros({d}, true));

  for (int k = 0; k < cfg_.n_mapping(); ++k) {
    std::string base = "map.l" + std::to_string(k);
    map_w1_.push_back(make_weight(base + ".w1", {d, 2 * d}, rng, kMappingStd));
    map_w2_.push_back(make_weight(base + ".w2", {2 * d, d}, rng, kMappingStd));
  }
}

Model::Model(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  int d = cfg_.d_model;
  tok_embed_ = make_weight("embed.tok", {cfg_.vocab_size, d}, rng, kWeightStd);
  pos_embed_ = make_weight("embed.pos", {cfg_.max_len, d}, rng, kWeightStd);
  build_layers(rng);
  if (cfg_.adapter_r > 0) {
    int saved = cfg_.adapter_r;
    cfg_.adapter_r = 0;
    attach_adapters(saved, 1e-2, rng.fork_seed());
  }
}

std::unique_ptr<Model> Model::clone() const {
  auto copy = std::make_unique<Model>(cfg_, 0);
  for (const auto& p : params_) {
    copy->param(p.name()).apply_update(p.data());
  }
  copy->origin_ = origin_;
  return copy;
}

void Model::attach_adapters(int r, double init_std, uint64_t seed) {
  if (cfg_.adapter_r > 0) throw UsageError("adapters already attached");
  if (r < 1) throw InputError("adapter bottleneck must be >= 1");
  cfg_.adapter_r = r;
  Rng rng(seed);
  int d = cfg_.d_model;
  auto attach = [&](Layer& layer, const std::string& base) {
    layer.adapter_down =
        register_param(base + ".adapter.wdown", Tensor::randn({d, r}, rng, init_std, 0.0, true));
    layer.adapter_up =
        register_param(base + ".adapter.wup", Tensor::randn({r, d}, rng, init_std, 0.0, true));
  };
  for (int i = 0; i < cfg_.n_enc_layers; ++i) {
    attach(enc_layers_[static_cast<size_t>(i)], "enc.l" + std::to_string(i));
  }
  for (int i = 0; i < cfg_.n_dec_layers; ++i) {
    attach(dec_layers_[static_cast<size_t>(i)], "dec.l" + std::to_string(i));
  }
}

Tensor Model::param(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw NotFoundError("no parameter named " + name);
  return it->second;
}

bool Model::has_param(const std::string& name) const { return by_name_.count(name) > 0; }

std::vector<Tensor> Model::params_matching(const std::vector<std::string>& prefixes) const {
  std::vector<Tensor> out;
  for (const auto& p : params_) {
    for (const auto& pref : prefixes) {
      if (p.name().rfind(pref, 0) == 0) {
        out.push_back(p);
        break;
      }
    }
  }
  return out;
}

void Model::zero_grads() const {
  for (const auto& p : params_) p.node()->grad.clear();
}

void Model::quantize_params_f32() {
  for (auto& p : params_) p.quantize_f32();
}

Hash32 Model::content_hash() const {
  std::string buf = cfg_.to_json();
  for (const auto& p : params_) {
    buf += p.name();
    buf += '\0';
    buf += format_bytes_le_f32(p.data());
  }
  return sha256(buf);
}

Hash32 Model::origin_hash() const { return origin_ ? *origin_ : content_hash(); }

void Model::restamp_origin() { origin_ = content_hash(); }

// ---------------------------------------------------------------------------
// forward

Tensor Model::embed_with_positions(const std::vector<int>& ids) const {
  if (static_cast<int>(ids.size()) > cfg_.max_len) {
    throw InputError("sequence length " + std::to_string(ids.size()) + " exceeds max_len " +
                     std::to_string(cfg_.max_len));
  }
  Tensor tok = embedding(tok_embed_, ids);
  Tensor pos = slice_rows(pos_embed_, 0, static_cast<int>(ids.size()));
  return add(tok, pos);
}

Tensor Model::ffn_block(const Layer& layer, const Tensor& x) const {
  return matmul(relu(matmul(x, layer.ffn_w1)), layer.ffn_w2);
}

Tensor Model::encoder_layer_forward(int layer_idx, const Tensor& x_in, const Tensor* prefix) const {
  const Layer& layer = enc_layers_[static_cast<size_t>(layer_idx)];
  std::string base = "enc.l" + std::to_string(layer_idx);
  Tensor a = add_rowvec(mul_rowvec(layer_norm_rows(x_in), layer.ln1_g), layer.ln1_b);
  Tensor x;
  {
    FlopScope fs(base + ".attn");
    x = add(x_in, prefix_attention(a, prefix, layer.self_attn, cfg_.n_heads));
  }
  Tensor f = add_rowvec(mul_rowvec(layer_norm_rows(x), layer.ln2_g), layer.ln2_b);
  if (layer.adapter_down.defined()) {
    FlopScope fs(base + ".adapter");
    f = adapter_forward(f, layer.adapter_down, layer.adapter_up);
  }
  FlopScope fs(base + ".ffn");
  return add(x, ffn_block(layer, f));
}

Tensor Model::encode(const std::vector<int>& ids, const Prefixes* plugin,
                     std::vector<Tensor>* trace) const {
  if (plugin && !plugin->per_layer.empty()) {
    int expected = cfg_.plugin_sharing == PluginSharing::kShared ? 1 : cfg_.n_plug;
    if (static_cast<int>(plugin->per_layer.size()) != expected) {
      throw ShapeError("plugin prefix count does not match n_plug");
    }
    for (const auto& p : plugin->per_layer) {
      if (p.dim(1) != cfg_.d_model) throw ShapeError("plugin width does not match d_model");
    }
  }
  Tensor x = embed_with_positions(ids);
  int first_plugged = cfg_.n_enc_layers - cfg_.n_plug;
  for (int i = 0; i < cfg_.n_enc_layers; ++i) {
    const Tensor* prefix = nullptr;
    if (plugin && !plugin->per_layer.empty() && i >= first_plugged) {
      prefix = &plugin->for_slot(i - first_plugged);
    }
    x = encoder_layer_forward(i, x, prefix);
    if (trace) trace->push_back(x);
  }
  return add_rowvec(mul_rowvec(layer_norm_rows(x), enc_final_g_), enc_final_b_);
}

namespace {

Tensor causal_mask(int n) {
  std::vector<double> m(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) m[static_cast<size_t>(i) * n + j] = -1e9;
  }
  return Tensor::from_data({n, n}, std::move(m));
}

}  // namespace

Tensor Model::decode_loss(const Tensor& encoder_out, const std::vector<int>& target_ids) const {
  if (target_ids.empty()) throw InputError("decode_loss: empty target");
  if (static_cast<int>(target_ids.size()) > cfg_.max_target_len) {
    throw InputError("decode_loss: target longer than max_target_len");
  }
  // teacher forcing: decoder input is the target shifted right behind PAD
  std::vector<int> dec_in;
  dec_in.reserve(target_ids.size());
  dec_in.push_back(kPadId);
  dec_in.insert(dec_in.end(), target_ids.begin(), target_ids.end() - 1);
  Tensor logits = decode_logits(encoder_out, dec_in);
  return cross_entropy_rows(logits, target_ids);
}

Tensor Model::decode_logits(const Tensor& encoder_out, const std::vector<int>& dec_in) const {
  if (dec_in.empty()) throw InputError("decode_logits: empty decoder input");
  int n = static_cast<int>(dec_in.size());
  Tensor mask = causal_mask(n);
  Tensor x = embed_with_positions(dec_in);
  for (int i = 0; i < cfg_.n_dec_layers; ++i) {
    const Layer& layer = dec_layers_[static_cast<size_t>(i)];
    std::string base = "dec.l" + std::to_string(i);
    Tensor a = add_rowvec(mul_rowvec(layer_norm_rows(x), layer.ln1_g), layer.ln1_b);
    {
      FlopScope fs(base + ".self");
      x = add(x, attention(a, a, layer.self_attn, cfg_.n_heads, &mask));
    }
    Tensor c = add_rowvec(mul_rowvec(layer_norm_rows(x), layer.ln_cross_g), layer.ln_cross_b);
    {
      FlopScope fs(base + ".cross");
      x = add(x, attention(c, encoder_out, layer.cross_attn, cfg_.n_heads));
    }
    Tensor f = add_rowvec(mul_rowvec(layer_norm_rows(x), layer.ln2_g), layer.ln2_b);
    if (layer.adapter_down.defined()) {
      FlopScope fs(base + ".adapter");
      f = adapter_forward(f, layer.adapter_down, layer.adapter_up);
    }
    {
      FlopScope fs(base + ".ffn");
      x = add(x, ffn_block(layer, f));
    }
  }
  Tensor h = add_rowvec(mul_rowvec(layer_norm_rows(x), dec_final_g_), dec_final_b_);
  return output_logits(h);
}

Tensor Model::output_logits(const Tensor& h) const {
  FlopScope fs("lm");
  return matmul(h, transpose(tok_embed_));
}

Tensor Model::map_rows(const Tensor& h, int slot) const {
  if (h.dim(1) != cfg_.d_model) throw ShapeError("map_rows: width does not match d_model");
  if (slot < 0 || slot >= cfg_.n_mapping()) throw UsageError("map_rows: bad mapping slot");
  FlopScope fs("map.l" + std::to_string(slot));
  const Tensor& w1 = map_w1_[static_cast<size_t>(slot)];
  const Tensor& w2 = map_w2_[static_cast<size_t>(slot)];
  return add(h, matmul(relu(matmul(h, w1)), w2));
}

Prefixes Model::map_prefix(const Tensor& h_d) const {
  Prefixes p;
  p.shared = cfg_.plugin_sharing == PluginSharing::kShared;
  int n = p.shared ? 1 : cfg_.n_plug;
  for (int k = 0; k < n; ++k) p.per_layer.push_back(map_rows(h_d, k));
  return p;
}

std::vector<int> Model::generate_greedy(const std::vector<int>& ids, const Prefixes* plugin,
                                        int max_new, bool stop_at_eos) const {
  if (max_new < 0 || max_new > cfg_.max_target_len) {
    throw UsageError("generate_greedy: max_new outside [0, max_target_len]");
  }
  NoGradGuard ng;
  Tensor enc_out = encode(ids, plugin);
  Tensor embed_t = transpose(tok_embed_);  // [d x V], reused every step

  int n_dec = cfg_.n_dec_layers;
  std::vector<Tensor> cross_k(static_cast<size_t>(n_dec)), cross_v(static_cast<size_t>(n_dec));
  for (int i = 0; i < n_dec; ++i) {
    FlopScope fs("dec.l" + std::to_string(i) + ".cross.proj");
    cross_k[static_cast<size_t>(i)] = matmul(enc_out, dec_layers_[static_cast<size_t>(i)].cross_attn.wk);
    cross_v[static_cast<size_t>(i)] = matmul(enc_out, dec_layers_[static_cast<size_t>(i)].cross_attn.wv);
  }
  std::vector<Tensor> self_k(static_cast<size_t>(n_dec)), self_v(static_cast<size_t>(n_dec));

  int d = cfg_.d_model;
  int d_head = cfg_.d_head();
  double att_scale = 1.0 / std::sqrt(static_cast<double>(d_head));

  std::vector<int> generated;
  int cur_token = kPadId;  // decoder start token
  for (int step = 0; step < max_new; ++step) {
    Tensor x = add(embedding(tok_embed_, {cur_token}), slice_rows(pos_embed_, step, 1));
    for (int i = 0; i < n_dec; ++i) {
      const Layer& layer = dec_layers_[static_cast<size_t>(i)];
      std::string base = "dec.l" + std::to_string(i);
      Tensor a = add_rowvec(mul_rowvec(layer_norm_rows(x), layer.ln1_g), layer.ln1_b);
      {
        FlopScope fs(base + ".self");
        Tensor q, k_new, v_new;
        {
          FlopScope fp("proj");
          q = matmul(a, layer.self_attn.wq);
          k_new = matmul(a, layer.self_attn.wk);
          v_new = matmul(a, layer.self_attn.wv);
        }
        Tensor& ks = self_k[static_cast<size_t>(i)];
        Tensor& vs = self_v[static_cast<size_t>(i)];
        ks = ks.defined() ? concat({ks, k_new}, 0) : k_new;
        vs = vs.defined() ? concat({vs, v_new}, 0) : v_new;
        std::vector<Tensor> heads;
        heads.reserve(static_cast<size_t>(cfg_.n_heads));
        for (int h = 0; h < cfg_.n_heads; ++h) {
          Tensor qh = slice_cols(q, h * d_head, d_head);
          Tensor kh = slice_cols(ks, h * d_head, d_head);
          Tensor vh = slice_cols(vs, h * d_head, d_head);
          FlopScope fsc("score");
          Tensor weights = softmax_rows(scale(matmul(qh, transpose(kh)), att_scale));
          heads.push_back(matmul(weights, vh));
        }
        Tensor ctx = concat(heads, 1);
        FlopScope fp("proj");
        x = add(x, matmul(ctx, layer.self_attn.wo));
      }
      Tensor c = add_rowvec(mul_rowvec(layer_norm_rows(x), layer.ln_cross_g), layer.ln_cross_b);
      {
        FlopScope fs(base + ".cross");
        Tensor q;
        {
          FlopScope fp("proj");
          q = matmul(c, layer.cross_attn.wq);
        }
        std::vector<Tensor> heads;
        heads.reserve(static_cast<size_t>(cfg_.n_heads));
        for (int h = 0; h < cfg_.n_heads; ++h) {
          Tensor qh = slice_cols(q, h * d_head, d_head);
          Tensor kh = slice_cols(cross_k[static_cast<size_t>(i)], h * d_head, d_head);
          Tensor vh = slice_cols(cross_v[static_cast<size_t>(i)], h * d_head, d_head);
          FlopScope fsc("score");
          Tensor weights = softmax_rows(scale(matmul(qh, transpose(kh)), att_scale));
          heads.push_back(matmul(weights, vh));
        }
        Tensor ctx = concat(heads, 1);
        FlopScope fp("proj");
        x = add(x, matmul(ctx, layer.cross_attn.wo));
      }
      Tensor f = add_rowvec(mul_rowvec(layer_norm_rows(x), layer.ln2_g), layer.ln2_b);
      if (layer.adapter_down.defined()) {
        FlopScope fs(base + ".adapter");
        f = adapter_forward(f, layer.adapter_down, layer.adapter_up);
      }
      {
        FlopScope fs(base + ".ffn");
        x = add(x, ffn_block(layer, f));
      }
    }
    Tensor h = add_rowvec(mul_rowvec(layer_norm_rows(x), dec_final_g_), dec_final_b_);
    Tensor logits;
    {
      FlopScope fs("lm");
      logits = matmul(h, embed_t);
    }
    const auto& row = logits.data();
    int best = 0;
    for (int j = 1; j < cfg_.vocab_size; ++j) {
      if (row[static_cast<size_t>(j)] > row[static_cast<size_t>(best)]) best = j;
    }
    if (stop_at_eos && best == kEosId) break;
    generated.push_back(best);
    cur_token = best;
  }
  return generated;
}

}  // namespace docplug
