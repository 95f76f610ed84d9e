#pragma once

// Pre-layer-norm transformer encoder with an MLM head and virtual gates on
// the three maskable unit kinds of every layer: attention heads,
// intermediate (FFN hidden) neurons and output (FFN output) neurons.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "das/autodiff.hpp"
#include "das/rng.hpp"
#include "das/vocab.hpp"

namespace das {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 200;
  std::size_t max_seq_len = 32;
  double dropout_p = 0.1;

  std::size_t head_dim() const { return d_model / n_heads; }

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    if (n_layers < 1) out.emplace_back("model.n_layers must be >= 1");
    if (n_heads < 1) out.emplace_back("model.n_heads must be >= 1");
    if (d_model < 1) out.emplace_back("model.d_model must be >= 1");
    if (d_ff < 1) out.emplace_back("model.d_ff must be >= 1");
    if (vocab_size <= Vocabulary::n_special) out.emplace_back("model.vocab_size must exceed the 3 specials");
    if (max_seq_len < 1) out.emplace_back("model.max_seq_len must be >= 1");
    if (n_heads >= 1 && d_model % n_heads != 0) out.emplace_back("model.d_model must be divisible by model.n_heads");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) out.emplace_back("model.dropout_p must be in [0,1)");
    return out;
  }

  void validate() const {
    auto v = violations();
    if (!v.empty()) throw Error("invalid ModelConfig: " + v.front());
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers}, {"n_heads", c.n_heads},   {"d_model", c.d_model},
       {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
       {"dropout_p", c.dropout_p}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_model").get_to(c.d_model);
  j.at("d_ff").get_to(c.d_ff);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_seq_len").get_to(c.max_seq_len);
  j.at("dropout_p").get_to(c.dropout_p);
}

enum class UnitKind { head, inter, out };

inline const char* unit_kind_name(UnitKind k) {
  switch (k) {
    case UnitKind::head: return "heads";
    case UnitKind::inter: return "inter";
    case UnitKind::out: return "out";
  }
  return "?";
}

inline constexpr UnitKind all_unit_kinds[] = {UnitKind::head, UnitKind::inter, UnitKind::out};

// Per-layer values for every unit. Used for gates, importance scores and
// accumulated importance alike.
struct LayerUnits {
  std::vector<double> heads;
  std::vector<double> inter;
  std::vector<double> out;

  std::vector<double>& of(UnitKind k) {
    return k == UnitKind::head ? heads : k == UnitKind::inter ? inter : out;
  }
  const std::vector<double>& of(UnitKind k) const {
    return k == UnitKind::head ? heads : k == UnitKind::inter ? inter : out;
  }
  bool operator==(const LayerUnits&) const = default;
};

struct UnitValues {
  std::vector<LayerUnits> layers;

  static UnitValues filled(const ModelConfig& cfg, double value) {
    UnitValues v;
    v.layers.assign(cfg.n_layers, LayerUnits{std::vector<double>(cfg.n_heads, value),
                                             std::vector<double>(cfg.d_ff, value),
                                             std::vector<double>(cfg.d_model, value)});
    return v;
  }

  bool same_shape(const UnitValues& o) const {
    if (layers.size() != o.layers.size()) return false;
    for (std::size_t l = 0; l < layers.size(); ++l)
      for (auto k : all_unit_kinds)
        if (layers[l].of(k).size() != o.layers[l].of(k).size()) return false;
    return true;
  }

  bool matches(const ModelConfig& cfg) const { return same_shape(filled(cfg, 0.0)); }

  template <class F>
  void for_each(F&& f) const {
    for (const auto& layer : layers)
      for (auto k : all_unit_kinds)
        for (double v : layer.of(k)) f(v);
  }

  bool operator==(const UnitValues&) const = default;
};

// Forward-time gate multipliers; defaults to all ones.
struct GateSet {
  UnitValues values;

  static GateSet ones(const ModelConfig& cfg) { return {UnitValues::filled(cfg, 1.0)}; }
  static GateSet from(UnitValues v) { return {std::move(v)}; }
};

// Gates as graph leaves of shape [G x units]; G is 1 (shared) or the batch
// size (one gate row per example, which yields per-example gate gradients).
struct GateTensors {
  struct Layer {
    Tensor heads, inter, out;
    const Tensor& of(UnitKind k) const { return k == UnitKind::head ? heads : k == UnitKind::inter ? inter : out; }
  };
  std::vector<Layer> layers;

  static GateTensors from(const GateSet& gates, std::size_t rows = 1, bool requires_grad = false) {
    GateTensors t;
    for (const auto& l : gates.values.layers) {
      auto make = [&](const std::vector<double>& v) {
        std::vector<double> data;
        data.reserve(rows * v.size());
        for (std::size_t r = 0; r < rows; ++r) data.insert(data.end(), v.begin(), v.end());
        return Tensor::leaf({rows, v.size()}, std::move(data), requires_grad);
      };
      t.layers.push_back({make(l.heads), make(l.inter), make(l.out)});
    }
    return t;
  }
};

// N sequences of equal length T (padded with Vocabulary::pad_id).
struct TokenBatch {
  std::size_t n = 0;
  std::size_t t = 0;
  std::vector<std::size_t> ids;

  static TokenBatch from_sequences(const std::vector<std::vector<std::size_t>>& seqs, std::size_t len) {
    TokenBatch b{seqs.size(), len, std::vector<std::size_t>(seqs.size() * len, Vocabulary::pad_id)};
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      if (seqs[i].size() > len) throw ShapeError("TokenBatch: sequence longer than " + std::to_string(len));
      std::copy(seqs[i].begin(), seqs[i].end(), b.ids.begin() + static_cast<std::ptrdiff_t>(i * len));
    }
    return b;
  }

  std::size_t length(std::size_t seq) const {
    std::size_t len = 0;
    for (std::size_t j = 0; j < t; ++j) len += ids[seq * t + j] != Vocabulary::pad_id;
    return len;
  }

  std::vector<bool> valid_mask() const {
    std::vector<bool> m(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) m[i] = ids[i] != Vocabulary::pad_id;
    return m;
  }
};

struct ForwardMode {
  bool train = false;
  std::uint64_t seed = 0;
  std::uint64_t pass = 0;

  static ForwardMode eval() { return {}; }
  static ForwardMode training(std::uint64_t seed, std::uint64_t pass) { return {true, seed, pass}; }
};

struct LayerOutputs {
  Tensor attention;     // gated per-head contexts before W_o
  Tensor intermediate;  // gated intermediate activations
  Tensor output;        // gated FFN output before the residual add
};

struct ForwardResult {
  std::size_t n = 0;
  std::size_t t = 0;
  std::vector<LayerOutputs> layers;
  Tensor hidden;  // [N*T x d_model] after the final layer norm
  Tensor logits;  // [N*T x vocab] (undefined if not requested)
};

struct LayerParams {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv;
  Tensor wo;
  Tensor ln2_g, ln2_b;
  Tensor w1, b1;  // up-projection d_model -> d_ff
  Tensor w2, b2;  // down-projection d_ff -> d_model
};

class GatedTransformer {
 public:
  GatedTransformer() = default;

  GatedTransformer(ModelConfig config, std::uint64_t init_seed) : config_(config) {
    config_.validate();
    Rng rng(init_seed);
    const std::size_t d = config_.d_model, f = config_.d_ff, v = config_.vocab_size;
    auto normal = [&](std::size_t r, std::size_t c) {
      std::vector<double> data(r * c);
      for (auto& x : data) x = 0.02 * rng.normal();
      return Tensor::leaf({r, c}, std::move(data), true);
    };
    auto fill = [](std::size_t n, double value) { return Tensor::leaf({n}, std::vector<double>(n, value), true); };
    tok_emb_ = normal(v, d);
    pos_emb_ = normal(config_.max_seq_len, d);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      LayerParams p;
      p.ln1_g = fill(d, 1.0);
      p.ln1_b = fill(d, 0.0);
      p.wq = normal(d, d);
      p.bq = fill(d, 0.0);
      p.wk = normal(d, d);
      p.bk = fill(d, 0.0);
      p.wv = normal(d, d);
      p.bv = fill(d, 0.0);
      p.wo = normal(d, d);
      p.ln2_g = fill(d, 1.0);
      p.ln2_b = fill(d, 0.0);
      p.w1 = normal(d, f);
      p.b1 = fill(f, 0.0);
      p.w2 = normal(f, d);
      p.b2 = fill(d, 0.0);
      layers_.push_back(std::move(p));
    }
    lnf_g_ = fill(d, 1.0);
    lnf_b_ = fill(d, 0.0);
    head_w_ = normal(d, v);
    head_b_ = fill(v, 0.0);
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<LayerParams>& layers() const { return layers_; }
  const Tensor& token_embedding() const { return tok_emb_; }
  const Tensor& head_weight() const { return head_w_; }

  // Stable, named, ordered list of every trainable tensor.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("tok_emb", tok_emb_);
    out.emplace_back("pos_emb", pos_emb_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& p = layers_[l];
      const std::string pre = "layer" + std::to_string(l) + ".";
      for (auto& [name, t] : std::initializer_list<std::pair<const char*, const Tensor*>>{
               {"ln1_g", &p.ln1_g}, {"ln1_b", &p.ln1_b}, {"wq", &p.wq},   {"bq", &p.bq},
               {"wk", &p.wk},       {"bk", &p.bk},       {"wv", &p.wv},   {"bv", &p.bv},
               {"wo", &p.wo},       {"ln2_g", &p.ln2_g}, {"ln2_b", &p.ln2_b}, {"w1", &p.w1},
               {"b1", &p.b1},       {"w2", &p.w2},       {"b2", &p.b2}})
        out.emplace_back(pre + name, *t);
    }
    out.emplace_back("lnf_g", lnf_g_);
    out.emplace_back("lnf_b", lnf_b_);
    out.emplace_back("head_w", head_w_);
    out.emplace_back("head_b", head_b_);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [_, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [_, t] : named_parameters()) n += t.size();
    return n;
  }

  // Deep copy with independent parameter storage.
  GatedTransformer clone() const {
    GatedTransformer m;
    m.config_ = config_;
    m.tok_emb_ = tok_emb_.clone();
    m.pos_emb_ = pos_emb_.clone();
    for (const auto& p : layers_) {
      m.layers_.push_back({p.ln1_g.clone(), p.ln1_b.clone(), p.wq.clone(), p.bq.clone(), p.wk.clone(),
                           p.bk.clone(), p.wv.clone(), p.bv.clone(), p.wo.clone(), p.ln2_g.clone(),
                           p.ln2_b.clone(), p.w1.clone(), p.b1.clone(), p.w2.clone(), p.b2.clone()});
    }
    m.lnf_g_ = lnf_g_.clone();
    m.lnf_b_ = lnf_b_.clone();
    m.head_w_ = head_w_.clone();
    m.head_b_ = head_b_.clone();
    return m;
  }

  // Flat copy of every parameter value, in named_parameters() order.
  std::vector<double> flat_parameters() const {
    std::vector<double> out;
    for (auto& [_, t] : named_parameters()) out.insert(out.end(), t.data().begin(), t.data().end());
    return out;
  }

  ForwardResult forward(const TokenBatch& batch, const GateTensors* gates, ForwardMode mode,
                        bool with_logits = true) const {
    const std::size_t n = batch.n, t = batch.t;
    if (batch.ids.size() != n * t || n == 0 || t == 0) throw ShapeError("forward: malformed token batch");
    if (t > config_.max_seq_len) throw ShapeError("forward: sequence length exceeds max_seq_len");
    for (auto id : batch.ids)
      if (id >= config_.vocab_size) throw Error("forward: unknown token id " + std::to_string(id));
    if (gates) check_gates(*gates, n);

    const double p = mode.train ? config_.dropout_p : 0.0;
    const std::size_t L = config_.n_layers;
    auto key = [&](std::size_t layer, std::size_t site) { return dropout_key(mode.seed, mode.pass, layer, site); };

    std::vector<std::size_t> pos(n * t);
    for (std::size_t i = 0; i < n * t; ++i) pos[i] = i % t;
    Tensor x = add(gather(tok_emb_, batch.ids), gather(pos_emb_, pos));
    x = dropout(x, p, key(L, 0));

    std::vector<bool> key_valid = batch.valid_mask();
    // Sequences that are entirely padding still need one attendable key.
    for (std::size_t s = 0; s < n; ++s) {
      bool any = false;
      for (std::size_t j = 0; j < t; ++j) any = any || key_valid[s * t + j];
      if (!any) key_valid[s * t] = true;
    }

    ForwardResult result;
    result.n = n;
    result.t = t;
    for (std::size_t l = 0; l < L; ++l) {
      const auto& P = layers_[l];
      Tensor h = layernorm(x, P.ln1_g, P.ln1_b);
      Tensor q = linear(h, P.wq, P.bq);
      Tensor k = linear(h, P.wk, P.bk);
      Tensor v = linear(h, P.wv, P.bv);
      Tensor ctx = attention(q, k, v, n, t, config_.n_heads, key_valid, p, key(l, 1));
      if (gates) ctx = gate_mul(ctx, gates->layers[l].heads, t, config_.head_dim());
      Tensor a = dropout(matmul(ctx, P.wo), p, key(l, 2));
      x = add(x, a);

      Tensor h2 = layernorm(x, P.ln2_g, P.ln2_b);
      Tensor u = gelu(linear(h2, P.w1, P.b1));
      if (gates) u = gate_mul(u, gates->layers[l].inter, t, 1);
      Tensor o = linear(u, P.w2, P.b2);
      if (gates) o = gate_mul(o, gates->layers[l].out, t, 1);
      result.layers.push_back({ctx, u, o});
      x = add(x, dropout(o, p, key(l, 3)));
    }
    result.hidden = layernorm(x, lnf_g_, lnf_b_);
    if (with_logits) result.logits = linear(result.hidden, head_w_, head_b_);
    return result;
  }

  nlohmann::json to_json(const Vocabulary& vocab) const {
    nlohmann::json params = nlohmann::json::object();
    for (auto& [name, t] : named_parameters()) params[name] = std::vector<double>(t.data().begin(), t.data().end());
    return {{"format", "das-checkpoint/1"}, {"config", config_}, {"vocab", vocab.tokens()}, {"params", params}};
  }

  static std::pair<GatedTransformer, Vocabulary> from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "das-checkpoint/1") throw Error("checkpoint: unsupported format tag");
    ModelConfig cfg = j.at("config").get<ModelConfig>();
    GatedTransformer m(cfg, 0);
    auto vocab = Vocabulary::from_tokens(j.at("vocab").get<std::vector<std::string>>());
    if (vocab.size() != cfg.vocab_size) throw ShapeError("checkpoint: vocabulary size does not match config");
    const auto& params = j.at("params");
    for (auto& [name, t] : m.named_parameters()) {
      auto values = params.at(name).get<std::vector<double>>();
      if (values.size() != t.size()) throw ShapeError("checkpoint: parameter " + name + " has wrong size");
      auto dst = Tensor(t).mutable_data();
      std::copy(values.begin(), values.end(), dst.begin());
    }
    return {std::move(m), std::move(vocab)};
  }

  void save(const std::string& path, const Vocabulary& vocab) const {
    std::ofstream out(path);
    if (!out) throw Error("checkpoint: cannot write " + path);
    out << to_json(vocab).dump();
  }

  static std::pair<GatedTransformer, Vocabulary> load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("checkpoint: cannot read " + path);
    return from_json(nlohmann::json::parse(in));
  }

 private:
  void check_gates(const GateTensors& g, std::size_t n) const {
    if (g.layers.size() != config_.n_layers) throw ShapeError("forward: gate layer count mismatch");
    for (const auto& l : g.layers) {
      const std::size_t widths[] = {config_.n_heads, config_.d_ff, config_.d_model};
      std::size_t i = 0;
      for (auto k : all_unit_kinds) {
        const auto& s = l.of(k).shape();
        if (s.size() != 2 || s[1] != widths[i] || (s[0] != 1 && s[0] != n)) {
          throw ShapeError(std::string("forward: gate tensor for ") + unit_kind_name(k) + " has shape " +
                           shape_str(s));
        }
        ++i;
      }
    }
  }

  ModelConfig config_;
  Tensor tok_emb_, pos_emb_;
  std::vector<LayerParams> layers_;
  Tensor lnf_g_, lnf_b_;
  Tensor head_w_, head_b_;
};

}  // namespace das
