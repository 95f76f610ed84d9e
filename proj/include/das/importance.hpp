#pragma once

// Unit importance from virtual-gate gradients.
//
// Every gate starts at 1 and is never updated; only |d loss / d gate| is
// read. Gates are fed as one row per example so a single backward pass
// yields per-example gradients, whose absolute values are averaged.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "das/autodiff.hpp"
#include "das/log.hpp"
#include "das/mlm.hpp"
#include "das/model.hpp"
#include "das/rng.hpp"

namespace das {

enum class ImportanceLoss { proxy_kl, mlm };

inline const char* importance_loss_name(ImportanceLoss k) { return k == ImportanceLoss::mlm ? "mlm" : "proxy_kl"; }

inline ImportanceLoss parse_importance_loss(const std::string& s) {
  if (s == "mlm") return ImportanceLoss::mlm;
  if (s == "proxy_kl" || s == "proxy-kl" || s == "kl") return ImportanceLoss::proxy_kl;
  throw Error("unknown importance loss '" + s + "' (expected proxy_kl or mlm)");
}

struct RawImportance {
  UnitValues scores;
  std::size_t sample_count = 0;
};

struct NormalizedImportance {
  UnitValues scores;

  bool operator==(const NormalizedImportance&) const = default;
};

struct ImportanceStore {
  NormalizedImportance accumulated;
  std::vector<std::string> contributors;

  static ImportanceStore zeros(const ModelConfig& cfg) { return {{UnitValues::filled(cfg, 0.0)}, {}}; }
};

// Sample-count-weighted merge of two importance estimates.
inline RawImportance merge(const RawImportance& a, const RawImportance& b) {
  if (!a.scores.same_shape(b.scores)) throw ShapeError("merge: importance shapes differ");
  RawImportance out = a;
  out.sample_count = a.sample_count + b.sample_count;
  const double wa = static_cast<double>(a.sample_count) / static_cast<double>(out.sample_count);
  const double wb = static_cast<double>(b.sample_count) / static_cast<double>(out.sample_count);
  for (std::size_t l = 0; l < out.scores.layers.size(); ++l)
    for (auto k : all_unit_kinds) {
      auto& v = out.scores.layers[l].of(k);
      const auto& u = b.scores.layers[l].of(k);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = wa * v[i] + wb * u[i];
    }
  return out;
}

// Accumulates sum_n |d loss / d gate_n| for a per-example gate layout.
// `loss_of_gates` must return the SUM of per-example losses built on the
// supplied gates ([rows x units] leaves).
class GateGradientAccumulator {
 public:
  explicit GateGradientAccumulator(const ModelConfig& cfg) : cfg_(cfg), sums_(UnitValues::filled(cfg, 0.0)) {}

  template <class LossFn>
  void add(std::size_t rows, std::size_t counted_samples, LossFn&& loss_of_gates) {
    auto gates = GateTensors::from(GateSet::ones(cfg_), rows, true);
    Tensor loss = loss_of_gates(static_cast<const GateTensors&>(gates));
    GradientMap grads = backward(loss);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l)
      for (auto k : all_unit_kinds) {
        const Tensor& g = gates.layers[l].of(k);
        if (!grads.has(g)) continue;
        auto gv = grads.of(g);
        auto& acc = sums_.layers[l].of(k);
        const std::size_t units = acc.size();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t u = 0; u < units; ++u) acc[u] += std::abs(gv[r * units + u]);
      }
    count_ += counted_samples;
  }

  RawImportance result() const {
    if (count_ == 0) throw Error("compute_importance: no samples contributed");
    RawImportance out{sums_, count_};
    const double inv = 1.0 / static_cast<double>(count_);
    for (auto& layer : out.scores.layers)
      for (auto k : all_unit_kinds)
        for (auto& v : layer.of(k)) v *= inv;
    return out;
  }

 private:
  ModelConfig cfg_;
  UnitValues sums_;
  std::size_t count_ = 0;
};

namespace detail {
// Per-sequence sum of token-mean KL between two forwards of the same batch.
inline Tensor proxy_kl_per_sequence_sum(const GatedTransformer& model, const TokenBatch& batch,
                                        const GateTensors* gates, std::uint64_t seed, std::uint64_t pass_a,
                                        std::uint64_t pass_b, bool mean_over_batch) {
  auto first = model.forward(batch, gates, ForwardMode::training(seed, pass_a));
  auto second = model.forward(batch, gates, ForwardMode::training(seed, pass_b));
  std::vector<double> w(batch.ids.size(), 0.0);
  std::size_t total = 0;
  for (std::size_t s = 0; s < batch.n; ++s) total += batch.length(s);
  for (std::size_t s = 0; s < batch.n; ++s) {
    const std::size_t len = batch.length(s);
    for (std::size_t j = 0; j < batch.t; ++j)
      if (batch.ids[s * batch.t + j] != Vocabulary::pad_id)
        w[s * batch.t + j] = mean_over_batch ? 1.0 / static_cast<double>(total) : 1.0 / static_cast<double>(len);
  }
  return weighted_kl(first.logits, second.logits, w);
}
}  // namespace detail

// KL(pass 1 || pass 2) averaged over all non-padding token positions, where
// the two passes are train-mode forwards of the same input under
// independent dropout draws.
inline Tensor proxy_kl_loss(const GatedTransformer& model, const TokenBatch& batch, std::uint64_t seed,
                            std::uint64_t pass_a = 0, std::uint64_t pass_b = 1, const GateTensors* gates = nullptr) {
  if (batch.n == 0 || batch.ids.empty()) throw Error("proxy_kl_loss: empty batch");
  std::size_t total = 0;
  for (std::size_t s = 0; s < batch.n; ++s) total += batch.length(s);
  if (total == 0) throw Error("proxy_kl_loss: batch holds only padding");
  return detail::proxy_kl_per_sequence_sum(model, batch, gates, seed, pass_a, pass_b, true);
}

// Importance of one proxy batch / one MLM batch, added to `acc`.
inline void add_proxy_importance(GateGradientAccumulator& acc, const GatedTransformer& model, const TokenBatch& batch,
                                 std::uint64_t seed, std::uint64_t pass_a, std::uint64_t pass_b) {
  std::size_t counted = 0;
  for (std::size_t s = 0; s < batch.n; ++s) counted += batch.length(s) > 0;
  acc.add(batch.n, counted, [&](const GateTensors& g) {
    return detail::proxy_kl_per_sequence_sum(model, batch, &g, seed, pass_a, pass_b, false);
  });
}

inline void add_mlm_importance(GateGradientAccumulator& acc, const GatedTransformer& model, const MLMBatch& batch) {
  std::size_t counted = 0;
  for (std::size_t s = 0; s < batch.inputs.n; ++s) {
    bool any = false;
    for (std::size_t j = 0; j < batch.inputs.t; ++j) any = any || batch.mask_positions[s * batch.inputs.t + j];
    counted += any;
  }
  if (counted == 0) return;
  acc.add(batch.inputs.n, counted, [&](const GateTensors& g) {
    auto fwd = model.forward(batch.inputs, &g, ForwardMode::eval());
    return mlm_loss_per_sequence_sum(fwd.logits, batch);
  });
}

// I_unit = (1/N) sum_n |d loss(x_n) / d g_unit| over every sequence of
// `data`. Proxy batches b use dropout passes (2b, 2b+1) under `seed`; MLM
// batches are corrupted with a stream derived from (`seed`, b) and scored
// in eval mode. Model parameters are never modified.
inline RawImportance compute_importance(const GatedTransformer& model, std::span<const TokenBatch> data,
                                        ImportanceLoss kind, std::uint64_t seed, double mask_prob = 0.15) {
  if (data.empty()) throw Error("compute_importance: no batches");
  GateGradientAccumulator acc(model.config());
  for (std::size_t b = 0; b < data.size(); ++b) {
    if (kind == ImportanceLoss::proxy_kl) {
      add_proxy_importance(acc, model, data[b], seed, 2 * b, 2 * b + 1);
    } else {
      Rng rng(mix_key(seed, b));
      add_mlm_importance(acc, model, mlm_corrupt(data[b], mask_prob, model.config().vocab_size, rng));
    }
  }
  return acc.result();
}

// Per layer and unit kind: standardize with the population std, then |tanh|.
// A vector whose std is below 1e-12 carries no ranking and maps to zeros.
inline NormalizedImportance normalize_importance(const RawImportance& raw) {
  NormalizedImportance out{raw.scores};
  constexpr double below_one = 0x1.fffffffffffffp-1;
  for (std::size_t l = 0; l < out.scores.layers.size(); ++l) {
    for (auto k : all_unit_kinds) {
      auto& v = out.scores.layers[l].of(k);
      if (v.empty()) continue;
      const double n = static_cast<double>(v.size());
      double mu = 0.0;
      for (double x : v) {
        if (x < 0.0) throw Error("normalize_importance: raw importance must be non-negative");
        mu += x;
      }
      mu /= n;
      double var = 0.0;
      for (double x : v) var += (x - mu) * (x - mu);
      const double sd = std::sqrt(var / n);
      if (sd < 1e-12) {
        logging::warn("importance of layer " + std::to_string(l) + " " + unit_kind_name(k) +
                  " is constant; emitting zeros");
        std::fill(v.begin(), v.end(), 0.0);
        continue;
      }
      for (double& x : v) x = std::min(std::abs(std::tanh((x - mu) / sd)), below_one);
    }
  }
  return out;
}

// Element-wise max merge of a new domain's importance into the store.
inline ImportanceStore accumulate(const ImportanceStore& store, const NormalizedImportance& next,
                                  const std::string& label) {
  if (!store.accumulated.scores.same_shape(next.scores)) throw ShapeError("accumulate: importance shapes differ");
  if (std::find(store.contributors.begin(), store.contributors.end(), label) != store.contributors.end()) {
    throw Error("accumulate: domain '" + label + "' already contributed");
  }
  ImportanceStore out = store;
  for (std::size_t l = 0; l < out.accumulated.scores.layers.size(); ++l)
    for (auto k : all_unit_kinds) {
      auto& v = out.accumulated.scores.layers[l].of(k);
      const auto& u = next.scores.layers[l].of(k);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::max(v[i], u[i]);
    }
  out.contributors.push_back(label);
  return out;
}

inline const char* general_label = "general";

// Importance of units to the general knowledge of the starting model,
// from the proxy KL loss on a subset of the current domain.
inline NormalizedImportance initialize_general_importance(const GatedTransformer& model,
                                                          std::span<const TokenBatch> subset, std::uint64_t seed) {
  return normalize_importance(compute_importance(model, subset, ImportanceLoss::proxy_kl, seed));
}

// Cosine similarity of the flattened importance vectors of one unit kind.
inline double importance_similarity(const NormalizedImportance& a, const NormalizedImportance& b,
                                    UnitKind kind = UnitKind::head) {
  if (!a.scores.same_shape(b.scores)) throw ShapeError("importance_similarity: shapes differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t l = 0; l < a.scores.layers.size(); ++l) {
    const auto& u = a.scores.layers[l].of(kind);
    const auto& v = b.scores.layers[l].of(kind);
    for (std::size_t i = 0; i < u.size(); ++i) {
      dot += u[i] * v[i];
      na += u[i] * u[i];
      nb += v[i] * v[i];
    }
  }
  if (na == 0.0 || nb == 0.0) throw Error("importance_similarity: zero importance vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Seeded uniforms in [0,1), the random-importance ablation.
inline NormalizedImportance random_importance(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  NormalizedImportance out{UnitValues::filled(cfg, 0.0)};
  for (auto& layer : out.scores.layers)
    for (auto k : all_unit_kinds)
      for (auto& v : layer.of(k)) v = rng.uniform();
  return out;
}

inline nlohmann::json units_to_json(const UnitValues& v) {
  nlohmann::json layers = nlohmann::json::object();
  for (std::size_t l = 0; l < v.layers.size(); ++l)
    layers[std::to_string(l)] = {{"heads", v.layers[l].heads}, {"inter", v.layers[l].inter}, {"out", v.layers[l].out}};
  return layers;
}

inline UnitValues units_from_json(const nlohmann::json& j) {
  UnitValues v;
  v.layers.resize(j.size());
  for (auto& [key, layer] : j.items()) {
    const std::size_t l = std::stoul(key);
    if (l >= v.layers.size()) throw Error("importance snapshot: layer keys must be 0..L-1");
    v.layers[l] = {layer.at("heads").get<std::vector<double>>(), layer.at("inter").get<std::vector<double>>(),
                   layer.at("out").get<std::vector<double>>()};
  }
  return v;
}

inline nlohmann::json snapshot_json(const NormalizedImportance& imp, const std::vector<std::string>& contributors) {
  return {{"format", "das-importance/1"}, {"layers", units_to_json(imp.scores)}, {"contributors", contributors}};
}

inline nlohmann::json snapshot_json(const ImportanceStore& store) {
  return snapshot_json(store.accumulated, store.contributors);
}

inline ImportanceStore snapshot_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "das-importance/1") throw Error("importance snapshot: unsupported format tag");
  return {{units_from_json(j.at("layers"))}, j.at("contributors").get<std::vector<std::string>>()};
}

}  // namespace das
