#pragma once

// One-domain DAP-training with soft-masked gradients and the contrastive
// knowledge-integration loss, plus end-task fine-tuning.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "das/autodiff.hpp"
#include "das/importance.hpp"
#include "das/mlm.hpp"
#include "das/model.hpp"
#include "das/rng.hpp"

namespace das {

struct OptimizerConfig {
  enum class Kind { adam, sgd };
  Kind kind = Kind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  bool operator==(const OptimizerConfig&) const = default;
};

struct TrainConfig {
  double lambda = 1.0;
  double tau = 0.05;
  double lr = 1e-3;
  std::size_t batch_size = 16;
  std::size_t steps = 500;
  double mask_prob = 0.15;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;
  std::size_t importance_tokens = 16384;

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    if (!(lambda >= 0.0)) out.emplace_back("train.lambda must be >= 0");
    if (!(tau > 0.0)) out.emplace_back("train.tau must be > 0");
    if (!(lr > 0.0)) out.emplace_back("train.lr must be > 0");
    if (batch_size < 1) out.emplace_back("train.batch_size must be >= 1");
    if (steps < 1) out.emplace_back("train.steps must be >= 1");
    if (!(mask_prob > 0.0 && mask_prob < 1.0)) out.emplace_back("train.mask_prob must be in (0,1)");
    if (importance_tokens < 1) out.emplace_back("train.importance_tokens must be >= 1");
    return out;
  }

  bool operator==(const TrainConfig&) const = default;
};

// Hyperparameters reported for the full-scale setting, kept for reference.
inline TrainConfig paper_scale_train_config() {
  TrainConfig c;
  c.lambda = 1.0;
  c.tau = 0.05;
  c.lr = 1e-4;
  c.batch_size = 256;
  c.steps = 2500;
  c.importance_tokens = 1'640'000;
  return c;
}

inline TrainConfig desk_scale_train_config() {
  TrainConfig c;
  c.lr = 3e-3;
  return c;
}

// ---------------------------------------------------------------------------
// Optimizer

class Optimizer {
 public:
  Optimizer() = default;
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

  // Applies one update to every parameter that has a gradient.
  void step(std::vector<Tensor>& params, const GradientMap& grads, double lr) {
    if (m_.empty()) {
      for (auto& p : params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!grads.has(params[i])) continue;
      auto g = grads.of(params[i]);
      auto w = params[i].mutable_data();
      if (cfg_.kind == OptimizerConfig::Kind::sgd) {
        for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * g[j];
        continue;
      }
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
      }
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Soft-masking

// Gradient multipliers (1 - I) expanded onto the parameters owned by each
// unit. Head h owns its column slice of W_q/W_k/W_v and their biases plus
// its row slice of W_o; intermediate neuron j owns column j of W_1, b_1[j]
// and row j of W_2; output neuron k owns column k of W_2 and b_2[k]. An
// entry of W_2 owned by two units takes the larger importance.
class SoftMask {
 public:
  SoftMask() = default;

  static SoftMask build(const GatedTransformer& model, const ImportanceStore& store) {
    const auto& cfg = model.config();
    const auto& imp = store.accumulated.scores;
    if (!imp.matches(cfg)) throw ShapeError("softmask: importance store does not match the model");
    SoftMask mask;
    const std::size_t d = cfg.d_model, f = cfg.d_ff, dh = cfg.head_dim();
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const auto& P = model.layers()[l];
      const auto& I = imp.layers[l];
      std::vector<double> qkv_w(d * d), qkv_b(d), wo(d * d), w1(d * f), b1(f), w2(f * d), b2(d);
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < d; ++c) {
          qkv_w[r * d + c] = 1.0 - I.heads[c / dh];
          wo[r * d + c] = 1.0 - I.heads[r / dh];
        }
      for (std::size_t c = 0; c < d; ++c) qkv_b[c] = 1.0 - I.heads[c / dh];
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t j = 0; j < f; ++j) w1[r * f + j] = 1.0 - I.inter[j];
      for (std::size_t j = 0; j < f; ++j) b1[j] = 1.0 - I.inter[j];
      for (std::size_t j = 0; j < f; ++j)
        for (std::size_t k = 0; k < d; ++k) w2[j * d + k] = 1.0 - std::max(I.inter[j], I.out[k]);
      for (std::size_t k = 0; k < d; ++k) b2[k] = 1.0 - I.out[k];
      mask.add(P.wq, qkv_w);
      mask.add(P.wk, qkv_w);
      mask.add(P.wv, qkv_w);
      mask.add(P.bq, qkv_b);
      mask.add(P.bk, qkv_b);
      mask.add(P.bv, std::move(qkv_b));
      mask.add(P.wo, std::move(wo));
      mask.add(P.w1, std::move(w1));
      mask.add(P.b1, std::move(b1));
      mask.add(P.w2, std::move(w2));
      mask.add(P.b2, std::move(b2));
    }
    return mask;
  }

  // grad' = (1 - I_u) * grad for owned entries; everything else untouched.
  void apply(GradientMap& grads) const {
    for (const auto& [id, scale] : scales_) {
      auto it = grads.raw().find(id);
      if (it == grads.raw().end()) continue;
      auto& g = it->second;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= scale[i];
    }
  }

  // Same multipliers installed as backward hooks on the parameter leaves.
  void attach_hooks(const GatedTransformer& model) const {
    for (const auto& t : model.parameters()) {
      auto it = scales_.find(t.id());
      if (it != scales_.end()) attach_grad_scale(t, {it->second, GradScaleHook::Broadcast::full});
    }
  }

  static void detach_hooks(const GatedTransformer& model) {
    for (const auto& t : model.parameters()) clear_grad_scale(t);
  }

  const std::vector<double>* scale_for(const Tensor& param) const {
    auto it = scales_.find(param.id());
    return it == scales_.end() ? nullptr : &it->second;
  }

 private:
  void add(const Tensor& param, std::vector<double> scale) { scales_[param.id()] = std::move(scale); }

  std::unordered_map<std::uint64_t, std::vector<double>> scales_;
};

inline void softmask_apply(GradientMap& grads, const GatedTransformer& model, const ImportanceStore& store) {
  SoftMask::build(model, store).apply(grads);
}

// ---------------------------------------------------------------------------
// Knowledge views and the contrastive loss

struct KnowledgeViews {
  Tensor full;       // [N x d] ungated
  Tensor full_plus;  // [N x d] ungated, second dropout draw
  Tensor prev;       // [N x d] gated by the accumulated importance
};

struct ViewPasses {
  std::uint64_t seed = 0;
  std::uint64_t full = 0, full_plus = 1, prev = 2;
  bool train = true;
};

inline KnowledgeViews knowledge_views(const GatedTransformer& model, const TokenBatch& tokens,
                                      const ImportanceStore& store, ViewPasses passes,
                                      const ForwardResult* full_forward = nullptr) {
  auto mode = [&](std::uint64_t pass) {
    return passes.train ? ForwardMode::training(passes.seed, pass) : ForwardMode::eval();
  };
  KnowledgeViews views;
  if (full_forward) {
    views.full = sequence_repr(full_forward->hidden, tokens);
  } else {
    views.full = sequence_repr(model.forward(tokens, nullptr, mode(passes.full), false).hidden, tokens);
  }
  views.full_plus = sequence_repr(model.forward(tokens, nullptr, mode(passes.full_plus), false).hidden, tokens);
  auto prev_gates = GateTensors::from(GateSet::from(store.accumulated.scores));
  views.prev = sequence_repr(model.forward(tokens, &prev_gates, mode(passes.prev), false).hidden, tokens);
  return views;
}

// -(1/N) sum_n log( e^{s(a_n,p_n)/tau} / sum_j (e^{s(a_n,p_j)/tau} + e^{s(a_n,q_j)/tau}) )
// with s the cosine similarity, a = full, p = full_plus, q = prev.
inline Tensor contrastive_loss(const Tensor& full, const Tensor& full_plus, const Tensor& prev, double tau) {
  if (!(tau > 0.0)) throw Error("contrastive_loss: tau must be > 0");
  detail::require_2d(full, "contrastive_loss");
  if (full.shape() != full_plus.shape() || full.shape() != prev.shape()) {
    throw ShapeError("contrastive_loss: view shapes differ");
  }
  const std::size_t n = full.rows(), d = full.cols();
  if (n == 0) throw Error("contrastive_loss: empty batch");

  struct Cache {
    Buffer a, p, q;        // unit vectors
    Buffer na, np, nq;     // norms
    Buffer P, Q;           // softmax weights over the 2N candidates
  };
  auto c = std::make_shared<Cache>();
  auto normalize = [&](const Tensor& x, Buffer& unit, Buffer& norms) {
    unit.resize(n * d);
    norms.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += x[i * d + j] * x[i * d + j];
      const double nrm = std::sqrt(s);
      if (nrm == 0.0) throw Error("contrastive_loss: zero-norm representation");
      norms[i] = nrm;
      for (std::size_t j = 0; j < d; ++j) unit[i * d + j] = x[i * d + j] / nrm;
    }
  };
  normalize(full, c->a, c->na);
  normalize(full_plus, c->p, c->np);
  normalize(prev, c->q, c->nq);

  auto A = detail::as_mat(std::span<const double>(c->a), n, d);
  detail::RowMat S = A * detail::as_mat(std::span<const double>(c->p), n, d).transpose() / tau;
  detail::RowMat R = A * detail::as_mat(std::span<const double>(c->q), n, d).transpose() / tau;
  c->P.resize(n * n);
  c->Q.resize(n * n);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max({mx, S(i, j), R(i, j)});
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(S(i, j) - mx) + std::exp(R(i, j) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) {
      c->P[i * n + j] = std::exp(S(i, j) - lse);
      c->Q[i * n + j] = std::exp(R(i, j) - lse);
    }
    loss += lse - S(i, i);
  }
  loss /= static_cast<double>(n);

  return detail::make_result(
      "contrastive", {1}, {loss}, {full, full_plus, prev},
      [c, n, d, tau](const detail::Node&, std::span<const double> g, auto pg) {
        const double s = g[0] / (static_cast<double>(n) * tau);
        // dS = (P - I) * s, dR = Q * s  (w.r.t. the scaled similarities times tau)
        detail::RowMat dS = detail::as_mat(std::span<const double>(c->P), n, n) * s;
        for (std::size_t i = 0; i < n; ++i) dS(i, i) -= s;
        detail::RowMat dR = detail::as_mat(std::span<const double>(c->Q), n, n) * s;
        auto A = detail::as_mat(std::span<const double>(c->a), n, d);
        auto Pu = detail::as_mat(std::span<const double>(c->p), n, d);
        auto Qu = detail::as_mat(std::span<const double>(c->q), n, d);
        auto unnormalize = [d](const detail::RowMat& du, const auto& unit, const Buffer& norms,
                               Buffer& out) {
          for (std::size_t i = 0; i < norms.size(); ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += du(i, j) * unit(i, j);
            for (std::size_t j = 0; j < d; ++j) out[i * d + j] += (du(i, j) - unit(i, j) * dot) / norms[i];
          }
        };
        if (pg[0]) {
          detail::RowMat da = dS * Pu + dR * Qu;
          unnormalize(da, A, c->na, *pg[0]);
        }
        if (pg[1]) {
          detail::RowMat dp = dS.transpose() * A;
          unnormalize(dp, Pu, c->np, *pg[1]);
        }
        if (pg[2]) {
          detail::RowMat dq = dR.transpose() * A;
          unnormalize(dq, Qu, c->nq, *pg[2]);
        }
      });
}

// ---------------------------------------------------------------------------
// Training steps

struct StepLosses {
  double mlm = 0.0;
  double contrast = 0.0;
  double total = 0.0;
};

inline void to_json(nlohmann::json& j, const StepLosses& s) {
  j = {{"mlm_loss", s.mlm}, {"contrast_loss", s.contrast}, {"total", s.total}};
}

// Dropout passes used by step `step` of a domain run.
inline std::uint64_t step_pass(std::size_t step, std::size_t view) { return 3 * static_cast<std::uint64_t>(step) + view; }

inline void check_divergence(double total) {
  if (!std::isfinite(total)) throw NumericError("training: non-finite loss");
  if (total > 1e6) throw NumericError("training: optimizer diverged (loss > 1e6)");
}

// Plain MLM update with no importance, masking or contrast (the naive
// continual-learning baseline).
inline StepLosses naive_mlm_step(GatedTransformer& model, const MLMBatch& batch, const TrainConfig& config,
                                 Optimizer& opt, std::size_t step) {
  auto fwd = model.forward(batch.inputs, nullptr, ForwardMode::training(config.seed, step_pass(step, 0)));
  Tensor loss = mlm_loss(fwd.logits, batch);
  check_divergence(loss.item());
  GradientMap grads = backward(loss);
  auto params = model.parameters();
  opt.step(params, grads, config.lr);
  return {loss.item(), 0.0, loss.item()};
}

struct StepOptions {
  bool softmask = true;  // mask the backward pass with the store
};

// total = L_MLM + lambda * L_contrast on ungated forwards; the store only
// enters through the backward mask and the o_prev view.
inline StepLosses dap_train_step(GatedTransformer& model, const MLMBatch& batch, const ImportanceStore& store,
                                 const SoftMask& mask, const TrainConfig& config, Optimizer& opt, std::size_t step,
                                 StepOptions options = {}) {
  auto fwd = model.forward(batch.inputs, nullptr, ForwardMode::training(config.seed, step_pass(step, 0)));
  Tensor mlm = mlm_loss(fwd.logits, batch);
  Tensor total = mlm;
  double contrast_value = 0.0;
  if (config.lambda > 0.0) {
    auto views = knowledge_views(model, batch.inputs, store,
                                 {config.seed, step_pass(step, 0), step_pass(step, 1), step_pass(step, 2), true}, &fwd);
    Tensor contrast = contrastive_loss(views.full, views.full_plus, views.prev, config.tau);
    contrast_value = contrast.item();
    total = add(mlm, scale(contrast, config.lambda));
  }
  check_divergence(total.item());
  GradientMap grads = backward(total);
  if (options.softmask) mask.apply(grads);
  auto params = model.parameters();
  opt.step(params, grads, config.lr);
  return {mlm.item(), contrast_value, total.item()};
}

// ---------------------------------------------------------------------------
// End-task fine-tuning

struct LabeledDataset {
  std::size_t n_classes = 2;
  std::size_t seq_len = 32;
  std::vector<std::vector<std::size_t>> train_x, test_x;
  std::vector<std::size_t> train_y, test_y;
};

struct Metrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;

  bool operator==(const Metrics&) const = default;
};

inline Metrics classification_metrics(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred,
                                      std::size_t n_classes) {
  if (truth.size() != pred.size() || truth.empty()) throw Error("metrics: prediction count mismatch");
  std::vector<double> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == pred[i]) {
      ++correct;
      tp[truth[i]] += 1;
    } else {
      fp[pred[i]] += 1;
      fn[truth[i]] += 1;
    }
  }
  double f1_sum = 0.0;
  std::size_t classes = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    const double denom = 2 * tp[c] + fp[c] + fn[c];
    if (denom == 0.0) continue;
    f1_sum += 2 * tp[c] / denom;
    ++classes;
  }
  return {static_cast<double>(correct) / static_cast<double>(truth.size()),
          classes ? f1_sum / static_cast<double>(classes) : 0.0};
}

struct FineTuneConfig {
  std::size_t epochs = 20;
  double lr = 1e-2;
  std::size_t batch_size = 32;
  bool train_encoder = false;  // false: linear head on frozen sequence representations
  std::uint64_t seed = 0;

  bool operator==(const FineTuneConfig&) const = default;
};

namespace detail {

inline std::vector<double> encode_features(const GatedTransformer& model,
                                           const std::vector<std::vector<std::size_t>>& xs, std::size_t seq_len) {
  const std::size_t d = model.config().d_model;
  std::vector<double> feats;
  feats.reserve(xs.size() * d);
  constexpr std::size_t chunk = 64;
  for (std::size_t start = 0; start < xs.size(); start += chunk) {
    std::vector<std::vector<std::size_t>> part(xs.begin() + static_cast<std::ptrdiff_t>(start),
                                               xs.begin() + static_cast<std::ptrdiff_t>(std::min(xs.size(), start + chunk)));
    auto batch = TokenBatch::from_sequences(part, seq_len);
    auto fwd = model.forward(batch, nullptr, ForwardMode::eval(), false);
    auto rep = sequence_repr(fwd.hidden, batch);
    feats.insert(feats.end(), rep.data().begin(), rep.data().end());
  }
  return feats;
}

inline void check_labels(const std::vector<std::size_t>& ys, std::size_t n_classes) {
  for (auto y : ys)
    if (y >= n_classes) throw Error("fine_tune: label " + std::to_string(y) + " outside the task's class set");
}

}  // namespace detail

// Supervised fine-tuning on a copy of `model`; returns test metrics after
// the last epoch. The source model is never modified.
inline Metrics fine_tune(const GatedTransformer& model, const LabeledDataset& task, const FineTuneConfig& cfg) {
  if (task.n_classes < 1) throw Error("fine_tune: task needs at least one class");
  if (task.train_x.size() != task.train_y.size() || task.test_x.size() != task.test_y.size()) {
    throw Error("fine_tune: examples and labels differ in count");
  }
  if (task.train_x.empty() || task.test_x.empty()) throw Error("fine_tune: empty train or test split");
  detail::check_labels(task.train_y, task.n_classes);
  detail::check_labels(task.test_y, task.n_classes);

  const std::size_t d = model.config().d_model, C = task.n_classes;
  Rng rng(mix_key(cfg.seed, 0xF17E));
  std::vector<double> w0(d * C);
  for (auto& v : w0) v = 0.01 * rng.normal();
  Tensor head_w = Tensor::leaf({d, C}, std::move(w0), true);
  Tensor head_b = Tensor::leaf({C}, std::vector<double>(C, 0.0), true);
  Optimizer opt(OptimizerConfig{});
  std::vector<std::size_t> order(task.train_x.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<std::size_t> pred(task.test_x.size());
  if (!cfg.train_encoder) {
    // Frozen encoder: features are computed once and standardized with the
    // training-split statistics.
    auto train_f = detail::encode_features(model, task.train_x, task.seq_len);
    auto test_f = detail::encode_features(model, task.test_x, task.seq_len);
    const std::size_t n_train = task.train_x.size();
    std::vector<double> mu(d, 0.0), sd(d, 0.0);
    for (std::size_t i = 0; i < n_train; ++i)
      for (std::size_t j = 0; j < d; ++j) mu[j] += train_f[i * d + j];
    for (auto& m : mu) m /= static_cast<double>(n_train);
    for (std::size_t i = 0; i < n_train; ++i)
      for (std::size_t j = 0; j < d; ++j) sd[j] += (train_f[i * d + j] - mu[j]) * (train_f[i * d + j] - mu[j]);
    for (auto& s : sd) s = std::sqrt(s / static_cast<double>(n_train)) + 1e-8;
    auto standardize = [&](std::vector<double>& f) {
      for (std::size_t i = 0; i < f.size(); ++i) f[i] = (f[i] - mu[i % d]) / sd[i % d];
    };
    standardize(train_f);
    standardize(test_f);
    std::vector<Tensor> params{head_w, head_b};
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      rng.shuffle(order);
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), start + cfg.batch_size);
        std::vector<double> x;
        std::vector<std::size_t> y;
        for (std::size_t i = start; i < end; ++i) {
          x.insert(x.end(), train_f.begin() + static_cast<std::ptrdiff_t>(order[i] * d),
                   train_f.begin() + static_cast<std::ptrdiff_t>((order[i] + 1) * d));
          y.push_back(task.train_y[order[i]]);
        }
        const std::size_t b = y.size();
        Tensor logits = linear(Tensor::leaf({b, d}, std::move(x)), head_w, head_b);
        Tensor loss = weighted_cross_entropy(logits, y, std::vector<double>(b, 1.0 / static_cast<double>(b)));
        opt.step(params, backward(loss), cfg.lr);
      }
    }
    Tensor logits = linear(Tensor::leaf({task.test_x.size(), d}, std::move(test_f)), head_w, head_b);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      auto row = logits.data().subspan(i * C, C);
      pred[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return classification_metrics(task.test_y, pred, C);
  }

  GatedTransformer copy = model.clone();
  auto params = copy.parameters();
  params.push_back(head_w);
  params.push_back(head_b);
  std::uint64_t pass = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<std::vector<std::size_t>> xs;
      std::vector<std::size_t> y;
      for (std::size_t i = start; i < end; ++i) {
        xs.push_back(task.train_x[order[i]]);
        y.push_back(task.train_y[order[i]]);
      }
      auto batch = TokenBatch::from_sequences(xs, task.seq_len);
      auto fwd = copy.forward(batch, nullptr, ForwardMode::training(cfg.seed, pass++), false);
      Tensor logits = linear(sequence_repr(fwd.hidden, batch), head_w, head_b);
      Tensor loss = weighted_cross_entropy(logits, y, std::vector<double>(y.size(), 1.0 / static_cast<double>(y.size())));
      opt.step(params, backward(loss), cfg.lr);
    }
  }
  auto test_f = detail::encode_features(copy, task.test_x, task.seq_len);
  Tensor logits = linear(Tensor::leaf({task.test_x.size(), d}, std::move(test_f)), head_w, head_b);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    auto row = logits.data().subspan(i * C, C);
    pred[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return classification_metrics(task.test_y, pred, C);
}

}  // namespace das
