#pragma once

// Masked-language-model corruption, loss and mean-pooled sequence
// representations.

#include <cstddef>
#include <limits>
#include <vector>

#include "das/autodiff.hpp"
#include "das/model.hpp"
#include "das/rng.hpp"
#include "das/vocab.hpp"

namespace das {

inline constexpr std::size_t no_label = std::numeric_limits<std::size_t>::max();

struct MLMBatch {
  TokenBatch inputs;                 // corrupted ids
  std::vector<std::size_t> labels;   // original id at masked positions, no_label elsewhere
  std::vector<bool> mask_positions;

  std::size_t masked_count() const {
    std::size_t m = 0;
    for (bool b : mask_positions) m += b;
    return m;
  }
};

// BERT corruption: each non-padding position is selected with `mask_prob`;
// a selected token becomes [MASK] (80%), a random non-special token (10%)
// or stays unchanged (10%). Labels are recorded for every selected position.
inline MLMBatch mlm_corrupt(const TokenBatch& tokens, double mask_prob, std::size_t vocab_size, Rng& rng) {
  if (!(mask_prob > 0.0 && mask_prob < 1.0)) throw Error("mlm_corrupt: mask_prob must be in (0,1)");
  if (tokens.t < 1 || tokens.n < 1) throw Error("mlm_corrupt: sequences must hold at least one token");
  if (vocab_size <= Vocabulary::n_special) throw Error("mlm_corrupt: vocabulary has no regular tokens");
  MLMBatch b{tokens, std::vector<std::size_t>(tokens.ids.size(), no_label),
             std::vector<bool>(tokens.ids.size(), false)};
  for (std::size_t i = 0; i < tokens.ids.size(); ++i) {
    const std::size_t id = tokens.ids[i];
    if (id == Vocabulary::pad_id) continue;
    if (!rng.bernoulli(mask_prob)) continue;
    b.labels[i] = id;
    b.mask_positions[i] = true;
    const double r = rng.uniform();
    if (r < 0.8) {
      b.inputs.ids[i] = Vocabulary::mask_id;
    } else if (r < 0.9) {
      b.inputs.ids[i] = Vocabulary::n_special + rng.below(vocab_size - Vocabulary::n_special);
    }
  }
  return b;
}

// Mean cross-entropy over every masked position of the batch.
inline Tensor mlm_loss(const Tensor& logits, const MLMBatch& batch) {
  const std::size_t m = batch.masked_count();
  if (m == 0) throw Error("mlm_loss: batch has no masked positions");
  if (logits.rows() != batch.labels.size()) throw ShapeError("mlm_loss: logits rows do not match batch");
  std::vector<double> w(batch.labels.size(), 0.0);
  std::vector<std::size_t> labels(batch.labels.size(), 0);
  for (std::size_t i = 0; i < w.size(); ++i)
    if (batch.mask_positions[i]) {
      w[i] = 1.0 / static_cast<double>(m);
      labels[i] = batch.labels[i];
    }
  return weighted_cross_entropy(logits, labels, w);
}

// Sum over sequences of each sequence's own mean masked cross-entropy.
// Sequences without masked positions contribute nothing.
inline Tensor mlm_loss_per_sequence_sum(const Tensor& logits, const MLMBatch& batch) {
  const std::size_t n = batch.inputs.n, t = batch.inputs.t;
  std::vector<double> w(n * t, 0.0);
  std::vector<std::size_t> labels(n * t, 0);
  for (std::size_t s = 0; s < n; ++s) {
    std::size_t m = 0;
    for (std::size_t j = 0; j < t; ++j) m += batch.mask_positions[s * t + j];
    for (std::size_t j = 0; j < t; ++j)
      if (batch.mask_positions[s * t + j]) {
        w[s * t + j] = 1.0 / static_cast<double>(m);
        labels[s * t + j] = batch.labels[s * t + j];
      }
  }
  return weighted_cross_entropy(logits, labels, w);
}

// Average of each sequence's non-padding token rows: [N*T x d] -> [N x d].
inline Tensor sequence_repr(const Tensor& hidden, const TokenBatch& tokens) {
  std::vector<double> w(tokens.n * tokens.t, 0.0);
  for (std::size_t s = 0; s < tokens.n; ++s) {
    const std::size_t len = tokens.length(s);
    if (len == 0) throw Error("sequence_repr: sequence " + std::to_string(s) + " is all padding");
    for (std::size_t j = 0; j < tokens.t; ++j)
      if (tokens.ids[s * tokens.t + j] != Vocabulary::pad_id) w[s * tokens.t + j] = 1.0 / static_cast<double>(len);
  }
  return pool_rows(hidden, w, tokens.t);
}

}  // namespace das
