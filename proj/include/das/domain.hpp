#pragma once

// Training one domain end to end: soft-masked DAP-training steps followed
// by MLM importance of the new domain and its EMax accumulation.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "das/corpus.hpp"
#include "das/importance.hpp"
#include "das/trainer.hpp"

namespace das {

enum class ImportanceMode { computed, random, none };

struct DomainRunOptions {
  bool softmask = true;
  ImportanceMode importance = ImportanceMode::computed;
};

struct DomainResult {
  std::optional<NormalizedImportance> importance;  // I^(t); absent when importance is disabled
  ImportanceStore store;                           // I^(<=t)
  std::vector<StepLosses> log;
};

// Batches of whole sequences covering at least `tokens` tokens, drawn
// without replacement in a seeded order.
inline std::vector<TokenBatch> sample_subset(const DomainCorpus& corpus, std::size_t tokens, std::size_t batch_size,
                                             std::uint64_t seed) {
  if (corpus.sequences.empty()) throw Error("sample_subset: corpus '" + corpus.name + "' is empty");
  std::vector<std::size_t> order(corpus.sequences.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_key(seed, 0x5B5E7));
  rng.shuffle(order);
  std::vector<TokenBatch> out;
  std::vector<std::vector<std::size_t>> current;
  std::size_t taken = 0;
  for (std::size_t i = 0; i < order.size() && taken < tokens; ++i) {
    current.push_back(corpus.sequences[order[i]]);
    taken += current.back().size();
    if (current.size() == batch_size) {
      out.push_back(TokenBatch::from_sequences(current, corpus.seq_len));
      current.clear();
    }
  }
  if (!current.empty()) out.push_back(TokenBatch::from_sequences(current, corpus.seq_len));
  return out;
}

// Streams MLM batches over shuffled epochs of a corpus.
class BatchStream {
 public:
  BatchStream(const DomainCorpus& corpus, std::size_t batch_size, double mask_prob, std::size_t vocab_size,
              std::uint64_t seed)
      : corpus_(corpus), batch_size_(batch_size), mask_prob_(mask_prob), vocab_size_(vocab_size),
        rng_(mix_key(seed, 0xBA7C)) {
    if (corpus.sequences.empty()) throw Error("BatchStream: corpus '" + corpus.name + "' is empty");
    order_.resize(corpus.sequences.size());
    std::iota(order_.begin(), order_.end(), 0);
    rng_.shuffle(order_);
  }

  MLMBatch next() {
    std::vector<std::vector<std::size_t>> seqs;
    while (seqs.size() < batch_size_) {
      if (cursor_ == order_.size()) {
        rng_.shuffle(order_);
        cursor_ = 0;
      }
      seqs.push_back(corpus_.sequences[order_[cursor_++]]);
    }
    auto batch = mlm_corrupt(TokenBatch::from_sequences(seqs, corpus_.seq_len), mask_prob_, vocab_size_, rng_);
    if (batch.masked_count() == 0) {
      // Keep at least one prediction target per batch.
      for (std::size_t i = 0; i < batch.inputs.ids.size(); ++i)
        if (batch.inputs.ids[i] != Vocabulary::pad_id) {
          batch.labels[i] = batch.inputs.ids[i];
          batch.mask_positions[i] = true;
          batch.inputs.ids[i] = Vocabulary::mask_id;
          break;
        }
    }
    return batch;
  }

 private:
  const DomainCorpus& corpus_;
  std::size_t batch_size_;
  double mask_prob_;
  std::size_t vocab_size_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

// The importance subset of a corpus, split into batches of at most 32.
inline std::vector<TokenBatch> importance_subset(const DomainCorpus& corpus, const TrainConfig& config) {
  return sample_subset(corpus, config.importance_tokens, 32, mix_key(config.seed, 0x1A9));
}

// `config.steps` DAP-training steps on `corpus` under the fixed store
// I^(<=t-1), then I^(t) from the MLM loss on an importance subset and
// store' = EMax(store, I^(t)).
// `opt` carries its moments in and out, so a run can keep one optimizer
// across the whole domain sequence.
inline DomainResult train_domain(GatedTransformer& model, const CorpusHandle& corpus, const ImportanceStore& store,
                                 const TrainConfig& config, const std::string& label, DomainRunOptions options,
                                 Optimizer& opt, const std::function<void(std::size_t, const StepLosses&)>& on_step = {}) {
  const DomainCorpus& data = corpus.get();
  auto violations = config.violations();
  if (!violations.empty()) throw Error("train_domain: " + violations.front());
  const SoftMask mask = options.softmask ? SoftMask::build(model, store) : SoftMask{};
  BatchStream stream(data, config.batch_size, config.mask_prob, model.config().vocab_size, config.seed);
  DomainResult result;
  result.log.reserve(config.steps);
  for (std::size_t step = 0; step < config.steps; ++step) {
    auto batch = stream.next();
    auto losses = dap_train_step(model, batch, store, mask, config, opt, step, {options.softmask});
    result.log.push_back(losses);
    if (on_step) on_step(step, losses);
  }
  result.store = store;
  switch (options.importance) {
    case ImportanceMode::computed: {
      auto subset = importance_subset(data, config);
      result.importance = normalize_importance(
          compute_importance(model, subset, ImportanceLoss::mlm, mix_key(config.seed, 0x1A9), config.mask_prob));
      break;
    }
    case ImportanceMode::random:
      result.importance = random_importance(model.config(), mix_key(config.seed, 0x4A2D));
      break;
    case ImportanceMode::none:
      break;
  }
  if (result.importance) result.store = accumulate(store, *result.importance, label);
  return result;
}

inline DomainResult train_domain(GatedTransformer& model, const CorpusHandle& corpus, const ImportanceStore& store,
                                 const TrainConfig& config, const std::string& label, DomainRunOptions options = {}) {
  Optimizer opt(config.optimizer);
  return train_domain(model, corpus, store, config, label, options, opt);
}

// Same schedule with plain MLM steps: the naive sequential trainer.
inline std::vector<StepLosses> train_domain_naive(GatedTransformer& model, const CorpusHandle& corpus,
                                                  const TrainConfig& config, Optimizer& opt) {
  const DomainCorpus& data = corpus.get();
  BatchStream stream(data, config.batch_size, config.mask_prob, model.config().vocab_size, config.seed);
  std::vector<StepLosses> log;
  for (std::size_t step = 0; step < config.steps; ++step) log.push_back(naive_mlm_step(model, stream.next(), config, opt, step));
  return log;
}

inline std::vector<StepLosses> train_domain_naive(GatedTransformer& model, const CorpusHandle& corpus,
                                                  const TrainConfig& config) {
  Optimizer opt(config.optimizer);
  return train_domain_naive(model, corpus, config, opt);
}

}  // namespace das
