#pragma once

// Desk-scale domain corpora and end tasks.
//
// A synthetic domain interleaves two Markov streams: a shared "general"
// stream over the general vocabulary slice (identical in every domain) and
// a domain stream over the domain's own slice, optionally extended by the
// general slice. Every sequence carries a latent class that selects which
// successor permutation the domain stream follows, so the class is
// invisible in unigram counts and only recoverable from learned context.
// When the domain stream also walks the general slice, domains and the
// general stream disagree about the same tokens, which is what makes
// sequential training interfere. Both streams have doubly stochastic
// transitions and start from their uniform stationary distribution, so the
// unigram law of the corpus is known exactly.

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "das/autodiff.hpp"
#include "das/model.hpp"
#include "das/rng.hpp"
#include "das/trainer.hpp"
#include "das/vocab.hpp"

namespace das {

class DataIsolationError : public Error {
 public:
  using Error::Error;
};

struct SyntheticVocabSpec {
  std::size_t general_tokens = 50;
  std::size_t domain_tokens = 48;
  std::size_t n_domains = 3;

  bool operator==(const SyntheticVocabSpec&) const = default;
};

// Token ids of the shared slice and of every domain slice.
struct VocabLayout {
  Vocabulary vocab;
  std::vector<std::size_t> general;
  std::vector<std::vector<std::size_t>> domains;
};

inline VocabLayout make_vocab_layout(const SyntheticVocabSpec& spec) {
  std::vector<std::string> words;
  VocabLayout layout;
  for (std::size_t i = 0; i < spec.general_tokens; ++i) {
    layout.general.push_back(Vocabulary::n_special + words.size());
    words.push_back("g" + std::to_string(i));
  }
  for (std::size_t d = 0; d < spec.n_domains; ++d) {
    layout.domains.emplace_back();
    for (std::size_t i = 0; i < spec.domain_tokens; ++i) {
      layout.domains.back().push_back(Vocabulary::n_special + words.size());
      words.push_back("d" + std::to_string(d) + "_" + std::to_string(i));
    }
  }
  layout.vocab = Vocabulary(words);
  return layout;
}

struct GeneratorSpec {
  std::vector<std::size_t> general_ids;  // shared slice (may be empty)
  std::vector<std::size_t> domain_ids;   // domain slice (may be empty if general_fraction == 1)
  double general_fraction = 0.3;         // probability a position is drawn from the shared stream
  double stickiness = 0.9;               // probability a stream follows its successor permutation
  bool domain_stream_uses_general = false;  // domain stream walks general_ids + domain_ids
  std::size_t lag = 1;                   // a domain token depends on the domain token `lag` steps back
  std::size_t n_classes = 2;             // latent sequence classes
  std::uint64_t structure_seed = 0;      // fixes the domain permutations
  std::uint64_t general_seed = 12345;    // fixes the general permutation (shared by all domains)
};

// Exact per-token probabilities implied by a generator.
inline std::vector<std::size_t> domain_states(const GeneratorSpec& g) {
  std::vector<std::size_t> states;
  if (g.domain_stream_uses_general && !g.domain_ids.empty()) states = g.general_ids;
  states.insert(states.end(), g.domain_ids.begin(), g.domain_ids.end());
  return states;
}

inline std::vector<double> unigram_law(const GeneratorSpec& g, std::size_t vocab_size) {
  std::vector<double> p(vocab_size, 0.0);
  const auto states = domain_states(g);
  const double pg = states.empty() ? 1.0 : (g.general_ids.empty() ? 0.0 : g.general_fraction);
  for (auto id : g.general_ids) p[id] += pg / static_cast<double>(g.general_ids.size());
  for (auto id : states) p[id] += (1.0 - pg) / static_cast<double>(states.size());
  return p;
}

class SequenceGenerator {
 public:
  explicit SequenceGenerator(GeneratorSpec spec) : spec_(std::move(spec)), states_(domain_states(spec_)) {
    if (spec_.general_ids.empty() && spec_.domain_ids.empty()) throw Error("synth_corpus: empty vocabulary partition");
    if (spec_.n_classes < 1) throw Error("synth_corpus: need at least one latent class");
    if (spec_.lag < 1) throw Error("synth_corpus: lag must be >= 1");
    if (!(spec_.general_fraction >= 0.0 && spec_.general_fraction <= 1.0)) {
      throw Error("synth_corpus: general_fraction must be in [0,1]");
    }
    Rng srng(spec_.structure_seed);
    for (std::size_t c = 0; c < spec_.n_classes; ++c) class_perm_.push_back(permutation(states_.size(), srng));
    Rng grng(spec_.general_seed);
    general_perm_ = permutation(spec_.general_ids.size(), grng);
  }

  const GeneratorSpec& spec() const { return spec_; }

  std::vector<std::size_t> sequence(std::size_t len, std::size_t cls, Rng& rng) const {
    const auto& G = spec_.general_ids;
    const auto& D = states_;
    const double pg = D.empty() ? 1.0 : (G.empty() ? 0.0 : spec_.general_fraction);
    constexpr std::size_t none = static_cast<std::size_t>(-1);
    std::size_t gs = G.empty() ? 0 : rng.below(G.size());
    bool g_started = false;
    std::vector<std::size_t> out, dstate;
    out.reserve(len);
    for (std::size_t i = 0; i < len; ++i) {
      if (rng.uniform() < pg) {
        if (g_started) gs = rng.uniform() < spec_.stickiness ? general_perm_[gs] : rng.below(G.size());
        g_started = true;
        out.push_back(G[gs]);
      } else {
        // The domain stream is indexed by its own positions, so interleaved
        // general tokens do not break its chains.
        const std::size_t j = dstate.size();
        const std::size_t from = j >= spec_.lag ? dstate[j - spec_.lag] : none;
        dstate.push_back(from != none && rng.uniform() < spec_.stickiness ? class_perm_[cls][from] : rng.below(D.size()));
        out.push_back(D[dstate.back()]);
      }
    }
    return out;
  }

 private:
  static std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    rng.shuffle(p);
    return p;
  }

  GeneratorSpec spec_;
  std::vector<std::size_t> states_;
  std::vector<std::vector<std::size_t>> class_perm_;
  std::vector<std::size_t> general_perm_;
};

struct DomainCorpus {
  std::string name;
  std::size_t seq_len = 32;
  std::vector<std::vector<std::size_t>> sequences;

  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.size();
    return n;
  }
};

struct CorpusSpec {
  std::string file;  // non-empty: read from a whitespace-token text file
  GeneratorSpec generator;
  std::size_t tokens = 50'000;
  std::size_t seq_len = 32;
  std::uint64_t seed = 0;
};

// Deterministic synthetic corpus of `spec.tokens` tokens in seq_len chunks.
inline DomainCorpus synth_corpus(const std::string& name, const CorpusSpec& spec) {
  if (spec.seq_len < 1 || spec.tokens < 1) throw Error("synth_corpus: size and sequence length must be >= 1");
  SequenceGenerator gen(spec.generator);
  Rng rng(mix_key(spec.seed, 0xC0));
  DomainCorpus c{name, spec.seq_len, {}};
  for (std::size_t produced = 0; produced < spec.tokens;) {
    const std::size_t len = std::min(spec.seq_len, spec.tokens - produced);
    c.sequences.push_back(gen.sequence(len, rng.below(spec.generator.n_classes), rng));
    produced += len;
  }
  return c;
}

// One sequence per line, tokens separated by single spaces.
inline void write_corpus(const DomainCorpus& corpus, const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("write_corpus: cannot write " + path);
  for (const auto& s : corpus.sequences) out << vocab.decode(s) << '\n';
}

// Reads whitespace-separated tokens and re-chunks them into seq_len windows.
inline DomainCorpus read_corpus(const std::string& name, const std::string& path, const Vocabulary& vocab,
                                std::size_t seq_len) {
  std::ifstream in(path);
  if (!in) throw Error("read_corpus: cannot read " + path);
  std::vector<std::size_t> ids;
  for (std::string w; in >> w;) ids.push_back(vocab.id(w));
  if (ids.empty()) throw Error("read_corpus: corpus " + path + " is empty");
  DomainCorpus c{name, seq_len, {}};
  for (std::size_t i = 0; i < ids.size(); i += seq_len)
    c.sequences.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(i),
                             ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), i + seq_len)));
  return c;
}

// Shared handle to a corpus that can be revoked; access after `release`
// fails, which enforces that a finished domain's data is gone.
class CorpusHandle {
 public:
  CorpusHandle() = default;
  explicit CorpusHandle(DomainCorpus corpus)
      : name_(corpus.name), corpus_(std::make_shared<DomainCorpus>(std::move(corpus))) {}

  const DomainCorpus& get() const {
    if (!corpus_) throw DataIsolationError("corpus '" + name_ + "' is no longer accessible");
    return *corpus_;
  }
  bool available() const { return corpus_ != nullptr; }
  void release() { corpus_.reset(); }
  const std::string& name() const { return name_; }

 private:
  std::string name_;
  std::shared_ptr<DomainCorpus> corpus_;
};

struct TaskSpec {
  std::size_t n_classes = 2;
  std::size_t train_size = 200;
  std::size_t test_size = 200;
  std::uint64_t seed = 0;

  bool operator==(const TaskSpec&) const = default;
};

// Labeled end task: sequences from the domain generator labeled by their
// latent class (balanced by construction).
inline LabeledDataset synth_task(const GeneratorSpec& generator, const TaskSpec& task, std::size_t seq_len) {
  if (task.n_classes < 1) throw Error("synth_task: need at least one class");
  if (task.n_classes > generator.n_classes) throw Error("synth_task: more task classes than latent classes");
  SequenceGenerator gen(generator);
  Rng rng(mix_key(task.seed, 0x7A5C));
  LabeledDataset ds;
  ds.n_classes = task.n_classes;
  ds.seq_len = seq_len;
  auto fill = [&](std::size_t count, auto& xs, auto& ys) {
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t cls = i % task.n_classes;
      xs.push_back(gen.sequence(seq_len, cls, rng));
      ys.push_back(cls);
    }
  };
  fill(task.train_size, ds.train_x, ds.train_y);
  fill(task.test_size, ds.test_x, ds.test_y);
  return ds;
}

}  // namespace das
