#pragma once

// Shared oracles for the test suites: central finite differences and a few
// tiny fixtures.

#include <algorithm>
#include <bit>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "das/autodiff.hpp"
#include "das/corpus.hpp"
#include "das/model.hpp"
#include "das/rng.hpp"

namespace das::testing {

struct FdReport {
  std::size_t checked = 0;
  std::size_t failed = 0;
  double worst_rel = 0.0;  // over entries whose absolute error exceeds the floor
  double worst_abs = 0.0;
  std::string worst_at;
};

// |analytic - numeric| must be <= rel * max(|analytic|, |numeric|) or <= abs_floor.
inline FdReport finite_difference_check(const std::vector<std::pair<std::string, Tensor>>& wrt,
                                        const std::function<Tensor()>& loss, double rel = 1e-4,
                                        double abs_floor = 1e-6, double h = 1e-5) {
  FdReport rep;
  GradientMap grads = backward(loss());
  for (const auto& [name, t0] : wrt) {
    Tensor t = t0;
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = loss().item();
      data[i] = saved - h;
      const double down = loss().item();
      data[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = grads.has(t) ? grads.of(t)[i] : 0.0;
      const double err = std::abs(analytic - numeric);
      ++rep.checked;
      rep.worst_abs = std::max(rep.worst_abs, err);
      if (err <= abs_floor) continue;
      const double r = err / std::max(std::abs(analytic), std::abs(numeric));
      if (r > rep.worst_rel) {
        rep.worst_rel = r;
        rep.worst_at = name + "[" + std::to_string(i) + "]";
      }
      if (r > rel) ++rep.failed;
    }
  }
  return rep;
}

inline Tensor random_leaf(Shape shape, Rng& rng, double scale = 1.0, bool grad = true) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::leaf(std::move(shape), std::move(v), grad);
}

inline ModelConfig tiny_config(double dropout = 0.1) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.vocab_size = 20;
  c.max_seq_len = 6;
  c.dropout_p = dropout;
  return c;
}

inline TokenBatch random_tokens(std::size_t n, std::size_t t, std::size_t vocab, Rng& rng) {
  TokenBatch b{n, t, std::vector<std::size_t>(n * t)};
  for (auto& id : b.ids) id = Vocabulary::n_special + rng.below(vocab - Vocabulary::n_special);
  return b;
}

// A small synthetic corpus over a `vocab`-sized vocabulary.
inline DomainCorpus toy_corpus(std::size_t tokens, std::size_t seq_len, std::size_t vocab, std::uint64_t seed) {
  GeneratorSpec g;
  for (std::size_t i = Vocabulary::n_special; i < vocab; ++i) g.domain_ids.push_back(i);
  g.general_fraction = 0.0;
  g.structure_seed = seed;
  CorpusSpec cs;
  cs.generator = g;
  cs.tokens = tokens;
  cs.seq_len = seq_len;
  cs.seed = seed;
  return synth_corpus("toy", cs);
}

inline bool bit_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](double x, double y) {
           return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y);
         });
}

}  // namespace das::testing
