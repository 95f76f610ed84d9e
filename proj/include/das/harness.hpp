#pragma once

// Multi-domain continual runs: corpus and end-task preparation, the
// per-method training plan, the accuracy matrix and the forgetting rate.

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "das/config.hpp"
#include "das/corpus.hpp"
#include "das/domain.hpp"
#include "das/importance.hpp"
#include "das/log.hpp"
#include "das/model.hpp"
#include "das/trainer.hpp"

namespace das {

// What a method changes relative to the full configuration.
struct MethodPlan {
  double lambda = 0.0;
  bool softmask = true;
  bool init_general = true;
  ImportanceMode importance = ImportanceMode::computed;

  bool operator==(const MethodPlan&) const = default;
};

inline MethodPlan plan_for(Method m, const TrainConfig& train) {
  switch (m) {
    case Method::das: return {train.lambda, true, true, ImportanceMode::computed};
    case Method::ncl: return {0.0, false, false, ImportanceMode::none};
    case Method::wo_contrast: return {0.0, true, true, ImportanceMode::computed};
    case Method::wo_softmask: return {train.lambda, false, true, ImportanceMode::computed};
    case Method::wo_init: return {train.lambda, true, false, ImportanceMode::computed};
    case Method::random_importance: return {train.lambda, true, true, ImportanceMode::random};
  }
  throw Error("plan_for: unknown method");
}

// ---------------------------------------------------------------------------
// Accuracy matrix

enum class Metric { accuracy, macro_f1 };

inline const char* metric_name(Metric m) { return m == Metric::accuracy ? "accuracy" : "macro_f1"; }

struct AccuracyMatrix {
  std::vector<std::vector<Metrics>> rows;  // rows[t][k] for k <= t

  std::size_t size() const { return rows.size(); }

  double at(std::size_t t, std::size_t k, Metric m) const {
    const Metrics& r = rows.at(t).at(k);
    return m == Metric::accuracy ? r.accuracy : r.macro_f1;
  }

  bool operator==(const AccuracyMatrix&) const = default;
};

// Mean over earlier domains of (A[k][k] - A[T][k]).
inline double forgetting_rate(const AccuracyMatrix& A, Metric metric = Metric::accuracy) {
  const std::size_t T = A.size();
  if (T < 2) throw Error("forgetting_rate: needs at least two domains");
  for (std::size_t t = 0; t < T; ++t)
    if (A.rows[t].size() != t + 1) throw Error("forgetting_rate: accuracy matrix is not lower triangular");
  double sum = 0.0;
  for (std::size_t k = 0; k + 1 < T; ++k) sum += A.at(k, k, metric) - A.at(T - 1, k, metric);
  return sum / static_cast<double>(T - 1);
}

// Absent for fewer than two domains.
inline std::optional<double> forgetting_if_defined(const AccuracyMatrix& A, Metric metric) {
  if (A.size() < 2 || A.rows.back().size() != A.size()) return std::nullopt;
  return forgetting_rate(A, metric);
}

// ---------------------------------------------------------------------------
// Preparation

struct PreparedDomain {
  std::string name;
  CorpusHandle corpus;
  LabeledDataset task;
};

struct PreparedRun {
  Vocabulary vocab;
  ModelConfig model;
  std::vector<PreparedDomain> domains;
};

namespace detail {

inline LabeledDataset read_task_files(const DomainSpec& d, const Vocabulary& vocab, std::size_t seq_len) {
  LabeledDataset ds;
  ds.n_classes = d.task.n_classes;
  ds.seq_len = seq_len;
  auto read = [&](const std::string& path, auto& xs, auto& ys) {
    std::ifstream in(path);
    if (!in) throw Error("task file " + path + " cannot be read");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw Error(path + ":" + std::to_string(lineno) + ": expected label<TAB>tokens");
      std::size_t label = 0;
      try {
        label = std::stoul(line.substr(0, tab));
      } catch (const std::exception&) {
        throw Error(path + ":" + std::to_string(lineno) + ": label is not a non-negative integer");
      }
      auto ids = vocab.encode(line.substr(tab + 1));
      if (ids.empty()) throw Error(path + ":" + std::to_string(lineno) + ": empty example");
      if (ids.size() > seq_len) ids.resize(seq_len);
      xs.push_back(std::move(ids));
      ys.push_back(label);
    }
  };
  read(d.task_train_file, ds.train_x, ds.train_y);
  read(d.task_test_file, ds.test_x, ds.test_y);
  return ds;
}

inline void add_file_words(const std::string& path, bool has_label, std::vector<std::string>& words,
                           std::set<std::string>& seen) {
  std::ifstream in(path);
  if (!in) throw Error("corpus file " + path + " cannot be read");
  std::string line;
  while (std::getline(in, line)) {
    if (has_label) {
      const auto tab = line.find('\t');
      line = tab == std::string::npos ? std::string() : line.substr(tab + 1);
    }
    std::istringstream ws(line);
    for (std::string w; ws >> w;)
      if (seen.insert(w).second) words.push_back(w);
  }
}

}  // namespace detail

// Vocabulary, corpora and end tasks of one seed. Synthetic domains take the
// synthetic slices in order; file domains extend the vocabulary with their
// words.
inline PreparedRun prepare_run(const RunConfig& cfg, std::uint64_t seed) {
  std::size_t n_synthetic = 0;
  for (const auto& d : cfg.domains) n_synthetic += d.synthetic_corpus() ? 1 : 0;
  SyntheticVocabSpec vspec = cfg.vocabulary;
  vspec.n_domains = n_synthetic;
  VocabLayout layout = make_vocab_layout(vspec);

  std::vector<std::string> words(layout.vocab.tokens().begin() + Vocabulary::n_special, layout.vocab.tokens().end());
  std::set<std::string> seen(words.begin(), words.end());
  for (const auto& d : cfg.domains) {
    if (!d.synthetic_corpus()) detail::add_file_words(d.corpus_file, false, words, seen);
    if (!d.synthetic_task()) {
      detail::add_file_words(d.task_train_file, true, words, seen);
      detail::add_file_words(d.task_test_file, true, words, seen);
    }
  }

  PreparedRun run;
  run.vocab = Vocabulary(words);
  run.model = cfg.model;
  run.model.vocab_size = run.vocab.size();
  run.model.validate();

  std::size_t slice = 0;
  for (const auto& d : cfg.domains) {
    PreparedDomain p;
    p.name = d.name;
    std::optional<GeneratorSpec> gen;
    if (d.synthetic_corpus()) {
      GeneratorSpec g;
      g.general_ids = layout.general;
      g.domain_ids = layout.domains[slice++];
      g.general_fraction = d.synthetic.general_fraction;
      g.stickiness = d.synthetic.stickiness;
      g.n_classes = d.synthetic.n_classes;
      g.lag = d.synthetic.lag;
      g.domain_stream_uses_general = d.synthetic.walks_general;
      g.structure_seed = mix_key(d.synthetic.structure_seed, seed);
      CorpusSpec cs;
      cs.generator = g;
      cs.tokens = d.synthetic.tokens;
      cs.seq_len = cfg.seq_len;
      cs.seed = mix_key(d.synthetic.seed, seed);
      p.corpus = CorpusHandle(synth_corpus(d.name, cs));
      gen = g;
    } else {
      p.corpus = CorpusHandle(read_corpus(d.name, d.corpus_file, run.vocab, cfg.seq_len));
    }
    if (d.synthetic_task()) {
      TaskSpec ts = d.task;
      ts.seed = mix_key(d.task.seed, seed);
      p.task = synth_task(*gen, ts, cfg.seq_len);
    } else {
      p.task = detail::read_task_files(d, run.vocab, cfg.seq_len);
    }
    run.domains.push_back(std::move(p));
  }
  return run;
}

// ---------------------------------------------------------------------------
// Continual run

struct DomainRecord {
  std::string name;
  std::vector<StepLosses> log;
  std::optional<NormalizedImportance> importance;
};

struct SeedRun {
  Method method = Method::das;
  std::uint64_t seed = 0;
  std::vector<std::string> domain_names;
  AccuracyMatrix matrix;
  std::vector<DomainRecord> domains;
  std::optional<NormalizedImportance> general_importance;
  ImportanceStore final_store;
  std::string error;  // non-empty when the run stopped early

  bool ok() const { return error.empty(); }
};

struct RunHooks {
  std::function<void(std::size_t domain, std::size_t step, const StepLosses&)> on_step;
  // Called after domain `t` is trained, evaluated and its corpus released.
  std::function<void(std::size_t domain, const GatedTransformer&, const DomainResult&,
                     const std::vector<PreparedDomain>&)>
      on_domain_end;
};

inline std::uint64_t model_seed(std::uint64_t seed) { return mix_key(seed, 0x4D0D); }
inline std::uint64_t domain_train_seed(std::uint64_t seed, std::size_t t) { return mix_key(seed, 0x7A10 + t); }
inline std::uint64_t general_importance_seed(std::uint64_t seed) { return mix_key(seed, 0x6E1); }
inline std::uint64_t fine_tune_seed(std::uint64_t seed, std::size_t t, std::size_t k) {
  return mix_key(mix_key(seed, 0xF7 + t), k);
}

inline TrainConfig domain_train_config(const RunConfig& cfg, const MethodPlan& plan, std::uint64_t seed,
                                       std::size_t t) {
  TrainConfig tc = cfg.train;
  tc.lambda = plan.lambda;
  tc.seed = domain_train_seed(seed, t);
  return tc;
}

// Trains the domains in order; after domain t the corpus handle is released
// and every end task k <= t is fine-tuned on a copy of the model. Failures
// stop the run and are recorded in `error` with the rows finished so far.
inline SeedRun run_sequence(PreparedRun prep, Method method, const RunConfig& cfg, std::uint64_t seed,
                            const RunHooks& hooks = {}) {
  if (prep.domains.empty()) throw Error("run_sequence: needs at least one domain");
  const MethodPlan plan = plan_for(method, cfg.train);
  SeedRun run;
  run.method = method;
  run.seed = seed;
  for (const auto& d : prep.domains) run.domain_names.push_back(d.name);

  GatedTransformer model(prep.model, model_seed(seed));
  ImportanceStore store = ImportanceStore::zeros(prep.model);
  Optimizer shared_opt(cfg.train.optimizer);
  try {
    if (plan.init_general && plan.importance != ImportanceMode::none) {
      NormalizedImportance general;
      if (plan.importance == ImportanceMode::random) {
        general = random_importance(prep.model, mix_key(general_importance_seed(seed), 0x4A2D));
      } else {
        auto subset = sample_subset(prep.domains.front().corpus.get(), cfg.train.importance_tokens, 32,
                                    general_importance_seed(seed));
        general = initialize_general_importance(model, subset, general_importance_seed(seed));
      }
      store = accumulate(store, general, general_label);
      run.general_importance = general;
    }
    for (std::size_t t = 0; t < prep.domains.size(); ++t) {
      auto& dom = prep.domains[t];
      const TrainConfig tc = domain_train_config(cfg, plan, seed, t);
      logging::info(std::string(method_name(method)) + " seed " + std::to_string(seed) + ": training " + dom.name);
      Optimizer fresh(cfg.train.optimizer);
      std::function<void(std::size_t, const StepLosses&)> step_hook;
      if (hooks.on_step) step_hook = [&](std::size_t s, const StepLosses& l) { hooks.on_step(t, s, l); };
      DomainResult res = train_domain(model, dom.corpus, store, tc, dom.name, {plan.softmask, plan.importance},
                                      cfg.persist_optimizer ? shared_opt : fresh, step_hook);
      store = res.store;
      dom.corpus.release();
      run.domains.push_back({dom.name, res.log, res.importance});

      std::vector<Metrics> row;
      for (std::size_t k = 0; k <= t; ++k) {
        FineTuneConfig ft = cfg.fine_tune;
        ft.seed = fine_tune_seed(seed, t, k);
        row.push_back(fine_tune(model, prep.domains[k].task, ft));
      }
      run.matrix.rows.push_back(std::move(row));
      if (hooks.on_domain_end) hooks.on_domain_end(t, model, res, prep.domains);
    }
  } catch (const std::exception& e) {
    run.error = e.what();
    logging::warn(std::string(method_name(method)) + " seed " + std::to_string(seed) + " failed: " + e.what());
  }
  run.final_store = store;
  return run;
}

// Pairwise cosine similarity of the per-domain importance vectors of one
// unit kind (general initialization first when present).
struct SimilarityTable {
  std::vector<std::string> labels;
  std::vector<std::vector<double>> values;
};

inline SimilarityTable importance_similarity_table(const SeedRun& run, UnitKind kind = UnitKind::head) {
  std::vector<std::pair<std::string, const NormalizedImportance*>> items;
  if (run.general_importance) items.emplace_back(general_label, &*run.general_importance);
  for (const auto& d : run.domains)
    if (d.importance) items.emplace_back(d.name, &*d.importance);
  SimilarityTable table;
  for (auto& [label, _] : items) table.labels.push_back(label);
  for (auto& [_, a] : items) {
    table.values.emplace_back();
    for (auto& [__, b] : items) {
      double s = std::numeric_limits<double>::quiet_NaN();  // all-zero vectors have no direction
      try {
        s = importance_similarity(*a, *b, kind);
      } catch (const Error&) {
      }
      table.values.back().push_back(s);
    }
  }
  return table;
}

}  // namespace das
