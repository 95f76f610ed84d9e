#pragma once

// The three command-line commands as library functions. The `das`
// executable only parses arguments and forwards here.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "das/config.hpp"
#include "das/domain.hpp"
#include "das/harness.hpp"
#include "das/importance.hpp"
#include "das/report.hpp"

namespace das {

inline constexpr const char* output_root_env = "DAS_OUTPUT_ROOT";

struct RunOverrides {
  std::vector<std::uint64_t> seeds;  // empty: keep the config's seeds
  std::optional<Method> method;
  std::string out;
};

// --out, then the config's output_dir, then $DAS_OUTPUT_ROOT/<config name>,
// then runs/<config name>.
inline std::filesystem::path resolve_output_dir(const std::string& config_path, const RunConfig& cfg,
                                                const std::string& out_flag) {
  if (!out_flag.empty()) return out_flag;
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  const std::string stem = std::filesystem::path(config_path).stem().string();
  if (const char* root = std::getenv(output_root_env); root && *root) return std::filesystem::path(root) / stem;
  return std::filesystem::path("runs") / stem;
}

inline RunConfig apply_overrides(RunConfig cfg, const RunOverrides& o) {
  if (!o.seeds.empty()) cfg.seeds = o.seeds;
  if (o.method) cfg.methods = {*o.method};
  return cfg;
}

inline int cmd_run(const std::string& config_path, const RunOverrides& overrides, std::ostream& out,
                   std::ostream& err) {
  RunConfig cfg;
  try {
    cfg = load_run_config(config_path);
  } catch (const ConfigError& e) {
    err << e.what() << '\n';
    return 2;
  }
  const auto dir = resolve_output_dir(config_path, cfg, overrides.out);
  cfg = apply_overrides(cfg, overrides);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    err << "output directory " << dir.string() << " cannot be created: " << ec.message() << '\n';
    return 2;
  }

  std::vector<SeedRun> runs;
  bool failed = false;
  for (Method m : cfg.methods)
    for (auto seed : cfg.seeds) {
      out << "[" << method_name(m) << " seed " << seed << "] " << std::flush;
      try {
        PreparedRun prep = prepare_run(cfg, seed);
        Vocabulary vocab = prep.vocab;
        ArtifactWriter writer(seed_dir(dir, m, seed), cfg.save_checkpoints, vocab);
        runs.push_back(run_sequence(std::move(prep), m, cfg, seed, writer.hooks()));
      } catch (const std::exception& e) {
        SeedRun r;
        r.method = m;
        r.seed = seed;
        for (const auto& d : cfg.domains) r.domain_names.push_back(d.name);
        r.error = e.what();
        runs.push_back(std::move(r));
      }
      const SeedRun& r = runs.back();
      if (!r.ok()) {
        failed = true;
        out << "failed: " << r.error << '\n';
      } else if (auto f = forgetting_if_defined(r.matrix, Metric::accuracy)) {
        out << "forgetting " << format_fixed(*f) << '\n';
      } else {
        out << "done (forgetting absent)\n";
      }
    }
  try {
    write_report(dir, cfg, runs);
  } catch (const std::exception& e) {
    err << e.what() << '\n';
    return 1;
  }
  out << "wrote " << (dir / "results.json").string() << '\n';
  if (failed) {
    err << "one or more runs failed; results.json holds the partial matrices\n";
    return 1;
  }
  return 0;
}

struct ImportanceArgs {
  std::string checkpoint;
  std::string corpus;
  std::string config;  // optional: model shape to check the checkpoint against
  ImportanceLoss loss = ImportanceLoss::proxy_kl;
  std::uint64_t seed = 0;
  std::size_t tokens = 16384;
  std::size_t top_k = 5;
  std::string out;  // default: importance.json next to the checkpoint
  std::string label = general_label;
};

struct RankedUnit {
  UnitKind kind;
  std::size_t index;
  double value;
};

// The k largest units of one layer across the three kinds, ties broken by
// kind then index.
inline std::vector<RankedUnit> top_units(const LayerUnits& layer, std::size_t k) {
  std::vector<RankedUnit> all;
  for (auto kind : all_unit_kinds) {
    const auto& v = layer.of(kind);
    for (std::size_t i = 0; i < v.size(); ++i) all.push_back({kind, i, v[i]});
  }
  std::stable_sort(all.begin(), all.end(), [](const RankedUnit& a, const RankedUnit& b) { return a.value > b.value; });
  if (all.size() > k) all.resize(k);
  return all;
}

// Importance of a checkpoint's units on a corpus; the proxy loss gives
// exactly initialize_general_importance on the same subset and seed.
inline NormalizedImportance checkpoint_importance(const GatedTransformer& model, const DomainCorpus& corpus,
                                                  const ImportanceArgs& a) {
  auto subset = sample_subset(corpus, a.tokens, 32, a.seed);
  if (a.loss == ImportanceLoss::proxy_kl) return initialize_general_importance(model, subset, a.seed);
  return normalize_importance(compute_importance(model, subset, ImportanceLoss::mlm, a.seed));
}

inline int cmd_importance(const ImportanceArgs& a, std::ostream& out, std::ostream& err) {
  try {
    auto [model, vocab] = GatedTransformer::load(a.checkpoint);
    if (!a.config.empty()) {
      RunConfig cfg = load_run_config(a.config);
      ModelConfig want = cfg.model;
      want.vocab_size = model.config().vocab_size;
      if (!(want == model.config())) {
        err << "checkpoint " << a.checkpoint << " does not match the model shape in " << a.config << '\n';
        return 2;
      }
    }
    const DomainCorpus corpus = read_corpus("corpus", a.corpus, vocab, model.config().max_seq_len);
    const NormalizedImportance imp = checkpoint_importance(model, corpus, a);
    const std::filesystem::path path =
        a.out.empty() ? std::filesystem::path(a.checkpoint).parent_path() / "importance.json" : std::filesystem::path(a.out);
    write_text(path, snapshot_json(imp, {a.label}).dump(2) + "\n");
    out << "importance (" << importance_loss_name(a.loss) << ") written to " << path.string() << '\n';
    for (std::size_t l = 0; l < imp.scores.layers.size(); ++l) {
      out << "layer " << l << ":";
      for (const auto& u : top_units(imp.scores.layers[l], a.top_k))
        out << ' ' << unit_kind_name(u.kind) << '[' << u.index << "]=" << format_fixed(u.value);
      out << '\n';
    }
    return 0;
  } catch (const ConfigError& e) {
    err << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "importance failed: " << e.what() << '\n';
    return 1;
  }
}

struct ReportArgs {
  std::string dir;
  Metric metric = Metric::accuracy;
  std::string plots;  // empty: no plots
};

inline int cmd_report(const ReportArgs& a, std::ostream& out, std::ostream& err) {
  LoadedResults res;
  try {
    res = load_results_file(std::filesystem::path(a.dir) / "results.json");
  } catch (const std::exception& e) {
    err << e.what() << '\n';
    return 1;
  }
  print_summary(out, res, a.metric);
  if (a.plots.empty()) return 0;
  std::error_code ec;
  std::filesystem::create_directories(a.plots, ec);
  if (ec) {
    out << "plots skipped: " << a.plots << " is not writable (" << ec.message() << ")\n";
    return 0;
  }
  for (const auto& m : res.methods) {
    const auto path = std::filesystem::path(a.plots) / (m + "-" + metric_name(a.metric) + ".svg");
    try {
      write_text(path, svg_plot(res, m, a.metric));
      out << "plot: " << path.string() << '\n';
    } catch (const std::exception& e) {
      out << "plot for " << m << " skipped: " << e.what() << '\n';
    }
  }
  return 0;
}

}  // namespace das
