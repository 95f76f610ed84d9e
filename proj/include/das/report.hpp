#pragma once

// Run artifacts: results.json, results.csv, the importance-similarity
// table, per-domain training logs, checkpoints and importance snapshots,
// plus the text and SVG renderings used by `das report`.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "das/config.hpp"
#include "das/harness.hpp"

namespace das {

inline constexpr const char* results_format = "das-results/1";

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
  std::size_t n = 0;
};

inline Summary summarize(const std::vector<double>& xs) {
  Summary s;
  s.n = xs.size();
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

inline nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

inline nlohmann::json matrix_json(const AccuracyMatrix& A, Metric m) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t t = 0; t < A.size(); ++t) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t k = 0; k < A.rows[t].size(); ++k) row.push_back(A.at(t, k, m));
    rows.push_back(row);
  }
  return rows;
}

inline AccuracyMatrix matrix_from_json(const nlohmann::json& j) {
  const auto& acc = j.at("accuracy");
  const auto& f1 = j.at("macro_f1");
  if (!acc.is_array() || !f1.is_array() || acc.size() != f1.size()) throw Error("results: malformed matrix");
  AccuracyMatrix A;
  for (std::size_t t = 0; t < acc.size(); ++t) {
    if (acc[t].size() != t + 1 || f1[t].size() != t + 1) throw Error("results: matrix is not lower triangular");
    std::vector<Metrics> row;
    for (std::size_t k = 0; k <= t; ++k) row.push_back({acc[t][k].get<double>(), f1[t][k].get<double>()});
    A.rows.push_back(std::move(row));
  }
  return A;
}

inline nlohmann::json loss_summary_json(const DomainRecord& d) {
  nlohmann::json out = {{"domain", d.name}, {"steps", d.log.size()}};
  if (d.log.empty()) return out;
  double mlm = 0.0, contrast = 0.0, total = 0.0;
  for (const auto& l : d.log) {
    mlm += l.mlm;
    contrast += l.contrast;
    total += l.total;
  }
  const double n = static_cast<double>(d.log.size());
  out["first"] = d.log.front();
  out["last"] = d.log.back();
  out["mean"] = {{"mlm_loss", mlm / n}, {"contrast_loss", contrast / n}, {"total", total / n}};
  return out;
}

inline nlohmann::json similarity_json(const SimilarityTable& t) {
  return {{"labels", t.labels}, {"kind", "heads"}, {"cosine", t.values}};
}

inline nlohmann::json seed_run_json(const SeedRun& r) {
  nlohmann::json losses = nlohmann::json::array();
  for (const auto& d : r.domains) losses.push_back(loss_summary_json(d));
  nlohmann::json out = {
      {"seed", r.seed},
      {"status", r.ok() ? "ok" : "failed"},
      {"domains", r.domain_names},
      {"matrix", {{"accuracy", matrix_json(r.matrix, Metric::accuracy)}, {"macro_f1", matrix_json(r.matrix, Metric::macro_f1)}}},
      {"forgetting",
       {{"accuracy", optional_json(forgetting_if_defined(r.matrix, Metric::accuracy))},
        {"macro_f1", optional_json(forgetting_if_defined(r.matrix, Metric::macro_f1))}}},
      {"losses", losses},
      {"importance_similarity", similarity_json(importance_similarity_table(r))}};
  if (!r.ok()) out["error"] = r.error;
  return out;
}

inline nlohmann::json method_summary_json(const std::vector<const SeedRun*>& runs) {
  nlohmann::json out;
  for (Metric m : {Metric::accuracy, Metric::macro_f1}) {
    std::vector<double> forget, final_mean;
    for (const SeedRun* r : runs) {
      if (auto f = forgetting_if_defined(r->matrix, m)) forget.push_back(*f);
      if (r->ok() && r->matrix.size() == r->domain_names.size()) {
        const auto& last = r->matrix.rows.back();
        double s = 0.0;
        for (std::size_t k = 0; k < last.size(); ++k) s += r->matrix.at(last.size() - 1, k, m);
        final_mean.push_back(s / static_cast<double>(last.size()));
      }
    }
    auto fs = summarize(forget);
    auto as = summarize(final_mean);
    out["forgetting"][metric_name(m)] =
        fs.n ? nlohmann::json{{"mean", fs.mean}, {"std", fs.std}, {"n", fs.n}} : nlohmann::json();
    out["final_average"][metric_name(m)] =
        as.n ? nlohmann::json{{"mean", as.mean}, {"std", as.std}, {"n", as.n}} : nlohmann::json();
  }
  return out;
}

// results.json content. Contains no timings or paths outside the config,
// so identical configs and seeds give identical bytes.
inline nlohmann::json results_json(const RunConfig& cfg, const std::vector<SeedRun>& runs) {
  nlohmann::json methods = nlohmann::json::object();
  for (Method m : cfg.methods) {
    std::vector<const SeedRun*> mine;
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : runs)
      if (r.method == m) {
        mine.push_back(&r);
        arr.push_back(seed_run_json(r));
      }
    methods[method_name(m)] = {{"runs", arr}, {"summary", method_summary_json(mine)}};
  }
  bool all_ok = std::all_of(runs.begin(), runs.end(), [](const SeedRun& r) { return r.ok(); });
  return {{"format", results_format},
          {"status", all_ok ? "ok" : "failed"},
          {"config", run_config_json(cfg)},
          {"seeds", cfg.seeds},
          {"methods", methods}};
}

inline std::string dump_results(const nlohmann::json& j) { return j.dump(2) + "\n"; }

// Flat lower-triangle rows: one per (method, seed, t, k <= t).
inline std::string results_csv(const std::vector<SeedRun>& runs) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "method,seed,t,k,trained_through,task_domain,accuracy,macro_f1\n";
  for (const auto& r : runs)
    for (std::size_t t = 0; t < r.matrix.size(); ++t)
      for (std::size_t k = 0; k < r.matrix.rows[t].size(); ++k)
        out << method_name(r.method) << ',' << r.seed << ',' << t + 1 << ',' << k + 1 << ',' << r.domain_names[t]
            << ',' << r.domain_names[k] << ',' << r.matrix.at(t, k, Metric::accuracy) << ','
            << r.matrix.at(t, k, Metric::macro_f1) << '\n';
  return out.str();
}

inline std::string similarity_csv(const std::vector<SeedRun>& runs) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "method,seed,a,b,cosine\n";
  for (const auto& r : runs) {
    auto table = importance_similarity_table(r);
    for (std::size_t i = 0; i < table.labels.size(); ++i)
      for (std::size_t j = i + 1; j < table.labels.size(); ++j) {
        out << method_name(r.method) << ',' << r.seed << ',' << table.labels[i] << ',' << table.labels[j] << ',';
        if (!std::isnan(table.values[i][j])) out << table.values[i][j];
        out << '\n';
      }
  }
  return out.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

// Writes results.json, results.csv and importance_similarity.csv.
inline void write_report(const std::filesystem::path& dir, const RunConfig& cfg, const std::vector<SeedRun>& runs) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("output directory " + dir.string() + " cannot be created: " + ec.message());
  write_text(dir / "results.json", dump_results(results_json(cfg, runs)));
  write_text(dir / "results.csv", results_csv(runs));
  write_text(dir / "importance_similarity.csv", similarity_csv(runs));
}

inline std::filesystem::path seed_dir(const std::filesystem::path& out, Method m, std::uint64_t seed) {
  return out / method_name(m) / ("seed-" + std::to_string(seed));
}

// Hooks that stream per-step logs and write per-domain checkpoints and
// importance snapshots below seed_dir().
class ArtifactWriter {
 public:
  ArtifactWriter(std::filesystem::path dir, bool checkpoints, Vocabulary vocab)
      : dir_(std::move(dir)), checkpoints_(checkpoints), vocab_(std::move(vocab)) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw Error("cannot create " + dir_.string() + ": " + ec.message());
  }

  RunHooks hooks() {
    RunHooks h;
    h.on_step = [this](std::size_t t, std::size_t step, const StepLosses& l) {
      if (t != open_domain_) {
        log_.close();
        log_.open(dir_ / ("train_log." + std::to_string(t + 1) + ".jsonl"), std::ios::binary);
        if (!log_) throw Error("cannot write training log in " + dir_.string());
        open_domain_ = t;
      }
      nlohmann::json line = l;
      line["step"] = step;
      log_ << line.dump() << '\n';
    };
    h.on_domain_end = [this](std::size_t t, const GatedTransformer& model, const DomainResult& res,
                             const std::vector<PreparedDomain>& domains) {
      log_.flush();
      const std::string name = std::to_string(t + 1) + "-" + domains[t].name;
      write_text(dir_ / "importance" / (name + ".json"), snapshot_json(res.store).dump(2) + "\n");
      if (checkpoints_) {
        std::filesystem::create_directories(dir_ / "checkpoints");
        model.save((dir_ / "checkpoints" / (name + ".json")).string(), vocab_);
      }
    };
    return h;
  }

 private:
  std::filesystem::path dir_;
  bool checkpoints_;
  Vocabulary vocab_;
  std::ofstream log_;
  std::size_t open_domain_ = static_cast<std::size_t>(-1);
};

// ---------------------------------------------------------------------------
// Reading reports back

struct LoadedRun {
  std::string method;
  std::uint64_t seed = 0;
  std::string status;
  std::vector<std::string> domains;
  AccuracyMatrix matrix;
};

struct LoadedResults {
  nlohmann::json config;
  std::vector<std::string> methods;  // in file order
  std::vector<LoadedRun> runs;
};

inline LoadedResults load_results(const nlohmann::json& j) {
  if (!j.is_object() || j.value("format", "") != results_format) {
    throw Error("results file is not in the " + std::string(results_format) + " format");
  }
  LoadedResults out;
  out.config = j.at("config");
  const auto& methods = j.at("methods");
  std::vector<std::string> order;
  for (const auto& m : out.config.at("methods")) order.push_back(m.get<std::string>());
  for (const auto& name : order) {
    if (!methods.contains(name)) throw Error("results: method '" + name + "' listed in config but missing");
    out.methods.push_back(name);
    for (const auto& r : methods.at(name).at("runs")) {
      LoadedRun run;
      run.method = name;
      run.seed = r.at("seed").get<std::uint64_t>();
      run.status = r.at("status").get<std::string>();
      run.domains = r.at("domains").get<std::vector<std::string>>();
      run.matrix = matrix_from_json(r.at("matrix"));
      out.runs.push_back(std::move(run));
    }
  }
  return out;
}

inline LoadedResults load_results_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("corrupt results file " + path.string() + ": " + e.what());
  }
  try {
    return load_results(j);
  } catch (const nlohmann::json::exception& e) {
    throw Error("corrupt results file " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Text and SVG rendering

inline std::string format_fixed(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

// Matrix (mean over seeds), forgetting and final average per method.
inline void print_summary(std::ostream& os, const LoadedResults& res, Metric metric = Metric::accuracy) {
  for (const auto& method : res.methods) {
    std::vector<const LoadedRun*> runs;
    for (const auto& r : res.runs)
      if (r.method == method) runs.push_back(&r);
    os << "== " << method << " (" << runs.size() << " seed" << (runs.size() == 1 ? "" : "s") << ", "
       << metric_name(metric) << ")\n";
    if (runs.empty()) continue;
    const auto& names = runs.front()->domains;
    std::size_t T = 0;
    for (auto* r : runs) T = std::max(T, r->matrix.size());
    os << "  after \\ task";
    for (const auto& n : names) os << "  " << std::setw(12) << n;
    os << '\n';
    for (std::size_t t = 0; t < T; ++t) {
      os << "  " << std::setw(12) << (t < names.size() ? names[t] : std::to_string(t + 1));
      for (std::size_t k = 0; k < names.size(); ++k) {
        std::vector<double> cell;
        for (auto* r : runs)
          if (t < r->matrix.size() && k <= t) cell.push_back(r->matrix.at(t, k, metric));
        os << "  " << std::setw(12) << (cell.empty() ? std::string("-") : format_fixed(summarize(cell).mean));
      }
      os << '\n';
    }
    std::vector<double> forget;
    for (auto* r : runs)
      if (auto f = forgetting_if_defined(r->matrix, metric)) forget.push_back(*f);
    auto fs = summarize(forget);
    os << "  forgetting: ";
    if (fs.n) {
      os << format_fixed(fs.mean) << " +- " << format_fixed(fs.std) << " (n=" << fs.n << ")";
    } else {
      os << "absent";
    }
    os << '\n';
    for (auto* r : runs)
      if (r->status != "ok") os << "  seed " << r->seed << ": run failed (partial matrix)\n";
  }
  if (res.methods.size() > 1) {
    os << "== forgetting by method (" << metric_name(metric) << ", mean +- std over seeds)\n";
    for (const auto& method : res.methods) {
      std::vector<double> forget;
      for (const auto& r : res.runs)
        if (r.method == method)
          if (auto f = forgetting_if_defined(r.matrix, metric)) forget.push_back(*f);
      auto fs = summarize(forget);
      os << "  " << std::setw(18) << std::left << method << std::right << "  "
         << (fs.n ? format_fixed(fs.mean) + " +- " + format_fixed(fs.std) : std::string("absent")) << '\n';
    }
  }
}

// Line plot of end-task k's metric after each training stage t >= k,
// averaged over seeds, one polyline per task.
inline std::string svg_plot(const LoadedResults& res, const std::string& method, Metric metric) {
  std::vector<const LoadedRun*> runs;
  for (const auto& r : res.runs)
    if (r.method == method) runs.push_back(&r);
  if (runs.empty()) throw Error("svg_plot: no runs for method " + method);
  const auto& names = runs.front()->domains;
  const std::size_t T = names.size();
  const double W = 480, H = 320, L = 50, R = 130, Tp = 30, B = 40;
  auto x_of = [&](std::size_t t) { return L + (T > 1 ? (W - L - R) * static_cast<double>(t) / static_cast<double>(T - 1) : 0.0); };
  auto y_of = [&](double v) { return Tp + (H - Tp - B) * (1.0 - v); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  s << "<text x=\"" << L << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">" << method << ": end-task "
    << metric_name(metric) << " after each domain</text>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << y_of(0) << "\" x2=\"" << W - R << "\" y2=\"" << y_of(0)
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << y_of(0) << "\" x2=\"" << L << "\" y2=\"" << y_of(1) << "\" stroke=\"black\"/>\n";
  for (double v : {0.0, 0.5, 1.0})
    s << "<text x=\"" << L - 30 << "\" y=\"" << y_of(v) + 4 << "\" font-family=\"sans-serif\" font-size=\"11\">"
      << format_fixed(v, 1) << "</text>\n";
  for (std::size_t t = 0; t < T; ++t)
    s << "<text x=\"" << x_of(t) - 10 << "\" y=\"" << H - B + 18 << "\" font-family=\"sans-serif\" font-size=\"11\">"
      << t + 1 << "</text>\n";
  for (std::size_t k = 0; k < T; ++k) {
    std::ostringstream pts;
    pts << std::fixed << std::setprecision(2);
    for (std::size_t t = k; t < T; ++t) {
      std::vector<double> cell;
      for (auto* r : runs)
        if (t < r->matrix.size()) cell.push_back(r->matrix.at(t, k, metric));
      if (cell.empty()) break;
      pts << x_of(t) << ',' << y_of(summarize(cell).mean) << ' ';
    }
    const char* c = colors[k % 6];
    s << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\" points=\"" << pts.str() << "\"/>\n";
    s << "<text x=\"" << W - R + 10 << "\" y=\"" << Tp + 16 * static_cast<double>(k + 1) << "\" fill=\"" << c
      << "\" font-family=\"sans-serif\" font-size=\"11\">" << names[k] << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace das
