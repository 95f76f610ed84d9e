#pragma once

// Declarative run configuration: JSON parsing with strict key checking,
// hyperparameter presets and the resolved echo written into reports.

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "das/corpus.hpp"
#include "das/model.hpp"
#include "das/trainer.hpp"

namespace das {

class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> violations)
      : Error(join(violations)), violations_(std::move(violations)) {}

  const std::vector<std::string>& violations() const { return violations_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string out = "invalid config:";
    for (const auto& s : v) out += "\n  - " + s;
    return out;
  }
  std::vector<std::string> violations_;
};

enum class Method { das, ncl, wo_contrast, wo_softmask, wo_init, random_importance };

inline const std::vector<Method>& all_methods() {
  static const std::vector<Method> m{Method::das,         Method::ncl,     Method::wo_contrast,
                                     Method::wo_softmask, Method::wo_init, Method::random_importance};
  return m;
}

inline const char* method_name(Method m) {
  switch (m) {
    case Method::das: return "das";
    case Method::ncl: return "ncl";
    case Method::wo_contrast: return "wo-contrast";
    case Method::wo_softmask: return "wo-softmask";
    case Method::wo_init: return "wo-init";
    case Method::random_importance: return "random-importance";
  }
  return "?";
}

inline std::optional<Method> parse_method(const std::string& s) {
  for (auto m : all_methods())
    if (s == method_name(m)) return m;
  return std::nullopt;
}

// Synthetic corpus parameters of one domain; seeds are combined with the
// run seed, so every seed sees a fresh draw of the same construction.
struct SyntheticSource {
  double general_fraction = 0.1;
  double stickiness = 0.95;
  std::size_t n_classes = 2;
  std::size_t lag = 1;
  bool walks_general = false;  // domain chains also visit the general slice
  std::size_t tokens = 50'000;
  std::uint64_t structure_seed = 0;
  std::uint64_t seed = 0;

  bool operator==(const SyntheticSource&) const = default;
};

struct DomainSpec {
  std::string name;
  std::string corpus_file;  // empty: synthetic
  SyntheticSource synthetic;
  TaskSpec task;
  std::string task_train_file;  // "label<TAB>tokens" lines; empty: synthetic task
  std::string task_test_file;

  bool synthetic_corpus() const { return corpus_file.empty(); }
  bool synthetic_task() const { return task_train_file.empty(); }
  bool operator==(const DomainSpec&) const = default;
};

struct RunConfig {
  std::string preset = "desk-scale";
  ModelConfig model;  // vocab_size is derived from the domains
  TrainConfig train;
  FineTuneConfig fine_tune;
  SyntheticVocabSpec vocabulary{50, 24, 3};
  std::size_t seq_len = 32;
  bool persist_optimizer = true;
  bool save_checkpoints = true;
  std::vector<DomainSpec> domains;
  std::vector<Method> methods{Method::das, Method::ncl};
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir;

  bool operator==(const RunConfig&) const = default;
};

inline std::vector<DomainSpec> default_domains(std::size_t n) {
  std::vector<DomainSpec> out;
  for (std::size_t t = 0; t < n; ++t) {
    DomainSpec d;
    d.name = "domain" + std::to_string(t + 1);
    d.synthetic.lag = 1 + t;
    d.synthetic.structure_seed = 101 + t;
    d.synthetic.seed = 201 + t;
    d.task.seed = 301 + t;
    out.push_back(d);
  }
  return out;
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> p{"desk-scale", "paper-scale"};
  return p;
}

// Defaults of a named preset; nullopt for unknown names.
inline std::optional<RunConfig> preset_config(const std::string& name) {
  RunConfig c;
  c.preset = name;
  c.model.max_seq_len = c.seq_len;
  c.domains = default_domains(3);
  if (name == "desk-scale") {
    c.train = desk_scale_train_config();
  } else if (name == "paper-scale") {
    c.train = paper_scale_train_config();
  } else {
    return std::nullopt;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

using nlohmann::json;

class ConfigReader {
 public:
  std::vector<std::string> errors;

  // Reports every key of `j` outside `allowed`; false if `j` is not an object.
  bool object(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) {
      errors.push_back((path.empty() ? std::string("config") : path) + " must be an object");
      return false;
    }
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto& [key, _] : j.items())
      if (!ok.count(key)) errors.push_back("unknown key '" + join(path, key) + "'");
    return true;
  }

  bool has(const json& j, const char* key) const { return j.is_object() && j.contains(key); }

  void number(const json& j, const std::string& path, const char* key, double& out) {
    if (!has(j, key)) return;
    if (!j[key].is_number()) return type_error(path, key, "a number");
    out = j[key].get<double>();
  }

  static bool non_negative_integer(const json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  }

  template <class Int>
  void integer(const json& j, const std::string& path, const char* key, Int& out) {
    if (!has(j, key)) return;
    if (!non_negative_integer(j[key])) return type_error(path, key, "a non-negative integer");
    out = static_cast<Int>(j[key].get<std::uint64_t>());
  }

  void flag(const json& j, const std::string& path, const char* key, bool& out) {
    if (!has(j, key)) return;
    if (!j[key].is_boolean()) return type_error(path, key, "true or false");
    out = j[key].get<bool>();
  }

  void text(const json& j, const std::string& path, const char* key, std::string& out) {
    if (!has(j, key)) return;
    if (!j[key].is_string()) return type_error(path, key, "a string");
    out = j[key].get<std::string>();
  }

  void require(const json& j, const std::string& path, const char* key, const std::string& why = "") {
    if (!has(j, key)) errors.push_back(join(path, key) + " is required" + (why.empty() ? "" : " " + why));
  }

  static std::string join(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
  }

 private:
  void type_error(const std::string& path, const char* key, const char* what) {
    errors.push_back(join(path, key) + " must be " + what);
  }
};

inline void read_model(ConfigReader& r, const json& j, ModelConfig& m) {
  if (!r.object(j, "model", {"n_layers", "n_heads", "d_model", "d_ff", "max_seq_len", "dropout_p"})) return;
  r.integer(j, "model", "n_layers", m.n_layers);
  r.integer(j, "model", "n_heads", m.n_heads);
  r.integer(j, "model", "d_model", m.d_model);
  r.integer(j, "model", "d_ff", m.d_ff);
  r.integer(j, "model", "max_seq_len", m.max_seq_len);
  r.number(j, "model", "dropout_p", m.dropout_p);
}

inline void read_train(ConfigReader& r, const json& j, TrainConfig& t, bool from_preset) {
  if (!r.object(j, "train",
                {"lambda", "tau", "lr", "batch_size", "steps", "mask_prob", "importance_tokens", "optimizer"})) {
    return;
  }
  if (!from_preset) {
    // Without a preset there are no defaults for the core hyperparameters.
    for (const char* key : {"lambda", "lr", "batch_size", "steps"}) r.require(j, "train", key, "when no preset is set");
  }
  r.number(j, "train", "lambda", t.lambda);
  r.number(j, "train", "tau", t.tau);
  r.number(j, "train", "lr", t.lr);
  r.integer(j, "train", "batch_size", t.batch_size);
  r.integer(j, "train", "steps", t.steps);
  r.number(j, "train", "mask_prob", t.mask_prob);
  r.integer(j, "train", "importance_tokens", t.importance_tokens);
  if (!from_preset && t.lambda > 0.0) r.require(j, "train", "tau", "when train.lambda > 0");
  if (r.has(j, "optimizer")) {
    const json& o = j["optimizer"];
    if (r.object(o, "train.optimizer", {"kind", "beta1", "beta2", "eps"})) {
      std::string kind = t.optimizer.kind == OptimizerConfig::Kind::adam ? "adam" : "sgd";
      r.text(o, "train.optimizer", "kind", kind);
      if (kind == "adam") {
        t.optimizer.kind = OptimizerConfig::Kind::adam;
      } else if (kind == "sgd") {
        t.optimizer.kind = OptimizerConfig::Kind::sgd;
      } else {
        r.errors.push_back("train.optimizer.kind must be \"adam\" or \"sgd\"");
      }
      r.number(o, "train.optimizer", "beta1", t.optimizer.beta1);
      r.number(o, "train.optimizer", "beta2", t.optimizer.beta2);
      r.number(o, "train.optimizer", "eps", t.optimizer.eps);
    }
  }
}

inline void read_fine_tune(ConfigReader& r, const json& j, FineTuneConfig& f) {
  if (!r.object(j, "fine_tune", {"epochs", "lr", "batch_size", "train_encoder"})) return;
  r.integer(j, "fine_tune", "epochs", f.epochs);
  r.number(j, "fine_tune", "lr", f.lr);
  r.integer(j, "fine_tune", "batch_size", f.batch_size);
  r.flag(j, "fine_tune", "train_encoder", f.train_encoder);
}

inline void read_domain(ConfigReader& r, const json& j, const std::string& path, DomainSpec& d) {
  if (!r.object(j, path, {"name", "corpus", "task"})) return;
  r.require(j, path, "name");
  r.text(j, path, "name", d.name);
  if (r.has(j, "corpus")) {
    const json& c = j["corpus"];
    const std::string cp = path + ".corpus";
    if (r.object(c, cp, {"file", "tokens", "general_fraction", "stickiness", "n_classes", "lag", "walks_general",
                      "structure_seed", "seed"})) {
      r.text(c, cp, "file", d.corpus_file);
      r.integer(c, cp, "tokens", d.synthetic.tokens);
      r.number(c, cp, "general_fraction", d.synthetic.general_fraction);
      r.number(c, cp, "stickiness", d.synthetic.stickiness);
      r.integer(c, cp, "n_classes", d.synthetic.n_classes);
      r.integer(c, cp, "lag", d.synthetic.lag);
      r.flag(c, cp, "walks_general", d.synthetic.walks_general);
      r.integer(c, cp, "structure_seed", d.synthetic.structure_seed);
      r.integer(c, cp, "seed", d.synthetic.seed);
    }
  }
  if (r.has(j, "task")) {
    const json& t = j["task"];
    const std::string tp = path + ".task";
    if (r.object(t, tp, {"n_classes", "train_size", "test_size", "seed", "train_file", "test_file"})) {
      r.integer(t, tp, "n_classes", d.task.n_classes);
      r.integer(t, tp, "train_size", d.task.train_size);
      r.integer(t, tp, "test_size", d.task.test_size);
      r.integer(t, tp, "seed", d.task.seed);
      r.text(t, tp, "train_file", d.task_train_file);
      r.text(t, tp, "test_file", d.task_test_file);
      if (d.task_train_file.empty() != d.task_test_file.empty()) {
        r.errors.push_back(tp + ".train_file and " + tp + ".test_file must be given together");
      }
    }
  }
}

inline std::vector<std::string> semantic_violations(const RunConfig& c) {
  std::vector<std::string> out;
  for (auto& v : c.train.violations()) out.push_back(v);
  ModelConfig probe = c.model;
  probe.vocab_size = Vocabulary::n_special + 1;  // derived later; any valid value
  for (auto& v : probe.violations()) out.push_back(v);
  if (c.seq_len < 1) out.emplace_back("seq_len must be >= 1");
  if (c.model.max_seq_len < c.seq_len) out.emplace_back("model.max_seq_len must be >= seq_len");
  if (c.fine_tune.epochs < 1) out.emplace_back("fine_tune.epochs must be >= 1");
  if (!(c.fine_tune.lr > 0.0)) out.emplace_back("fine_tune.lr must be > 0");
  if (c.fine_tune.batch_size < 1) out.emplace_back("fine_tune.batch_size must be >= 1");
  if (c.domains.empty()) out.emplace_back("domains must list at least one domain");
  if (c.methods.empty()) out.emplace_back("methods must list at least one method");
  if (c.seeds.empty()) out.emplace_back("seeds must list at least one seed");
  std::set<std::uint64_t> seen_seeds;
  for (auto s : c.seeds)
    if (!seen_seeds.insert(s).second) out.push_back("seeds: duplicate seed " + std::to_string(s));
  std::size_t synthetic = 0;
  std::set<std::string> names;
  for (std::size_t i = 0; i < c.domains.size(); ++i) {
    const auto& d = c.domains[i];
    const std::string p = "domains[" + std::to_string(i) + "]";
    if (d.name.empty()) out.push_back(p + ".name must be non-empty");
    if (!names.insert(d.name).second) out.push_back(p + ".name '" + d.name + "' is not unique");
    if (d.synthetic_corpus()) {
      ++synthetic;
      const auto& s = d.synthetic;
      if (s.tokens < 1) out.push_back(p + ".corpus.tokens must be >= 1");
      if (!(s.general_fraction >= 0.0 && s.general_fraction <= 1.0)) {
        out.push_back(p + ".corpus.general_fraction must be in [0,1]");
      }
      if (!(s.stickiness >= 0.0 && s.stickiness <= 1.0)) out.push_back(p + ".corpus.stickiness must be in [0,1]");
      if (s.n_classes < 1) out.push_back(p + ".corpus.n_classes must be >= 1");
      if (s.lag < 1) out.push_back(p + ".corpus.lag must be >= 1");
      if (d.synthetic_task() && d.task.n_classes > s.n_classes) {
        out.push_back(p + ".task.n_classes exceeds the corpus's latent classes");
      }
    } else if (d.synthetic_task()) {
      out.push_back(p + ".task needs train_file/test_file when the corpus comes from a file");
    }
    if (d.task.n_classes < 1) out.push_back(p + ".task.n_classes must be >= 1");
    if (d.synthetic_task() && (d.task.train_size < 1 || d.task.test_size < 1)) {
      out.push_back(p + ".task.train_size and test_size must be >= 1");
    }
  }
  if (synthetic > 0 && c.vocabulary.domain_tokens < 1 && c.vocabulary.general_tokens < 1) {
    out.emplace_back("vocabulary must have general or domain tokens");
  }
  return out;
}

}  // namespace detail

// Parses and validates; throws ConfigError listing every violation.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  detail::ConfigReader r;
  if (!r.object(j, "", {"preset", "model", "train", "fine_tune", "vocabulary", "seq_len", "persist_optimizer",
                              "save_checkpoints", "domains", "methods", "seeds", "output_dir"})) {
    throw ConfigError(r.errors);
  }
  std::string preset;
  r.text(j, "", "preset", preset);
  RunConfig c;
  bool from_preset = false;
  if (!preset.empty()) {
    if (auto p = preset_config(preset)) {
      c = *p;
      from_preset = true;
    } else {
      r.errors.push_back("preset '" + preset + "' is unknown (expected desk-scale or paper-scale)");
    }
  } else {
    c.preset = "";
    c.domains = default_domains(3);
  }
  r.integer(j, "", "seq_len", c.seq_len);
  if (!r.has(j, "model") || !r.has(j["model"], "max_seq_len")) c.model.max_seq_len = c.seq_len;
  if (r.has(j, "model")) detail::read_model(r, j["model"], c.model);
  if (r.has(j, "train")) {
    detail::read_train(r, j["train"], c.train, from_preset);
  } else if (!from_preset) {
    r.errors.emplace_back("train is required when no preset is set");
  }
  if (r.has(j, "fine_tune")) detail::read_fine_tune(r, j["fine_tune"], c.fine_tune);
  if (r.has(j, "vocabulary")) {
    const auto& v = j["vocabulary"];
    if (r.object(v, "vocabulary", {"general_tokens", "domain_tokens"})) {
      r.integer(v, "vocabulary", "general_tokens", c.vocabulary.general_tokens);
      r.integer(v, "vocabulary", "domain_tokens", c.vocabulary.domain_tokens);
    }
  }
  r.flag(j, "", "persist_optimizer", c.persist_optimizer);
  r.flag(j, "", "save_checkpoints", c.save_checkpoints);
  r.text(j, "", "output_dir", c.output_dir);
  if (r.has(j, "domains")) {
    if (!j["domains"].is_array()) {
      r.errors.emplace_back("domains must be an array");
    } else {
      c.domains.clear();
      for (std::size_t i = 0; i < j["domains"].size(); ++i) {
        DomainSpec d;
        d.task.seed = 301 + i;
        d.synthetic.lag = 1 + i;
        d.synthetic.structure_seed = 101 + i;
        d.synthetic.seed = 201 + i;
        detail::read_domain(r, j["domains"][i], "domains[" + std::to_string(i) + "]", d);
        c.domains.push_back(d);
      }
    }
  }
  if (r.has(j, "methods")) {
    if (!j["methods"].is_array()) {
      r.errors.emplace_back("methods must be an array of method names");
    } else {
      c.methods.clear();
      for (const auto& m : j["methods"]) {
        auto parsed = m.is_string() ? parse_method(m.get<std::string>()) : std::nullopt;
        if (!parsed) {
          r.errors.push_back("methods: unknown method " + m.dump());
        } else {
          c.methods.push_back(*parsed);
        }
      }
    }
  }
  if (r.has(j, "seeds")) {
    if (!j["seeds"].is_array()) {
      r.errors.emplace_back("seeds must be an array of non-negative integers");
    } else {
      c.seeds.clear();
      for (const auto& s : j["seeds"]) {
        if (!detail::ConfigReader::non_negative_integer(s)) {
          r.errors.push_back("seeds: " + s.dump() + " is not a non-negative integer");
        } else {
          c.seeds.push_back(s.get<std::uint64_t>());
        }
      }
    }
  }
  for (auto& v : detail::semantic_violations(c)) r.errors.push_back(v);
  if (!r.errors.empty()) throw ConfigError(r.errors);
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot read config file " + path});
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError({"config file " + path + " is not valid JSON: " + e.what()});
  }
  return parse_run_config(j);
}

// The fully resolved configuration; parse_run_config(run_config_json(c)) == c.
inline nlohmann::json run_config_json(const RunConfig& c) {
  nlohmann::json m = c.model;
  m.erase("vocab_size");
  nlohmann::json domains = nlohmann::json::array();
  for (const auto& d : c.domains) {
    nlohmann::json corpus;
    if (d.synthetic_corpus()) {
      corpus = {{"tokens", d.synthetic.tokens},
                {"general_fraction", d.synthetic.general_fraction},
                {"stickiness", d.synthetic.stickiness},
                {"n_classes", d.synthetic.n_classes},
                {"lag", d.synthetic.lag},
                {"walks_general", d.synthetic.walks_general},
                {"structure_seed", d.synthetic.structure_seed},
                {"seed", d.synthetic.seed}};
    } else {
      corpus = {{"file", d.corpus_file}};
    }
    nlohmann::json task = {{"n_classes", d.task.n_classes},
                           {"train_size", d.task.train_size},
                           {"test_size", d.task.test_size},
                           {"seed", d.task.seed}};
    if (!d.synthetic_task()) {
      task["train_file"] = d.task_train_file;
      task["test_file"] = d.task_test_file;
    }
    domains.push_back({{"name", d.name}, {"corpus", corpus}, {"task", task}});
  }
  nlohmann::json methods = nlohmann::json::array();
  for (auto x : c.methods) methods.push_back(method_name(x));
  nlohmann::json out = {
      {"model", m},
      {"train",
       {{"lambda", c.train.lambda},
        {"tau", c.train.tau},
        {"lr", c.train.lr},
        {"batch_size", c.train.batch_size},
        {"steps", c.train.steps},
        {"mask_prob", c.train.mask_prob},
        {"importance_tokens", c.train.importance_tokens},
        {"optimizer",
         {{"kind", c.train.optimizer.kind == OptimizerConfig::Kind::adam ? "adam" : "sgd"},
          {"beta1", c.train.optimizer.beta1},
          {"beta2", c.train.optimizer.beta2},
          {"eps", c.train.optimizer.eps}}}}},
      {"fine_tune",
       {{"epochs", c.fine_tune.epochs},
        {"lr", c.fine_tune.lr},
        {"batch_size", c.fine_tune.batch_size},
        {"train_encoder", c.fine_tune.train_encoder}}},
      {"vocabulary", {{"general_tokens", c.vocabulary.general_tokens}, {"domain_tokens", c.vocabulary.domain_tokens}}},
      {"seq_len", c.seq_len},
      {"persist_optimizer", c.persist_optimizer},
      {"save_checkpoints", c.save_checkpoints},
      {"domains", domains},
      {"methods", methods},
      {"seeds", c.seeds},
      {"output_dir", c.output_dir}};
  if (!c.preset.empty()) out["preset"] = c.preset;
  return out;
}

}  // namespace das
