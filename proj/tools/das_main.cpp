// das: run continual DAP-training experiments, score unit importance and
// summarize results.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "das/commands.hpp"
#include "das/log.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Soft-masked continual domain-adaptive pre-training"};
  app.require_subcommand(1);
  bool verbose = false, quiet = false;
  app.add_flag("-v,--verbose", verbose, "Progress messages on stderr");
  app.add_flag("-q,--quiet", quiet, "Suppress warnings");

  auto* run = app.add_subcommand("run", "Train every method and seed of a config and write the report");
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string method;
  std::string out;
  run->add_option("--config", config, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", seeds, "Seed(s) replacing the config's seed list");
  std::vector<std::string> method_names;
  for (auto m : das::all_methods()) method_names.push_back(das::method_name(m));
  run->add_option("--method", method, "Run only this method")->check(CLI::IsMember(method_names));
  run->add_option("--out", out, std::string("Output directory (default: config output_dir, then $") +
                                    das::output_root_env + "/<config name>, then runs/<config name>)");

  auto* imp = app.add_subcommand("importance", "Score unit importance of a checkpoint on a corpus");
  das::ImportanceArgs ia;
  std::string loss = "proxy_kl";
  imp->add_option("--checkpoint", ia.checkpoint, "Model checkpoint (JSON)")->required()->check(CLI::ExistingFile);
  imp->add_option("--corpus", ia.corpus, "Whitespace-token text corpus")->required()->check(CLI::ExistingFile);
  imp->add_option("--loss", loss, "proxy_kl or mlm")->check(CLI::IsMember({"proxy_kl", "mlm"}));
  imp->add_option("--config", ia.config, "Run config whose model shape the checkpoint must match");
  imp->add_option("--seed", ia.seed, "Subset and dropout seed");
  imp->add_option("--tokens", ia.tokens, "Tokens in the importance subset")->check(CLI::PositiveNumber);
  imp->add_option("--top-k", ia.top_k, "Units listed per layer");
  imp->add_option("--label", ia.label, "Contributor label stored in the snapshot");
  imp->add_option("--out", ia.out, "Snapshot path (default: importance.json next to the checkpoint)");

  auto* rep = app.add_subcommand("report", "Print the accuracy matrix and forgetting rates of a run");
  das::ReportArgs ra;
  std::string metric = "accuracy";
  rep->add_option("dir", ra.dir, "Run output directory")->required();
  rep->add_option("--metric", metric, "accuracy or macro_f1")->check(CLI::IsMember({"accuracy", "macro_f1"}));
  rep->add_option("--plots", ra.plots, "Directory for SVG plots");

  CLI11_PARSE(app, argc, argv);
  if (quiet) das::logging::set_level(das::logging::Level::quiet);
  if (verbose) das::logging::set_level(das::logging::Level::info);

  if (*run) {
    das::RunOverrides o;
    o.seeds = seeds;
    if (!method.empty()) o.method = das::parse_method(method);
    o.out = out;
    return das::cmd_run(config, o, std::cout, std::cerr);
  }
  if (*imp) {
    ia.loss = das::parse_importance_loss(loss);
    return das::cmd_importance(ia, std::cout, std::cerr);
  }
  ra.metric = metric == "macro_f1" ? das::Metric::macro_f1 : das::Metric::accuracy;
  return das::cmd_report(ra, std::cout, std::cerr);
}
