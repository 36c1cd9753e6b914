#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "cdkt/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Federated learning simulator with cross-device knowledge transfer"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "run one experiment from a config file");
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  run->add_option("config", config_path, "experiment config (flat TOML)")->required();
  run->add_option("--seed", seed, "override the experiment seed");
  run->add_option("--out", out, "output directory (overrides output_dir)");

  auto* compare = app.add_subcommand("compare", "tabulate Global and C-Per medians of finished runs");
  std::vector<std::string> summaries;
  compare->add_option("summaries", summaries, "summary.json files")->required()->expected(2, -1);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      cdkt::ExperimentConfig cfg = cdkt::load_config(config_path);
      if (seed) cfg.federation.seed = *seed;
      if (out) cfg.output_dir = *out;
      const auto result = cdkt::run_to_directory(cfg, cfg.output_dir);
      if (!result.records.empty()) {
        const auto& last = result.records.back();
        std::printf("%s: %zu rounds, final global %.4f c_per %.4f, output in %s\n", cdkt::run_label(cfg).c_str(),
                    result.records.size(), last.global_acc, last.c_per, cfg.output_dir.c_str());
      }
    } else {
      std::vector<nlohmann::json> docs;
      for (const auto& path : summaries) {
        std::ifstream is(path);
        if (!is) throw cdkt::Error("cannot open " + path);
        try {
          docs.push_back(nlohmann::json::parse(is));
        } catch (const nlohmann::json::exception& e) {
          throw cdkt::ConfigError(path + ": " + e.what());
        }
      }
      std::cout << cdkt::compare_summaries(docs);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
