// Pipeline driver. Subcommands map 1:1 onto pipeline stages; `run-all`
// executes the full stage order. Exit codes: 0 success, 2 config error,
// 3 missing upstream artifact, 4 numerical failure.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "expandr/numerics.hpp"
#include "expandr/pipeline.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitUpstream = 3;
constexpr int kExitNumerical = 4;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"expandr: query-expansion dense retrieval pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed_override;
  std::optional<std::string> stage_dir;

  app.add_option("--config", config_path, "pipeline config JSON")
      ->required()
      ->check(CLI::ExistingFile);
  app.add_option("--seed", seed_override, "override the config seed");
  app.add_option("--stage-dir", stage_dir, "override the config workdir");

  const std::vector<std::string> stages = {
      "ingest",      "encode",     "expand",          "answer",
      "reward",      "build-pairs", "train-dpo",      "regenerate",
      "train-retriever", "evaluate", "report",        "export-dpo-pairs",
      "run-all"};
  std::string selected;
  for (const auto& name : stages) {
    app.add_subcommand(name)->callback([&selected, name] { selected = name; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;  // --help exits 0
  }

  try {
    expandr::pipeline::PipelineConfig config =
        expandr::pipeline::load_config_file(config_path, seed_override, stage_dir);
    expandr::pipeline::PipelineRunner runner(std::move(config));
    if (selected == "run-all") {
      runner.run_all();
    } else {
      runner.run_stage(selected);
    }
    return kExitOk;
  } catch (const expandr::pipeline::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const expandr::pipeline::UpstreamError& e) {
    std::cerr << "missing upstream artifact: " << e.what() << '\n';
    return kExitUpstream;
  } catch (const expandr::numerics::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}
