#include <filesystem>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "fud/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"fud: feature-level unlearning experiment driver"};
  app.require_subcommand(1);

  struct Args {
    std::string config;
    std::string out = "out";
    std::optional<std::uint64_t> seed;
  };
  std::vector<std::pair<CLI::App*, std::shared_ptr<Args>>> subs;
  for (const std::string& name : fud::command_names()) {
    auto args = std::make_shared<Args>();
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", args->config, "experiment config (JSON)")
        ->required();
    sub->add_option("--out", args->out, "output directory");
    sub->add_option("--seed", args->seed,
                    "override every seed field in the config");
    subs.emplace_back(sub, args);
  }

  CLI11_PARSE(app, argc, argv);

  for (const auto& [sub, args] : subs) {
    if (sub->parsed()) {
      return fud::run_cli(sub->get_name(), args->config,
                          std::filesystem::path(args->out), args->seed);
    }
  }
  return 1;
}
