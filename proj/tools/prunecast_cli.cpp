#include <iostream>

#include "CLI11.hpp"
#include "prunecast/app.hpp"
#include "prunecast/errors.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Structured pruning for transformer forecasters"};
  app.set_version_flag("--version", std::string("prunecast ") + prunecast::kVersion);
  app.require_subcommand(1);

  prunecast::CommandOptions opts;
  std::uint64_t seed = 0;
  std::string out, checkpoint;
  for (const auto& name : prunecast::command_names()) {
    CLI::App* sub = app.add_subcommand(name, "run the " + name + " step");
    sub->add_option("--config", opts.config_path, "run config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "override model, training and pruning seeds");
    sub->add_option("--out", out, "override out_dir");
    auto* ck = sub->add_option("--checkpoint", checkpoint, "input checkpoint");
    if (name != "pretrain") ck->required();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // --help and --version land here too, with a zero code
    return app.exit(e) == 0 ? 0 : 2;
  }
  CLI::App* sub = app.get_subcommands().front();
  if (sub->count("--seed")) opts.seed = seed;
  if (sub->count("--out")) opts.out_dir = out;
  if (sub->count("--checkpoint")) opts.checkpoint = checkpoint;

  try {
    return prunecast::run_command(sub->get_name(), opts, std::cout);
  } catch (const prunecast::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const prunecast::DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
