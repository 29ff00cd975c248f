#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "tido/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Task-incremental learning with foresight prototypes"};
  std::string config, out, mode, axis;
  std::uint64_t seed = 0;
  auto* o_config = app.add_option("--config", config, "JSON config document");
  auto* o_seed = app.add_option("--seed", seed, "run seed");
  auto* o_out = app.add_option("--out", out, "output root");
  auto* o_mode = app.add_option("--mode", mode, "foresight|increment|stream|sweep");
  auto* o_axis = app.add_option("--sweep-axis", axis, "k_sigma|ratio|one_shot_ratio|separability");
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "tido: config error: " << e.what() << "\n";
    return tido::cli::kConfigError;
  }

  tido::cli::Flags flags;
  if (*o_config) flags.config_path = config;
  if (*o_seed) flags.seed = seed;
  if (*o_out) flags.out = out;
  if (*o_mode) flags.mode = mode;
  if (*o_axis) flags.sweep_axis = axis;
  const auto r = tido::cli::run(flags);
  if (r.exit_code == tido::cli::kOk || r.exit_code == tido::cli::kPartialSweep) {
    std::cout << r.run_dir.string() << "\n";
  }
  return r.exit_code;
}
