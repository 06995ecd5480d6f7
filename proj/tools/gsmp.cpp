// Batch front end: runs experiment configurations and renders emitted CSV
// tables as SVG plots. See README.md for the config schema and the exit-code
// contract.

#include <optional>
#include <string>

#include <CLI11.hpp>

#include "gsmp/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"scenario-tree laboratory for worst-case mean-field control"};
  app.require_subcommand(1);

  std::string config_path;
  int threads = 1;
  std::string out_dir;
  CLI::App* run = app.add_subcommand("run", "run an experiment configuration");
  run->add_option("config", config_path, "TOML experiment configuration")->required();
  run->add_option("--threads", threads, "worker threads for sampled checks")->default_val(1);
  run->add_option("--out", out_dir, "output directory (overrides the config)");

  std::string csv_path, kind, plot_out;
  CLI::App* plot = app.add_subcommand("plot", "render an emitted CSV as SVG");
  plot->add_option("csv", csv_path, "input CSV file")->required();
  plot->add_option("--kind", kind, "convexity | descent | gamma")->required();
  plot->add_option("--out", plot_out, "output SVG path (default: input with .svg)");

  CLI11_PARSE(app, argc, argv);

  if (run->parsed()) {
    std::optional<std::filesystem::path> out;
    if (!out_dir.empty()) out = out_dir;
    return gsmp::cli::run(config_path, threads, out);
  }
  if (plot_out.empty())
    plot_out = std::filesystem::path(csv_path).replace_extension(".svg").string();
  return gsmp::cli::emit_plot_file(csv_path, kind, plot_out);
}
