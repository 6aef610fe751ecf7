// bsnet command-line tool: train, eval, rademacher, visualize, synth.
#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "bsnet/runner.hpp"

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct CommonOptions {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  std::optional<std::size_t> episodes;
  std::string checkpoint;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("-c,--config", o.config_file, "TOML-style config file");
  cmd->add_option("--set", o.sets, "key=value override (repeatable)");
  cmd->add_option("-o,--out", o.out, "output directory (overrides `output`)");
  cmd->add_option("--seed", o.seed, "seed (overrides `seed`)");
}

// File, then --set, then dedicated flags; later sources win.
bsnet::RunConfig resolve(const CommonOptions& o, const std::string& episodes_key) {
  bsnet::ConfigEntries entries;
  if (!o.config_file.empty()) entries = bsnet::parse_config_file(o.config_file);
  for (const auto& s : o.sets) bsnet::apply_override(entries, s);
  if (o.out) bsnet::apply_override(entries, "output=" + *o.out);
  if (o.seed) bsnet::apply_override(entries, "seed=" + std::to_string(*o.seed));
  if (o.jobs) bsnet::apply_override(entries, "jobs=" + std::to_string(*o.jobs));
  if (o.episodes) {
    bsnet::apply_override(entries, episodes_key + "=" + std::to_string(*o.episodes));
  }
  return bsnet::build_config(entries);
}

}  // namespace

int main(int argc, char** argv) {
  bsnet::configure_allocator();
  CLI::App app{"Few-shot metric learning with shared embeddings and multiple similarity heads"};
  app.require_subcommand(1);

  CommonOptions train_o, eval_o, rad_o, vis_o, synth_o;
  std::string resume;

  auto* train = app.add_subcommand("train", "meta-train a model");
  add_common(train, train_o);
  train->add_option("--episodes", train_o.episodes, "training episodes");
  train->add_option("--resume", resume, "continue from a checkpoint");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on test episodes");
  add_common(eval, eval_o);
  eval->add_option("--checkpoint", eval_o.checkpoint, "checkpoint file")->required();
  eval->add_option("--episodes", eval_o.episodes, "test episodes (default 600)");
  eval->add_option("--jobs", eval_o.jobs, "parallel evaluation workers");

  auto* rad = app.add_subcommand("rademacher", "Monte-Carlo Rademacher complexity check");
  add_common(rad, rad_o);

  auto* vis = app.add_subcommand("visualize", "Grad-CAM heatmaps for test queries");
  add_common(vis, vis_o);
  vis->add_option("--checkpoint", vis_o.checkpoint, "checkpoint file")->required();
  vis->add_option("--episodes", vis_o.episodes, "episodes to visualize");

  auto* synth = app.add_subcommand("synth", "write the synthetic dataset as an image directory");
  add_common(synth, synth_o);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      const auto config = resolve(train_o, "train_episodes");
      std::optional<std::filesystem::path> from;
      if (!resume.empty()) from = resume;
      const auto s = bsnet::run_train(config, from, &std::cerr);
      std::cout << "trained " << s.episodes_done << " episodes; checkpoint " << s.checkpoint.string()
                << "\n";
      for (const auto& e : s.events) std::cerr << e << "\n";
    } else if (eval->parsed()) {
      const auto config = resolve(eval_o, "eval_episodes");
      const auto report = bsnet::run_eval(config, eval_o.checkpoint);
      std::cout << bsnet::report_json(report) << "\n";
    } else if (rad->parsed()) {
      const auto config = resolve(rad_o, "");
      const auto s = bsnet::run_rademacher(config);
      std::cout << bsnet::rademacher_json(s) << "\n";
      if (!s.all_hold || s.witnesses_exact != s.witnesses_checked) return kNumeric;
    } else if (vis->parsed()) {
      const auto config = resolve(vis_o, "visualize.episodes");
      const auto files = bsnet::run_visualize(config, vis_o.checkpoint);
      std::cout << "wrote " << files.size() << " heatmaps to "
                << bsnet::output_directory(config).string() << "\n";
    } else if (synth->parsed()) {
      const auto config = resolve(synth_o, "");
      const auto n = bsnet::run_synth(config);
      std::cout << "wrote " << n << " images to " << bsnet::output_directory(config).string()
                << "\n";
    }
  } catch (const bsnet::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kConfig;
  } catch (const bsnet::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kConfig;
  } catch (const bsnet::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const bsnet::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const bsnet::ShapeError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
  return kOk;
}
