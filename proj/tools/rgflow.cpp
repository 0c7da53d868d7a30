#include <iostream>

#include "CLI11.hpp"
#include "rgflow/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical normalizing-flow RG model for sequences"};
  app.require_subcommand(1);
  rgflow::CommandOptions opt;
  std::uint64_t seed = 0;
  std::size_t count = 0;

  auto add_common = [&](CLI::App* sub, bool needs_data) {
    sub->add_option("--config", opt.config, "JSON run config");
    sub->add_option("--checkpoint", opt.checkpoint, "checkpoint file");
    if (needs_data) sub->add_option("--data", opt.data, "sequence file");
    sub->add_option("--out", opt.out, "output directory");
    sub->add_option("--seed", seed, "master seed");
  };

  auto* train = app.add_subcommand("train", "fit a model and write checkpoints");
  add_common(train, true);
  train->add_option("--embedding", opt.embedding, "TSV embedding table");

  auto* sample = app.add_subcommand("sample", "generate fields and decoded sequences");
  add_common(sample, false);
  sample->add_option("--count", count, "number of samples");

  auto* loglik = app.add_subcommand("loglik", "per-sequence action and normalized log prob");
  add_common(loglik, true);
  loglik->add_flag("--no-noise", opt.no_noise, "disable dequantization noise");

  auto* encode = app.add_subcommand("encode", "export bulk latents");
  add_common(encode, true);
  encode->add_flag("--no-noise", opt.no_noise, "disable dequantization noise");

  auto* score = app.add_subcommand("score-mutations", "rank single-site escape mutations");
  add_common(score, true);
  score->add_option("--labels", opt.labels, "escape label CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : rgflow::kExitConfig;
  }

  CLI::App* chosen = app.get_subcommands().front();
  if (chosen->count("--seed")) opt.seed = seed;
  if (chosen == sample && sample->count("--count")) opt.count = count;
  return rgflow::run_command(chosen->get_name(), opt, std::cerr);
}
