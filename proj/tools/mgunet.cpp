// mgunet: phantom generation, training, evaluation, prediction and
// gradient checks for the two-stage segmentation model.

#include <cstring>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "mgunet/commands.hpp"

namespace {

// The config file supplies defaults, so it is read before the flags are
// parsed and any flag given on the command line wins.
std::string find_config(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--config") == 0 && i + 1 < argc) return argv[i + 1];
    if (std::strncmp(argv[i], "--config=", 9) == 0) return argv[i] + 9;
  }
  return {};
}

}  // namespace

int main(int argc, char** argv) {
  mgu::RunConfig cfg;
  std::string config_file;
  try {
    config_file = find_config(argc, argv);
    if (!config_file.empty()) mgu::apply_config_file(cfg, config_file);
  } catch (const mgu::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  }

  CLI::App app{"MGU-Net two-stage retinal layer and optic disc segmentation"};
  app.require_subcommand(1);
  app.add_option("--config", config_file, "key=value file of defaults; flags override it");

  std::uint64_t seed = cfg.seed.value_or(0);
  std::string data = cfg.data.string(), out = cfg.out.string(), spec = cfg.spec.string();
  std::string checkpoint = cfg.checkpoint.string(), image = cfg.image.string();
  bool no_grb = !cfg.grb, no_msp = !cfg.msp, no_augment = !cfg.augment;

  auto* gen = app.add_subcommand("gen-phantom", "generate a labelled phantom dataset");
  auto* train = app.add_subcommand("train", "train a model");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  auto* predict = app.add_subcommand("predict", "segment one image");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");

  for (auto* sub : {gen, train, eval, predict, grad}) {
    sub->add_option("--config", config_file, "key=value file of defaults; flags override it");
  }
  std::vector<CLI::Option*> seed_opts;
  for (auto* sub : {gen, train, eval, grad}) {
    seed_opts.push_back(sub->add_option("--seed", seed, "random seed"));
  }
  for (auto* sub : {gen, train, eval, predict}) sub->add_option("--out", out, "output directory");
  for (auto* sub : {train, eval}) sub->add_option("--data", data, "dataset root");
  for (auto* sub : {train, eval, predict}) {
    sub->add_option("--checkpoint", checkpoint,
                    sub == train ? "last.ckpt to resume from" : "model checkpoint");
  }

  gen->add_option("--spec", spec, "phantom spec file (key=value)");
  gen->add_option("-n,--n", cfg.count, "number of scans")->capture_default_str();

  train->add_option("--epochs", cfg.epochs)->capture_default_str();
  train->add_option("--lr", cfg.lr, "initial learning rate")->capture_default_str();
  train->add_option("--lambda", cfg.lambda, "weight of the fused-output loss")->capture_default_str();
  train->add_option("--ablation", cfg.ablation)
      ->check(CLI::IsMember({"one-stage", "two-stage"}))
      ->capture_default_str();
  train->add_flag("--no-grb", no_grb, "disable graph reasoning blocks");
  train->add_flag("--no-msp", no_msp, "disable multi-scale pooling branches");
  train->add_flag("--no-augment", no_augment, "train without augmentation");
  train->add_option("--base", cfg.base, "channel width of the first stage")->capture_default_str();
  train->add_option("--max-train", cfg.max_train, "use at most this many training scans");
  train->add_option("--max-val", cfg.max_val, "use at most this many validation scans");

  eval->add_option("--split", cfg.split)
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();
  predict->add_option("--image", image, "PNG image (8/16-bit gray or RGB)");

  grad->add_option("--scope", cfg.scope)->check(CLI::IsMember({"op", "block", "model"}))->capture_default_str();
  grad->add_option("--tol", cfg.tol, "relative error tolerance (default per scope)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  for (auto* o : seed_opts) {
    if (o->count() > 0) cfg.seed = seed;
  }
  cfg.data = data;
  cfg.out = out;
  cfg.spec = spec;
  cfg.checkpoint = checkpoint;
  cfg.image = image;
  cfg.grb = !no_grb;
  cfg.msp = !no_msp;
  cfg.augment = !no_augment;
  for (auto* sub : app.get_subcommands()) cfg.command = sub->get_name();

  try {
    return mgu::run_command(cfg, std::cout);
  } catch (const mgu::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
