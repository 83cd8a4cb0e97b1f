#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "fesvibs/checkpoint.hpp"
#include "fesvibs/config.hpp"
#include "fesvibs/log.hpp"
#include "fesvibs/runner.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed_override;
  std::optional<std::string> transport;
  std::optional<std::string> out_dir;
  bool emit_plots = false;
};

fesvibs::ExperimentConfig load_effective_config(const CommonArgs& args) {
  auto cfg = fesvibs::load_config_file(args.config_path);
  if (args.seed_override) {
    // One override re-derives every seed stream.
    cfg.seeds.data = fesvibs::derive_seed(*args.seed_override, 1);
    cfg.seeds.init = fesvibs::derive_seed(*args.seed_override, 2);
    cfg.seeds.sampling = fesvibs::derive_seed(*args.seed_override, 3);
    cfg.seeds.noise = fesvibs::derive_seed(*args.seed_override, 4);
  }
  if (args.transport) cfg.transport = fesvibs::parse_transport(*args.transport);
  if (args.out_dir) cfg.out_dir = *args.out_dir;
  if (args.emit_plots) cfg.emit_plots = true;
  return cfg;
}

int cmd_generate_data(const CommonArgs& args, const std::string& out_path,
                      const std::string& split) {
  auto cfg = load_effective_config(args);
  cfg.validate();
  if (cfg.source != fesvibs::DataSource::kSynthetic)
    throw fesvibs::ConfigError("generate-data needs data.source = synthetic");
  const bool test_split = split == "test";
  auto data = fesvibs::generate_synthetic(
      cfg.model.classes,
      test_split ? cfg.test_samples : cfg.train_samples,
      cfg.model.image_channels, cfg.model.image_height, cfg.model.image_width,
      cfg.noise_sigma,
      test_split ? fesvibs::derive_seed(cfg.seeds.data, 0x7E57)
                 : cfg.seeds.data);
  fesvibs::save_container(data, out_path);
  std::cout << "wrote " << out_path << " (" << data.size() << " samples, "
            << data.classes << " classes)\n";
  return kExitOk;
}

int cmd_run(const CommonArgs& args) {
  auto cfg = load_effective_config(args);
  cfg.validate();
  auto result = fesvibs::run_experiment(cfg);
  std::vector<std::string> created;
  try {
    created = fesvibs::write_outputs(result, cfg, cfg.out_dir, cfg.emit_plots);
  } catch (...) {
    for (const auto& p : created) std::filesystem::remove(p);
    throw;
  }
  std::printf("%s: final balanced accuracy %.4f +/- %.4f over %zu clients\n",
              fesvibs::variant_name(cfg.variant).c_str(), result.final_mean,
              result.final_std, result.final_per_client.size());
  for (const auto& p : created) std::printf("  %s\n", p.c_str());
  return kExitOk;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& data_path) {
  auto ckpt = fesvibs::load_checkpoint(ckpt_path);
  auto test_set = fesvibs::load_container(data_path);
  nlohmann::json out;
  std::vector<double> accs;
  for (std::size_t c = 0; c < ckpt.n_clients; ++c) {
    double acc;
    if (fesvibs::variant_is_split(ckpt.variant)) {
      acc = fesvibs::evaluate_split(
          fesvibs::head_from_checkpoint(ckpt, static_cast<int>(c)),
          fesvibs::tail_from_checkpoint(ckpt, static_cast<int>(c)),
          fesvibs::body_from_checkpoint(ckpt),
          fesvibs::projection_from_checkpoint(ckpt), ckpt.variant, ckpt.model,
          test_set);
    } else {
      const std::string prefix = "client" + std::to_string(c) + ".";
      fesvibs::ModelParams params;
      params.head = fesvibs::head_from_checkpoint(ckpt, static_cast<int>(c));
      params.body = fesvibs::body_from_checkpoint(ckpt, prefix);
      params.proj = fesvibs::projection_from_checkpoint(ckpt, prefix);
      params.tail = fesvibs::tail_from_checkpoint(ckpt, static_cast<int>(c));
      acc = fesvibs::evaluate_local(params, ckpt.model, test_set);
    }
    accs.push_back(acc);
  }
  double mean = 0;
  for (double a : accs) mean += a;
  mean /= accs.empty() ? 1.0 : static_cast<double>(accs.size());
  double var = 0;
  for (double a : accs) var += (a - mean) * (a - mean);
  var /= accs.empty() ? 1.0 : static_cast<double>(accs.size());
  out["variant"] = fesvibs::variant_name(ckpt.variant);
  out["per_client"] = accs;
  out["mean"] = mean;
  out["std"] = std::sqrt(var);
  std::cout << out.dump(2) << "\n";
  return kExitOk;
}

int cmd_inspect(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw fesvibs::IoError("cannot open " + path);
  char magic[5] = {};
  f.read(magic, 5);
  f.close();
  if (std::string(magic, 5) == "FSVB1") {
    auto data = fesvibs::load_container(path);
    std::cout << "dataset container: N=" << data.size() << " classes="
              << data.classes << " image=[" << data.images.dim(1) << ","
              << data.images.dim(2) << "," << data.images.dim(3)
              << "] crc=ok\n";
    return kExitOk;
  }
  if (std::string(magic, 5) == "FSVC1") {
    auto ckpt = fesvibs::load_checkpoint(path);
    std::cout << "checkpoint: variant=" << fesvibs::variant_name(ckpt.variant)
              << " clients=" << ckpt.n_clients
              << " tensors=" << ckpt.tensors.size() << " model{L="
              << ckpt.model.blocks << ",D=" << ckpt.model.dim
              << ",heads=" << ckpt.model.heads << ",M=" << ckpt.model.tokens()
              << ",K=" << ckpt.model.classes << ",S="
              << ckpt.model.sample_limit << "} crc=ok\n";
    return kExitOk;
  }
  throw fesvibs::IoError(path + ": unrecognized magic");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FeSViBS: federated split learning with block sampling"};
  app.require_subcommand(1);

  CommonArgs common;

  auto* gen = app.add_subcommand("generate-data",
                                 "write a synthetic dataset container");
  std::string gen_out = "data.fsvb";
  std::string gen_split = "train";
  gen->add_option("--config", common.config_path, "experiment config file")
      ->required();
  gen->add_option("--out", gen_out, "output container path");
  gen->add_option("--split", gen_split, "train or test seed stream")
      ->check(CLI::IsMember({"train", "test"}));

  auto* run = app.add_subcommand("run", "run an experiment");
  run->add_option("--config", common.config_path, "experiment config file")
      ->required();
  std::uint64_t seed_override = 0;
  auto* seed_opt =
      run->add_option("--seed-override", seed_override,
                      "replace every seed stream from this base seed");
  std::string transport;
  auto* transport_opt = run->add_option(
      "--transport", transport, "inproc or stream")->check(
      CLI::IsMember({"inproc", "stream"}));
  std::string out_dir;
  auto* out_opt = run->add_option("--out", out_dir, "output directory");
  run->add_flag("--emit-plots", common.emit_plots,
                "write learning_curve.svg next to metrics.csv");

  auto* eval = app.add_subcommand("evaluate",
                                  "score a checkpoint on a dataset container");
  std::string eval_ckpt, eval_data;
  eval->add_option("checkpoint", eval_ckpt, "final.fsvc path")->required();
  eval->add_option("container", eval_data, "dataset container path")
      ->required();

  auto* inspect = app.add_subcommand("inspect",
                                     "print container/checkpoint headers");
  std::string inspect_path;
  inspect->add_option("path", inspect_path, "file to inspect")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (seed_opt->count()) common.seed_override = seed_override;
    if (transport_opt->count()) common.transport = transport;
    if (out_opt->count()) common.out_dir = out_dir;
    if (gen->parsed()) return cmd_generate_data(common, gen_out, gen_split);
    if (run->parsed()) return cmd_run(common);
    if (eval->parsed()) return cmd_evaluate(eval_ckpt, eval_data);
    if (inspect->parsed()) return cmd_inspect(inspect_path);
  } catch (const fesvibs::ConfigError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return kExitConfig;
  } catch (const fesvibs::ValidationError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitOk;
}
