// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0
//
// blink: dataset generation, training, evaluation, ablation sweeps and
// attention traces for the toy multimodal model.
//
//   blink gen-data --out data/train --set data.count=2000
//   blink train backbone --data data/heldout --out runs/backbone
//   blink train tokensr --data data/train --backbone runs/backbone/backbone.ckpt --out runs/tokensr
//   blink eval --data data/heldout --backbone ... --tokensr ... --out runs/eval
//   blink ablate --suite layers ...
//   blink trace ...
//
// Exit codes: 0 success, 2 usage, 3 configuration, 4 data format.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "blink/errors.hpp"
#include "blink/harness.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;
constexpr int kExitFormat = 4;

struct CommonArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::string data;
  std::string backbone;
  std::string tokensr;
};

blink::ExperimentConfig load_config(const CommonArgs& a) {
  std::optional<fs::path> ini;
  if (!a.config.empty()) {
    if (!fs::exists(a.config)) throw blink::ConfigError("config file " + a.config + " does not exist");
    ini = a.config;
  }
  return blink::ExperimentConfig::load(ini, a.sets);
}

// Command-line paths win over [paths] entries in the config.
fs::path resolve(const std::string& flag, const blink::ExperimentConfig& cfg, const std::string& key, const char* what) {
  std::string v = flag;
  if (v.empty() && cfg.table.values().count(key)) v = cfg.table.get(key);
  if (v.empty()) throw blink::ConfigError(std::string("missing ") + what);
  if (!fs::exists(v)) throw blink::ConfigError(std::string(what) + " " + v + " does not exist");
  return v;
}

std::optional<fs::path> optional_path(const std::string& flag, const blink::ExperimentConfig& cfg,
                                      const std::string& key) {
  std::string v = flag;
  if (v.empty() && cfg.table.values().count(key)) v = cfg.table.get(key);
  if (v.empty()) return std::nullopt;
  if (!fs::exists(v)) throw blink::ConfigError("TokenSR checkpoint " + v + " does not exist");
  return fs::path(v);
}

void add_common(CLI::App* cmd, CommonArgs& a, bool needs_data, bool needs_models) {
  cmd->add_option("-c,--config", a.config, "INI configuration file");
  cmd->add_option("-s,--set", a.sets, "Override a configuration key, e.g. blink.tau_exp=0.6")->take_all();
  cmd->add_option("-o,--out", a.out, "Output directory")->required();
  if (needs_data) cmd->add_option("-d,--data", a.data, "Dataset directory");
  if (needs_models) {
    cmd->add_option("-b,--backbone", a.backbone, "Backbone checkpoint");
    cmd->add_option("-t,--tokensr", a.tokensr, "TokenSR checkpoint");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic token resolution experiments on a toy multimodal model"};
  app.require_subcommand(1);
  app.set_version_flag("--version", blink::code_version());

  CommonArgs gen_args, train_args, eval_args, ablate_args, trace_args;
  std::string train_kind;
  std::string suite;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  add_common(gen, gen_args, false, false);

  auto* train = app.add_subcommand("train", "Train the backbone or the TokenSR modules");
  train->add_option("kind", train_kind, "backbone or tokensr")->required()->check(CLI::IsMember({"backbone", "tokensr"}));
  add_common(train, train_args, true, true);

  auto* eval = app.add_subcommand("eval", "Compare Vanilla, Blink-interp and Blink");
  add_common(eval, eval_args, true, true);

  auto* ablate = app.add_subcommand("ablate", "Run an ablation sweep");
  ablate->add_option("--suite", suite, "modules, thresholds, layers, patches or interp")->required();
  add_common(ablate, ablate_args, true, true);

  auto* trace = app.add_subcommand("trace", "Per-layer attention trace with a forced expansion");
  add_common(trace, trace_args, true, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    nlohmann::json summary;
    if (gen->parsed()) {
      const auto cfg = load_config(gen_args);
      summary = blink::cmd_gen_data(cfg, gen_args.out);
    } else if (train->parsed()) {
      const auto cfg = load_config(train_args);
      const fs::path data = resolve(train_args.data, cfg, "paths.data", "dataset");
      if (train_kind == "backbone") {
        summary = blink::cmd_train_backbone(cfg, data, train_args.out,
                                            [](const std::string& line) { std::cerr << line << '\n'; });
      } else {
        const fs::path backbone = resolve(train_args.backbone, cfg, "paths.backbone", "backbone checkpoint");
        summary = blink::cmd_train_tokensr(cfg, data, backbone, train_args.out);
      }
    } else if (eval->parsed()) {
      const auto cfg = load_config(eval_args);
      summary = blink::cmd_eval(cfg, resolve(eval_args.data, cfg, "paths.data", "dataset"),
                                resolve(eval_args.backbone, cfg, "paths.backbone", "backbone checkpoint"),
                                optional_path(eval_args.tokensr, cfg, "paths.tokensr"), eval_args.out);
    } else if (ablate->parsed()) {
      const auto cfg = load_config(ablate_args);
      // Validate the suite name before touching any checkpoint.
      (void)blink::plan_ablation(suite, cfg, cfg.model().n_layers);
      summary = blink::cmd_ablate(cfg, suite, resolve(ablate_args.data, cfg, "paths.data", "dataset"),
                                  resolve(ablate_args.backbone, cfg, "paths.backbone", "backbone checkpoint"),
                                  optional_path(ablate_args.tokensr, cfg, "paths.tokensr"), ablate_args.out);
    } else if (trace->parsed()) {
      const auto cfg = load_config(trace_args);
      summary = blink::cmd_trace(cfg, resolve(trace_args.data, cfg, "paths.data", "dataset"),
                                 resolve(trace_args.backbone, cfg, "paths.backbone", "backbone checkpoint"),
                                 optional_path(trace_args.tokensr, cfg, "paths.tokensr"), trace_args.out);
    }
    std::cout << summary.dump(2) << '\n';
    return 0;
  } catch (const blink::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const blink::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const blink::FormatError& e) {
    std::cerr << "data format error: " << e.what() << '\n';
    return kExitFormat;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
