// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration behind the `blink` command line tool: layered
// configuration (defaults < INI file < BLINK_SEED < --set overrides), the
// gen-data / train / eval / ablate / trace commands, and their reports.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "blink/backbone_trainer.hpp"
#include "blink/data.hpp"
#include "blink/model.hpp"
#include "blink/token_resolution.hpp"
#include "blink/tokensr.hpp"

namespace blink {

std::string code_version();

// Flat "section.key" -> value table with a fixed schema of known keys.
class ConfigTable {
 public:
  ConfigTable();  // every key at its default

  // Reads an INI file ([section] / key = value / # or ; comments).
  void load_ini(const std::filesystem::path& path);
  // "section.key=value". ConfigError on unknown keys or malformed text.
  void apply_override(const std::string& assignment);
  void set(const std::string& key, const std::string& value);
  // Applies BLINK_SEED when set in the environment.
  void apply_environment();

  const std::string& get(const std::string& key) const;
  bool explicitly_set(const std::string& key) const { return explicit_.count(key) > 0; }
  int get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<int> get_int_list(const std::string& key) const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, bool> explicit_;
};

struct ExperimentConfig {
  ConfigTable table;

  std::uint64_t seed() const { return table.get_u64("general.seed"); }
  int workers() const;
  ModelConfig model() const;
  BackboneTrainConfig backbone() const;
  TokenSRRecipe tokensr_recipe() const;
  std::vector<int> tokensr_layers() const;
  int tokensr_pairs() const { return table.get_int("tokensr.pairs"); }
  // Blink settings; when p != 2 and no threshold was given explicitly, the
  // thresholds are rescaled from their 2 x 2 values.
  BlinkConfig blink() const;
  SceneOptions scene_options() const;

  nlohmann::json to_json() const;
  // SHA-256 of the canonical JSON, path keys excluded.
  std::string hash() const;

  static ExperimentConfig load(const std::optional<std::filesystem::path>& ini,
                               const std::vector<std::string>& overrides, bool use_environment = true);
};

// Writes into a private staging directory; commit() moves it into place.
class StagedOutput {
 public:
  explicit StagedOutput(std::filesystem::path final_dir);
  ~StagedOutput();
  const std::filesystem::path& dir() const { return staging_; }
  std::filesystem::path path(const std::string& name) const { return staging_ / name; }
  void commit();

 private:
  std::filesystem::path final_;
  std::filesystem::path staging_;
  bool committed_ = false;
};

void write_manifest(const std::filesystem::path& dir, const std::string& command, const ExperimentConfig& config,
                    const nlohmann::json& extra = nlohmann::json::object());

// Runs fn(i) for i in [0, n) over `workers` threads; fn writes results into
// per-index slots so the outcome does not depend on scheduling.
void parallel_for(int n, int workers, const std::function<void(int)>& fn);

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

// Percentile bootstrap of the mean of 0/1 outcomes.
Interval bootstrap_ci(std::span<const std::uint8_t> correct, int resamples, std::uint64_t seed, double level = 0.95);

struct VariantEval {
  std::string name;
  int n = 0;
  double accuracy = 0.0;
  Interval ci;
  std::map<int, double> mean_rho;                 // per selected layer
  std::map<std::string, double> mean_actions;     // expand / drop / keep per sample
  std::vector<std::uint8_t> correct;              // per sample, in input order

  nlohmann::json to_json() const;
};

// `config` = nullopt evaluates the unmodified model.
VariantEval evaluate_variant(const std::string& name, const ToyMLLM& model, const TokenSRBank* bank,
                             std::span<const SceneSample> samples, const std::optional<BlinkConfig>& config,
                             int workers, int bootstrap, std::uint64_t seed);

// Loads a backbone checkpoint and checks it against the configured model.
ToyMLLM load_backbone(const std::filesystem::path& path, const ModelConfig& expected);
// Loads TokenSR weights and rejects banks trained for a different backbone.
TokenSRBank load_tokensr(const std::filesystem::path& path, const ToyMLLM& backbone);

struct AblationRow {
  std::string suite;
  std::string cell;
  std::string panel;  // layers suite: "range" or "single"
  BlinkConfig config;
  bool vanilla = false;
  std::string status = "ok";
  VariantEval eval;
};

std::vector<std::string> ablation_suites();
// Throws UsageError for an unknown suite.
std::vector<AblationRow> plan_ablation(const std::string& suite, const ExperimentConfig& config, int n_layers);
void run_ablation(std::vector<AblationRow>& rows, const ToyMLLM& model, const TokenSRBank* bank,
                  std::span<const SceneSample> samples, int workers, int bootstrap, std::uint64_t seed);
std::string ablation_csv_header();
std::string ablation_csv_row(const AblationRow& row);

struct TraceLayerRow {
  std::uint64_t sample_id = 0;
  int layer = 0;
  int seq_len = 0;
  double mass_visual = 0.0;
  double mass_sr = 0.0;
  double mass_other = 0.0;
  double entropy_visual = 0.0;
  double entropy_sr = 0.0;
};

struct SampleTrace {
  std::uint64_t sample_id = 0;
  int expand_layer = 0;
  int patch = 0;
  std::vector<TraceLayerRow> rows;
  // Mean over layers holding the SR block of entropy(SR) - entropy(Visual).
  double entropy_gap = 0.0;
  bool sr_more_even = false;
};

// Expansion forced at `layer` and never dropped; attention masses and
// within-segment entropies of the last Text token at every layer.
SampleTrace trace_sample(const ToyMLLM& model, const TokenSRBank* bank, const SceneSample& sample, int layer,
                         AmplifierMode amplifier, int p = 2);

// Commands. Each returns a JSON summary and writes files under `out`.
nlohmann::json cmd_gen_data(const ExperimentConfig& config, const std::filesystem::path& out);
nlohmann::json cmd_train_backbone(const ExperimentConfig& config, const std::filesystem::path& heldout_data,
                                  const std::filesystem::path& out,
                                  const std::function<void(const std::string&)>& log = {});
nlohmann::json cmd_train_tokensr(const ExperimentConfig& config, const std::filesystem::path& data,
                                 const std::filesystem::path& backbone, const std::filesystem::path& out);
nlohmann::json cmd_eval(const ExperimentConfig& config, const std::filesystem::path& data,
                        const std::filesystem::path& backbone, const std::optional<std::filesystem::path>& tokensr,
                        const std::filesystem::path& out);
nlohmann::json cmd_ablate(const ExperimentConfig& config, const std::string& suite, const std::filesystem::path& data,
                          const std::filesystem::path& backbone, const std::optional<std::filesystem::path>& tokensr,
                          const std::filesystem::path& out);
nlohmann::json cmd_trace(const ExperimentConfig& config, const std::filesystem::path& data,
                         const std::filesystem::path& backbone, const std::optional<std::filesystem::path>& tokensr,
                         const std::filesystem::path& out);

std::vector<SceneSample> load_samples(const std::filesystem::path& dir, int limit);

}  // namespace blink
