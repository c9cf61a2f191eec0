// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0

#include "blink/harness.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>
#include <unistd.h>

#include "blink/errors.hpp"

#ifndef BLINK_VERSION
#define BLINK_VERSION "0.0.0"
#endif

namespace blink {

std::string code_version() { return BLINK_VERSION; }

// ---------------------------------------------------------------------------
// Configuration

namespace {

const std::vector<std::pair<std::string, std::string>>& default_values() {
  static const std::vector<std::pair<std::string, std::string>> kDefaults = {
      {"general.seed", "0"},
      {"general.workers", "1"},
      {"model.d_model", "64"},
      {"model.n_heads", "4"},
      {"model.n_layers", "8"},
      {"model.vocab_size", "64"},
      {"model.image_size", "32"},
      {"model.patch_pixels", "4"},
      {"model.max_text_len", "8"},
      {"model.n_system", "2"},
      {"model.ffn_dim", "256"},
      {"model.rope_theta", "10000"},
      {"model.rng_seed", "1"},
      {"data.count", "2000"},
      {"data.difficulty", "-1"},
      {"data.first_id", "0"},
      {"backbone.steps", "5000"},
      {"backbone.batch_size", "16"},
      {"backbone.lr", "0.002"},
      {"backbone.warmup_ratio", "0.03"},
      {"backbone.weight_decay", "0.01"},
      {"backbone.zoom_primary_prob", "0.15"},
      {"backbone.injection_prob", "0.5"},
      {"backbone.injection_gt_prob", "0.5"},
      {"backbone.injection_remove_prob", "0.3"},
      {"backbone.injection_min_layer", "2"},
      {"backbone.injection_max_layer", "5"},
      {"backbone.focus_weight", "0.1"},
      {"backbone.focus_min_layer", "1"},
      {"backbone.focus_max_layer", "6"},
      {"backbone.target_accuracy", "0.8"},
      {"backbone.eval_every", "250"},
      {"backbone.heldout", "500"},
      {"tokensr.lr", "0.0001"},
      {"tokensr.warmup_ratio", "0.03"},
      {"tokensr.batch_size", "8"},
      {"tokensr.epochs", "1"},
      {"tokensr.optimizer", "adamw"},
      {"tokensr.weight_decay", "0"},
      {"tokensr.pairs", "200"},
      {"tokensr.layers", ""},
      {"tokensr.kl_direction", "teacher_student"},
      {"tokensr.temperature", "1"},
      {"tokensr.init_seed", "0"},
      {"blink.layers", "3,4"},
      {"blink.tau_exp", "0.5"},
      {"blink.tau_drop", "0.4"},
      {"blink.p", "2"},
      {"blink.amplifier", "tokensr"},
      {"blink.variant", "full"},
      {"blink.interpolate", "true"},
      {"blink.saliency", "softmax"},
      {"blink.max_new_tokens", "3"},
      {"eval.samples", "0"},
      {"eval.bootstrap", "1000"},
      {"ablate.samples", "0"},
      {"trace.layer", "3"},
      {"trace.samples", "20"},
      {"trace.amplifier", "tokensr"},
      {"paths.data", ""},
      {"paths.backbone", ""},
      {"paths.tokensr", ""},
  };
  return kDefaults;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

ConfigTable::ConfigTable() {
  for (const auto& [k, v] : default_values()) values_[k] = v;
}

void ConfigTable::set(const std::string& key, const std::string& value) {
  if (!values_.count(key)) throw ConfigError("unknown configuration key '" + key + "'");
  values_[key] = trim(value);
  explicit_[key] = true;
}

void ConfigTable::load_ini(const std::filesystem::path& path) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("cannot read config " + path.string() + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config key '" + section + "' must sit inside a [section]");
    for (const auto& [key, value] : body) set(section + "." + key, value.get_value<std::string>());
  }
}

void ConfigTable::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void ConfigTable::apply_environment() {
  if (const char* s = std::getenv("BLINK_SEED"); s != nullptr && *s != '\0') set("general.seed", s);
}

const std::string& ConfigTable::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown configuration key '" + key + "'");
  return it->second;
}

int ConfigTable::get_int(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    const int out = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("configuration key '" + key + "' expects an integer, got '" + v + "'");
  }
}

std::uint64_t ConfigTable::get_u64(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const auto out = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("configuration key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
}

double ConfigTable::get_double(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("configuration key '" + key + "' expects a number, got '" + v + "'");
  }
}

bool ConfigTable::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("configuration key '" + key + "' expects true/false, got '" + v + "'");
}

std::vector<int> ConfigTable::get_int_list(const std::string& key) const {
  std::vector<int> out;
  std::stringstream ss(get(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    // "a-b" expands to the inclusive range.
    const auto dash = item.find('-', 1);
    try {
      if (dash != std::string::npos) {
        const int a = std::stoi(item.substr(0, dash));
        const int b = std::stoi(item.substr(dash + 1));
        if (b < a) throw std::invalid_argument(item);
        for (int i = a; i <= b; ++i) out.push_back(i);
      } else {
        std::size_t used = 0;
        out.push_back(std::stoi(item, &used));
        if (used != item.size()) throw std::invalid_argument(item);
      }
    } catch (const std::exception&) {
      throw ConfigError("configuration key '" + key + "' expects a list like 3,4 or 2-5, got '" + get(key) + "'");
    }
  }
  return out;
}

int ExperimentConfig::workers() const {
  const int w = table.get_int("general.workers");
  if (w < 1) throw ConfigError("general.workers must be at least 1");
  return w;
}

ModelConfig ExperimentConfig::model() const {
  ModelConfig m;
  m.d_model = table.get_int("model.d_model");
  m.n_heads = table.get_int("model.n_heads");
  m.n_layers = table.get_int("model.n_layers");
  m.vocab_size = table.get_int("model.vocab_size");
  m.image_size = table.get_int("model.image_size");
  m.patch_pixels = table.get_int("model.patch_pixels");
  m.max_text_len = table.get_int("model.max_text_len");
  m.n_system = table.get_int("model.n_system");
  m.ffn_dim = table.get_int("model.ffn_dim");
  m.rope_theta = table.get_double("model.rope_theta");
  m.rng_seed = table.get_u64("model.rng_seed");
  try {
    m.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  return m;
}

BackboneTrainConfig ExperimentConfig::backbone() const {
  BackboneTrainConfig c;
  c.steps = table.get_int("backbone.steps");
  c.batch_size = table.get_int("backbone.batch_size");
  c.lr = table.get_double("backbone.lr");
  c.warmup_ratio = table.get_double("backbone.warmup_ratio");
  c.weight_decay = table.get_double("backbone.weight_decay");
  c.zoom_primary_prob = table.get_double("backbone.zoom_primary_prob");
  c.injection_prob = table.get_double("backbone.injection_prob");
  c.injection_gt_prob = table.get_double("backbone.injection_gt_prob");
  c.injection_remove_prob = table.get_double("backbone.injection_remove_prob");
  c.injection_min_layer = table.get_int("backbone.injection_min_layer");
  c.injection_max_layer = table.get_int("backbone.injection_max_layer");
  c.focus_weight = table.get_double("backbone.focus_weight");
  c.focus_min_layer = table.get_int("backbone.focus_min_layer");
  c.focus_max_layer = table.get_int("backbone.focus_max_layer");
  c.target_accuracy = table.get_double("backbone.target_accuracy");
  c.eval_every = table.get_int("backbone.eval_every");
  c.seed = seed();
  if (c.steps <= 0 || c.batch_size <= 0 || !(c.lr > 0.0)) throw ConfigError("backbone: steps, batch_size and lr must be positive");
  if (c.injection_min_layer < 0 || c.injection_max_layer < c.injection_min_layer ||
      c.injection_max_layer >= table.get_int("model.n_layers")) {
    throw ConfigError("backbone: injection layer range is invalid");
  }
  if (!(c.focus_weight >= 0.0) || c.focus_min_layer < 0 || c.focus_max_layer < c.focus_min_layer) {
    throw ConfigError("backbone: focus weight must be non-negative and the focus layer range non-empty");
  }
  return c;
}

TokenSRRecipe ExperimentConfig::tokensr_recipe() const {
  TokenSRRecipe r;
  r.lr = table.get_double("tokensr.lr");
  r.warmup_ratio = table.get_double("tokensr.warmup_ratio");
  r.batch_size = table.get_int("tokensr.batch_size");
  r.epochs = table.get_int("tokensr.epochs");
  r.weight_decay = table.get_double("tokensr.weight_decay");
  r.seed = seed();
  const std::string opt = table.get("tokensr.optimizer");
  if (opt == "adamw") {
    r.optimizer = OptimizerKind::AdamW;
  } else if (opt == "sgd") {
    r.optimizer = OptimizerKind::MomentumSgd;
  } else {
    throw ConfigError("tokensr.optimizer must be adamw or sgd");
  }
  const std::string dir = table.get("tokensr.kl_direction");
  if (dir == "teacher_student") {
    r.loss.direction = KlDirection::TeacherStudent;
  } else if (dir == "student_teacher") {
    r.loss.direction = KlDirection::StudentTeacher;
  } else {
    throw ConfigError("tokensr.kl_direction must be teacher_student or student_teacher");
  }
  r.loss.temperature = table.get_double("tokensr.temperature");
  if (!(r.loss.temperature > 0.0)) throw ConfigError("tokensr.temperature must be positive");
  r.validate();
  return r;
}

std::vector<int> ExperimentConfig::tokensr_layers() const {
  auto layers = table.get_int_list("tokensr.layers");
  if (layers.empty()) layers = table.get_int_list("blink.layers");
  return layers;
}

BlinkConfig ExperimentConfig::blink() const {
  BlinkConfig b;
  b.layers = table.get_int_list("blink.layers");
  b.p = table.get_int("blink.p");
  if (b.p <= 0) throw ConfigError("blink.p must be positive");
  const Rational tau_exp = parse_decimal(table.get("blink.tau_exp"));
  const Rational tau_drop = parse_decimal(table.get("blink.tau_drop"));
  // Thresholds given explicitly are used as-is; defaults follow p.
  b.tau_exp = to_double(table.explicitly_set("blink.tau_exp") ? tau_exp : scale_threshold(tau_exp, b.p));
  b.tau_drop = to_double(table.explicitly_set("blink.tau_drop") ? tau_drop : scale_threshold(tau_drop, b.p));
  b.amplifier = parse_amplifier(table.get("blink.amplifier"));
  b.variant = parse_variant(table.get("blink.variant"));
  b.interpolate = table.get_bool("blink.interpolate");
  b.saliency = parse_saliency_mode(table.get("blink.saliency"));
  b.max_new_tokens = table.get_int("blink.max_new_tokens");
  b.seed = seed();
  b.validate(table.get_int("model.n_layers"));
  return b;
}

SceneOptions ExperimentConfig::scene_options() const {
  SceneOptions o;
  o.image_size = table.get_int("model.image_size");
  return o;
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : table.values()) j[k] = v;
  return j;
}

std::string ExperimentConfig::hash() const {
  nlohmann::json j = to_json();
  for (const char* k : {"paths.data", "paths.backbone", "paths.tokensr"}) j.erase(k);
  return sha256_hex(j.dump());
}

ExperimentConfig ExperimentConfig::load(const std::optional<std::filesystem::path>& ini,
                                        const std::vector<std::string>& overrides, bool use_environment) {
  ExperimentConfig c;
  if (ini) c.table.load_ini(*ini);
  if (use_environment) c.table.apply_environment();
  for (const auto& o : overrides) c.table.apply_override(o);
  // Surface typing errors at load time rather than mid-run.
  (void)c.model();
  (void)c.blink();
  (void)c.tokensr_recipe();
  (void)c.backbone();
  if (c.seed() >= (1ULL << 16)) throw ConfigError("general.seed must be below 65536");
  return c;
}

// ---------------------------------------------------------------------------
// Output plumbing

StagedOutput::StagedOutput(std::filesystem::path final_dir) : final_(std::move(final_dir)) {
  if (final_.has_parent_path()) std::filesystem::create_directories(final_.parent_path());
  staging_ = final_;
  staging_ += ".staging-" + std::to_string(::getpid());
  std::filesystem::remove_all(staging_);
  std::filesystem::create_directories(staging_);
}

StagedOutput::~StagedOutput() {
  if (!committed_) {
    std::error_code ec;
    std::filesystem::remove_all(staging_, ec);
  }
}

void StagedOutput::commit() {
  std::filesystem::remove_all(final_);
  std::filesystem::rename(staging_, final_);
  committed_ = true;
}

void write_manifest(const std::filesystem::path& dir, const std::string& command, const ExperimentConfig& config,
                    const nlohmann::json& extra) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::ostringstream ts;
  ts << std::put_time(std::gmtime(&now), "%Y-%m-%dT%H:%M:%SZ");
  nlohmann::json m = {{"command", command},
                      {"config_hash", config.hash()},
                      {"code_version", code_version()},
                      {"seed", config.seed()},
                      {"config", config.to_json()},
                      {"created_at", ts.str()}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << m.dump(2) << '\n';
}

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

Interval bootstrap_ci(std::span<const std::uint8_t> correct, int resamples, std::uint64_t seed, double level) {
  if (correct.empty() || resamples <= 0) return {};
  Rng rng(seed);
  const int n = static_cast<int>(correct.size());
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (auto& m : means) {
    int hits = 0;
    for (int i = 0; i < n; ++i) hits += correct[static_cast<std::size_t>(rng.uniform_int(n))];
    m = static_cast<double>(hits) / n;
  }
  std::sort(means.begin(), means.end());
  const double alpha = (1.0 - level) / 2.0;
  auto pick = [&](double q) {
    const auto idx = static_cast<std::size_t>(std::clamp(q * (resamples - 1), 0.0, static_cast<double>(resamples - 1)));
    return means[idx];
  };
  return {pick(alpha), pick(1.0 - alpha)};
}

// ---------------------------------------------------------------------------
// Evaluation

nlohmann::json VariantEval::to_json() const {
  nlohmann::json rho = nlohmann::json::object();
  for (const auto& [l, v] : mean_rho) rho[std::to_string(l)] = v;
  return {{"name", name},   {"n", n},           {"accuracy", accuracy},           {"ci_low", ci.low},
          {"ci_high", ci.high}, {"mean_rho", rho}, {"mean_actions", mean_actions}};
}

VariantEval evaluate_variant(const std::string& name, const ToyMLLM& model, const TokenSRBank* bank,
                             std::span<const SceneSample> samples, const std::optional<BlinkConfig>& config,
                             int workers, int bootstrap, std::uint64_t seed) {
  const int n = static_cast<int>(samples.size());
  std::vector<BlinkResult> results(static_cast<std::size_t>(n));
  parallel_for(n, workers, [&](int i) {
    const SceneSample& s = samples[static_cast<std::size_t>(i)];
    results[static_cast<std::size_t>(i)] =
        config ? run_blink(model, s.image, s.query, *config, bank) : run_vanilla(model, s.image, s.query);
  });
  VariantEval ev;
  ev.name = name;
  ev.n = n;
  ev.mean_actions = {{"expand", 0.0}, {"drop", 0.0}, {"keep", 0.0}};
  std::map<int, int> rho_count;
  for (int i = 0; i < n; ++i) {
    const BlinkResult& r = results[static_cast<std::size_t>(i)];
    ev.correct.push_back(r.answer() == samples[static_cast<std::size_t>(i)].answer ? 1 : 0);
    for (const auto& rep : r.reports) {
      ev.mean_rho[rep.layer] += rep.rho;
      rho_count[rep.layer] += 1;
      ev.mean_actions[action_name(rep.action.kind)] += 1.0;
    }
  }
  for (auto& [l, v] : ev.mean_rho) v /= rho_count[l];
  for (auto& [k, v] : ev.mean_actions) v = n > 0 ? v / n : 0.0;
  const double hits = std::accumulate(ev.correct.begin(), ev.correct.end(), 0.0);
  ev.accuracy = n > 0 ? hits / n : 0.0;
  ev.ci = bootstrap_ci(ev.correct, bootstrap, seed);
  return ev;
}

ToyMLLM load_backbone(const std::filesystem::path& path, const ModelConfig& expected) {
  ToyMLLM model = ToyMLLM::load(path);
  nlohmann::json got = model.config().to_json();
  nlohmann::json want = expected.to_json();
  got.erase("rng_seed");
  want.erase("rng_seed");
  if (got != want) {
    throw ConfigError("backbone checkpoint " + path.string() + " was built for a different model configuration");
  }
  return model;
}

TokenSRBank load_tokensr(const std::filesystem::path& path, const ToyMLLM& backbone) {
  TokenSRBank bank = TokenSRBank::load(path);
  if (bank.backbone_digest() != backbone.weights().digest()) {
    throw ConfigError("TokenSR checkpoint " + path.string() + " was trained against a different backbone");
  }
  if (bank.dim() != backbone.config().d_model) throw ConfigError("TokenSR width differs from the backbone");
  return bank;
}

std::vector<SceneSample> load_samples(const std::filesystem::path& dir, int limit) {
  DatasetReader reader(dir);
  std::vector<SceneSample> out;
  while (limit <= 0 || static_cast<int>(out.size()) < limit) {
    auto s = reader.next();
    if (!s) break;
    out.push_back(std::move(*s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablations

std::vector<std::string> ablation_suites() { return {"modules", "thresholds", "layers", "patches", "interp"}; }

std::vector<AblationRow> plan_ablation(const std::string& suite, const ExperimentConfig& config, int n_layers) {
  const BlinkConfig base = config.blink();
  std::vector<AblationRow> rows;
  auto add = [&](std::string cell, BlinkConfig c, std::string panel = "") {
    AblationRow r;
    r.suite = suite;
    r.cell = std::move(cell);
    r.panel = std::move(panel);
    r.config = std::move(c);
    rows.push_back(std::move(r));
  };
  if (suite == "modules") {
    AblationRow vanilla;
    vanilla.suite = suite;
    vanilla.cell = "vanilla";
    vanilla.vanilla = true;
    vanilla.config = base;
    rows.push_back(vanilla);
    for (Variant v : {Variant::Full, Variant::NoSGS, Variant::NoDTR, Variant::NoDrop}) {
      BlinkConfig c = base;
      c.variant = v;
      add(variant_name(v), c);
    }
  } else if (suite == "thresholds") {
    BlinkConfig c = base;
    c.variant = Variant::Full;
    add("default", c);
    c.variant = Variant::NoDrop;
    add("no_drop", c);
    c.variant = Variant::Full;
    c.tau_exp = 0.7;
    c.tau_drop = 0.3;
    add("high_exp_low_drop", c);
    c.tau_drop = 0.4;
    add("high_exp", c);
  } else if (suite == "layers") {
    for (int a = 0; a < n_layers; ++a) {
      for (int b = a; b < n_layers; ++b) {
        BlinkConfig c = base;
        c.layers.clear();
        for (int l = a; l <= b; ++l) c.layers.push_back(l);
        add("L" + std::to_string(a) + "-" + std::to_string(b), c, a == b ? "single" : "range");
      }
    }
  } else if (suite == "patches") {
    for (int p : {2, 3, 4}) {
      BlinkConfig c = base;
      c.set_patches(p);
      add("p" + std::to_string(p), c);
    }
  } else if (suite == "interp") {
    BlinkConfig c = base;
    c.interpolate = true;
    add("with_interp", c);
    c.interpolate = false;
    add("without_interp", c);
  } else {
    throw UsageError("unknown ablation suite '" + suite + "' (expected modules, thresholds, layers, patches or interp)");
  }
  return rows;
}

void run_ablation(std::vector<AblationRow>& rows, const ToyMLLM& model, const TokenSRBank* bank,
                  std::span<const SceneSample> samples, int workers, int bootstrap, std::uint64_t seed) {
  const int g = model.config().grid_size();
  for (auto& row : rows) {
    if (!row.vanilla && g % row.config.p != 0) {
      // The token grid cannot be tiled by p x p equal patches.
      row.status = "skipped_indivisible_grid";
      row.eval.name = row.cell;
      continue;
    }
    const std::optional<BlinkConfig> cfg = row.vanilla ? std::nullopt : std::optional<BlinkConfig>(row.config);
    row.eval = evaluate_variant(row.cell, model, bank, samples, cfg, workers, bootstrap, seed);
  }
}

std::string ablation_csv_header() {
  return "suite,cell,panel,variant,amplifier,p,tau_exp,tau_drop,layers,interpolate,status,n,accuracy,ci_low,ci_high,"
         "mean_expand,mean_drop,mean_keep";
}

std::string ablation_csv_row(const AblationRow& r) {
  std::ostringstream os;
  os.precision(10);
  std::string layers;
  for (std::size_t i = 0; i < r.config.layers.size(); ++i) layers += (i ? ";" : "") + std::to_string(r.config.layers[i]);
  auto action = [&](const char* k) {
    const auto it = r.eval.mean_actions.find(k);
    return it == r.eval.mean_actions.end() ? 0.0 : it->second;
  };
  const bool ok = r.status == "ok";
  os << r.suite << ',' << r.cell << ',' << r.panel << ',' << (r.vanilla ? "vanilla" : variant_name(r.config.variant)) << ','
     << (r.vanilla ? "none" : amplifier_name(r.config.amplifier)) << ',' << r.config.p << ',' << r.config.tau_exp << ','
     << r.config.tau_drop << ',' << layers << ',' << (r.config.interpolate ? "true" : "false") << ',' << r.status << ','
     << r.eval.n << ',';
  if (ok) {
    os << r.eval.accuracy << ',' << r.eval.ci.low << ',' << r.eval.ci.high << ',' << action("expand") << ','
       << action("drop") << ',' << action("keep");
  } else {
    os << ",,,,,";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Attention redistribution trace

namespace {

double entropy_within(std::span<const double> row, const Segment& seg) {
  double mass = 0.0;
  for (int j = seg.begin; j < seg.end(); ++j) mass += row[static_cast<std::size_t>(j)];
  if (!(mass > 0.0)) return 0.0;
  double h = 0.0;
  for (int j = seg.begin; j < seg.end(); ++j) {
    const double p = row[static_cast<std::size_t>(j)] / mass;
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

}  // namespace

SampleTrace trace_sample(const ToyMLLM& model, const TokenSRBank* bank, const SceneSample& sample, int layer,
                         AmplifierMode amplifier, int p) {
  const int g = model.config().grid_size();
  const PatchGrid grid(g, g, p);
  const Amplifier amp{amplifier, bank};
  SampleTrace trace;
  trace.sample_id = sample.id;
  trace.expand_layer = layer;
  const LayerHook hook = [&](const HookContext& ctx) -> std::optional<TokenSequence> {
    if (ctx.layer != layer) return std::nullopt;
    const SaliencyReport r = scan_layer(model, ctx.layer, ctx.sequence, grid);
    trace.patch = r.argmax_patch;
    return expand(ctx.sequence, ctx.layer, r.argmax_patch, grid, amp);
  };
  const PrefillResult pre = model.forward_prefill(model.build_prompt(sample.image, sample.query), hook);
  double gap_sum = 0.0;
  int gap_count = 0;
  for (int l = 0; l < model.config().n_layers; ++l) {
    const TokenSequence& seq = pre.layer_inputs[static_cast<std::size_t>(l)];
    const auto& row = pre.attention_rows[static_cast<std::size_t>(l)];
    TraceLayerRow t;
    t.sample_id = sample.id;
    t.layer = l;
    t.seq_len = seq.size();
    const Segment vis = seq.require(Role::Visual);
    for (int j = vis.begin; j < vis.end(); ++j) t.mass_visual += row[static_cast<std::size_t>(j)];
    t.entropy_visual = entropy_within(row, vis);
    if (const auto sr = seq.find(Role::SuperRes)) {
      for (int j = sr->begin; j < sr->end(); ++j) t.mass_sr += row[static_cast<std::size_t>(j)];
      t.entropy_sr = entropy_within(row, *sr);
      gap_sum += t.entropy_sr - t.entropy_visual;
      ++gap_count;
    }
    double total = 0.0;
    for (double v : row) total += v;
    t.mass_other = total - t.mass_visual - t.mass_sr;
    trace.rows.push_back(t);
  }
  trace.entropy_gap = gap_count > 0 ? gap_sum / gap_count : 0.0;
  trace.sr_more_even = gap_count > 0 && trace.entropy_gap >= 0.0;
  return trace;
}

// ---------------------------------------------------------------------------
// Commands

nlohmann::json cmd_gen_data(const ExperimentConfig& config, const std::filesystem::path& out) {
  const int count = config.table.get_int("data.count");
  const int difficulty = config.table.get_int("data.difficulty");
  const std::uint64_t first_id = config.table.get_u64("data.first_id");
  if (count < 0) throw ConfigError("data.count must be non-negative");
  if (difficulty < -1 || difficulty > 3) throw ConfigError("data.difficulty must be -1 (mixed) or in [0, 3]");
  StagedOutput staged(out);
  DatasetWriter writer(staged.dir());
  const std::uint64_t seed_base = config.seed() << 24;
  for (int i = 0; i < count; ++i) {
    const std::uint64_t id = first_id + static_cast<std::uint64_t>(i);
    SceneSample s = generate_scene(seed_base + id, difficulty >= 0 ? difficulty : static_cast<int>(id % 4),
                                   config.scene_options());
    s.id = id;
    writer.write(s);
  }
  writer.close();
  nlohmann::json summary = {{"count", count}, {"seed", config.seed()}, {"difficulty", difficulty}};
  write_manifest(staged.dir(), "gen-data", config, summary);
  staged.commit();
  return summary;
}

nlohmann::json cmd_train_backbone(const ExperimentConfig& config, const std::filesystem::path& heldout_data,
                                  const std::filesystem::path& out,
                                  const std::function<void(const std::string&)>& log) {
  const auto heldout = load_samples(heldout_data, config.table.get_int("backbone.heldout"));
  if (heldout.empty()) throw ConfigError("held-out dataset " + heldout_data.string() + " is empty");
  StagedOutput staged(out);
  ToyMLLM model = ToyMLLM::random(config.model());
  const BackboneTrainReport report = train_backbone(model, config.backbone(), heldout, log);
  model.save(staged.path("backbone.ckpt"));
  write_loss_csv(staged.path("loss.csv"), report.curve);
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& [step, acc] : report.heldout_curve) curve.push_back({{"step", step}, {"accuracy", acc}});
  nlohmann::json summary = {{"heldout_accuracy", report.final_accuracy},
                            {"target_accuracy", config.backbone().target_accuracy},
                            {"reached_target", report.reached_target},
                            {"heldout_curve", curve},
                            {"weights_digest", report.weights_digest},
                            {"steps", report.curve.size()}};
  if (!report.reached_target) {
    summary["warning"] = "held-out accuracy below target; downstream directional comparisons are not meaningful";
  }
  write_manifest(staged.dir(), "train backbone", config, summary);
  staged.commit();
  return summary;
}

nlohmann::json cmd_train_tokensr(const ExperimentConfig& config, const std::filesystem::path& data,
                                 const std::filesystem::path& backbone_path, const std::filesystem::path& out) {
  const ToyMLLM model = load_backbone(backbone_path, config.model());
  const std::string file_hash_before = sha256_file(backbone_path);
  const auto samples = load_samples(data, config.tokensr_pairs());
  if (samples.empty()) throw ConfigError("dataset " + data.string() + " is empty");
  std::vector<CropPair> pairs;
  for (const auto& s : samples) pairs.push_back(CropPair{&s.image, s.gt_patch});
  const auto layers = config.tokensr_layers();
  TokenSRBank bank = TokenSRBank::random(model.config().d_model, layers, config.table.get_u64("tokensr.init_seed"),
                                         model.weights().digest());
  StagedOutput staged(out);
  const TokenSRTrainReport report = train_tokensr(model, pairs, layers, config.tokensr_recipe(), bank);
  bank.save(staged.path("tokensr.ckpt"));
  write_loss_csv(staged.path("loss.csv"), report.curve);
  nlohmann::json init = nlohmann::json::object(), fin = nlohmann::json::object();
  for (const auto& [l, v] : report.initial_loss) init[std::to_string(l)] = v;
  for (const auto& [l, v] : report.final_loss) fin[std::to_string(l)] = v;
  nlohmann::json summary = {{"pairs", pairs.size()},
                            {"steps", report.curve.size()},
                            {"initial_loss", init},
                            {"final_loss", fin},
                            {"initial_mean", report.initial_mean},
                            {"final_mean", report.final_mean},
                            {"backbone_digest", report.backbone_digest_after},
                            {"backbone_unchanged", report.backbone_digest_before == report.backbone_digest_after &&
                                                       sha256_file(backbone_path) == file_hash_before}};
  write_manifest(staged.dir(), "train tokensr", config, summary);
  staged.commit();
  return summary;
}

namespace {

std::optional<TokenSRBank> maybe_bank(const std::optional<std::filesystem::path>& path, const ToyMLLM& model) {
  if (!path) return std::nullopt;
  return load_tokensr(*path, model);
}

}  // namespace

nlohmann::json cmd_eval(const ExperimentConfig& config, const std::filesystem::path& data,
                        const std::filesystem::path& backbone_path, const std::optional<std::filesystem::path>& tokensr,
                        const std::filesystem::path& out) {
  const ToyMLLM model = load_backbone(backbone_path, config.model());
  const auto bank = maybe_bank(tokensr, model);
  const auto samples = load_samples(data, config.table.get_int("eval.samples"));
  const int workers = config.workers();
  const int bootstrap = config.table.get_int("eval.bootstrap");
  BlinkConfig interp = config.blink();
  interp.amplifier = AmplifierMode::InterpOnly;
  BlinkConfig full = config.blink();
  full.amplifier = AmplifierMode::TokenSR;

  StagedOutput staged(out);
  nlohmann::json variants = nlohmann::json::array();
  variants.push_back(evaluate_variant("vanilla", model, nullptr, samples, std::nullopt, workers, bootstrap, config.seed()).to_json());
  variants.push_back(evaluate_variant("blink_interp", model, nullptr, samples, interp, workers, bootstrap, config.seed()).to_json());
  if (bank) {
    variants.push_back(evaluate_variant("blink", model, &*bank, samples, full, workers, bootstrap, config.seed()).to_json());
  }
  nlohmann::json report = {{"samples", samples.size()},
                           {"sample_ids_hash", [&] {
                              Sha256 h;
                              for (const auto& s : samples) h.update(&s.id, sizeof(s.id));
                              return h.hex_digest();
                            }()},
                           {"blink_config", full.to_json()},
                           {"variants", variants}};
  std::ofstream(staged.path("eval.json")) << report.dump(2) << '\n';
  write_manifest(staged.dir(), "eval", config, {{"samples", samples.size()}});
  staged.commit();
  return report;
}

nlohmann::json cmd_ablate(const ExperimentConfig& config, const std::string& suite, const std::filesystem::path& data,
                          const std::filesystem::path& backbone_path, const std::optional<std::filesystem::path>& tokensr,
                          const std::filesystem::path& out) {
  auto rows = plan_ablation(suite, config, config.model().n_layers);
  const ToyMLLM model = load_backbone(backbone_path, config.model());
  const auto bank = maybe_bank(tokensr, model);
  if (!bank) {
    for (const auto& r : rows) {
      if (!r.vanilla && r.config.amplifier == AmplifierMode::TokenSR) {
        throw ConfigError("ablation cell '" + r.cell + "' uses the TokenSR amplifier but no TokenSR checkpoint was given");
      }
    }
  }
  // Every layer of a sweep needs weights under TokenSR; fall back to failing early.
  if (bank) {
    for (const auto& r : rows) {
      if (r.vanilla || r.config.amplifier != AmplifierMode::TokenSR) continue;
      for (int l : r.config.layers) {
        if (!bank->has(l)) throw ConfigError("TokenSR checkpoint has no weights for layer " + std::to_string(l) +
                                             " needed by ablation cell '" + r.cell + "'");
      }
    }
  }
  const auto samples = load_samples(data, config.table.get_int("ablate.samples"));
  run_ablation(rows, model, bank ? &*bank : nullptr, samples, config.workers(), config.table.get_int("eval.bootstrap"),
               config.seed());
  StagedOutput staged(out);
  {
    std::ofstream csv(staged.path("ablation_" + suite + ".csv"));
    csv << ablation_csv_header() << '\n';
    for (const auto& r : rows) csv << ablation_csv_row(r) << '\n';
  }
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& r : rows) {
    cells.push_back({{"cell", r.cell}, {"status", r.status}, {"accuracy", r.eval.accuracy}, {"n", r.eval.n}});
  }
  nlohmann::json summary = {{"suite", suite}, {"samples", samples.size()}, {"cells", cells}};
  write_manifest(staged.dir(), "ablate " + suite, config, summary);
  staged.commit();
  return summary;
}

nlohmann::json cmd_trace(const ExperimentConfig& config, const std::filesystem::path& data,
                         const std::filesystem::path& backbone_path, const std::optional<std::filesystem::path>& tokensr,
                         const std::filesystem::path& out) {
  const ToyMLLM model = load_backbone(backbone_path, config.model());
  const auto bank = maybe_bank(tokensr, model);
  const AmplifierMode amp = parse_amplifier(config.table.get("trace.amplifier"));
  if (amp == AmplifierMode::TokenSR && !bank) throw ConfigError("trace with the TokenSR amplifier needs a TokenSR checkpoint");
  const int layer = config.table.get_int("trace.layer");
  if (layer < 0 || layer >= model.config().n_layers) throw ConfigError("trace.layer outside the model");
  const auto samples = load_samples(data, config.table.get_int("trace.samples"));
  std::vector<SampleTrace> traces(samples.size());
  parallel_for(static_cast<int>(samples.size()), config.workers(), [&](int i) {
    traces[static_cast<std::size_t>(i)] =
        trace_sample(model, bank ? &*bank : nullptr, samples[static_cast<std::size_t>(i)], layer, amp);
  });
  StagedOutput staged(out);
  std::ofstream csv(staged.path("trace.csv"));
  csv.precision(12);
  csv << "sample_id,layer,seq_len,mass_visual,mass_sr,mass_other,entropy_visual,entropy_sr\n";
  int more_even = 0;
  nlohmann::json per_sample = nlohmann::json::array();
  for (const auto& t : traces) {
    for (const auto& r : t.rows) {
      csv << r.sample_id << ',' << r.layer << ',' << r.seq_len << ',' << r.mass_visual << ',' << r.mass_sr << ','
          << r.mass_other << ',' << r.entropy_visual << ',' << r.entropy_sr << '\n';
    }
    more_even += t.sr_more_even ? 1 : 0;
    per_sample.push_back({{"sample_id", t.sample_id}, {"patch", t.patch}, {"entropy_gap", t.entropy_gap},
                          {"sr_more_even", t.sr_more_even}});
  }
  csv.close();
  nlohmann::json summary = {{"expand_layer", layer},
                            {"amplifier", amplifier_name(amp)},
                            {"samples", traces.size()},
                            {"sr_more_even_fraction", traces.empty() ? 0.0 : static_cast<double>(more_even) / traces.size()},
                            {"per_sample", per_sample}};
  std::ofstream(staged.path("trace_summary.json")) << summary.dump(2) << '\n';
  write_manifest(staged.dir(), "trace", config, {{"samples", traces.size()}, {"expand_layer", layer}});
  staged.commit();
  return summary;
}

}  // namespace blink
