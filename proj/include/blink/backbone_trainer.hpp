// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0
//
// Supervised training of the toy backbone on generated scenes. Gradients are
// computed by hand (no autodiff dependency); the suite checks them against
// central finite differences in 64-bit builds.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "blink/data.hpp"
#include "blink/model.hpp"

namespace blink {

struct LossRow {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

// step,lr,loss with a header row.
void write_loss_csv(const std::filesystem::path& path, std::span<const LossRow> rows);

// An extra block of visual states spliced in as a SuperRes segment before
// layer `insert_layer` and optionally removed again before `remove_layer`.
// The rows are treated as constants (no gradient flows into them).
struct SuperResInjection {
  int insert_layer = -1;
  int remove_layer = -1;
  Mat rows;
};

// Attention term: -weight * log of the share of the last query token's
// head-averaged visual attention that lands in `quadrant` (2 x 2 grid,
// row-major), summed over layers [min_layer, max_layer]. Layers past the
// end of the model are ignored.
struct AttentionFocus {
  int quadrant = -1;  // -1 disables the term
  double weight = 0.0;
  int min_layer = 0;
  int max_layer = -1;
};

struct TrainingExample {
  const Tensor3<float>* image = nullptr;
  std::vector<int> query;
  int answer = 0;
  SuperResInjection injection;
  AttentionFocus focus;
};

// Cross-entropy of the answer at the last query token plus EOS after the
// answer, averaged over the two targets, plus the attention term when
// enabled. Accumulates parameter gradients into `grads` when given.
double backbone_loss(const ToyMLLM& model, const TrainingExample& example, ModelWeights* grads = nullptr);

struct BackboneTrainConfig {
  int steps = 5000;
  int batch_size = 16;
  double lr = 2e-3;
  double warmup_ratio = 0.03;
  double weight_decay = 0.01;
  // Per-example probabilities of the zoom augmentations.
  double zoom_primary_prob = 0.15;
  double injection_prob = 0.5;
  double injection_gt_prob = 0.5;
  double injection_remove_prob = 0.3;
  int injection_min_layer = 2;
  int injection_max_layer = 5;
  // Attention term on plain and injected examples (not on zoomed ones).
  double focus_weight = 0.1;
  int focus_min_layer = 1;
  int focus_max_layer = 6;
  std::uint64_t seed = 1234;
  double target_accuracy = 0.8;
  int eval_every = 250;
};

struct BackboneTrainReport {
  std::vector<LossRow> curve;
  std::vector<std::pair<int, double>> heldout_curve;  // (step, accuracy)
  double final_accuracy = 0.0;
  bool reached_target = false;
  std::string weights_digest;
};

// First answer token predicted without any intervention.
int predict_vanilla(const ToyMLLM& model, const SceneSample& sample);
double vanilla_accuracy(const ToyMLLM& model, std::span<const SceneSample> samples);

// Training scenes are generated on the fly from seeds disjoint from the
// small ids used for evaluation datasets.
BackboneTrainReport train_backbone(ToyMLLM& model, const BackboneTrainConfig& config,
                                   std::span<const SceneSample> heldout,
                                   const std::function<void(const std::string&)>& log = {});

// Seed offset for generated training scenes.
inline constexpr std::uint64_t kTrainSeedBase = 1ULL << 40;

}  // namespace blink
