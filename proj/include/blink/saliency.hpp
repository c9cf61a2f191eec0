// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0
//
// Saliency scanning: how strongly the last prompt token attends to each visual
// token at a layer, aggregated over a p x p grid of patches, and the share of
// the most salient patch (the saliency ratio rho).

#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "blink/data.hpp"
#include "blink/model.hpp"

namespace blink {

// Partition of an H x W token grid into p x p equal, non-overlapping patches
// numbered row-major.
class PatchGrid {
 public:
  // Throws InvalidArgument when p <= 0 or H, W are not divisible by p.
  PatchGrid(int grid_h, int grid_w, int p);

  int p() const { return p_; }
  int count() const { return p_ * p_; }
  int grid_h() const { return grid_h_; }
  int grid_w() const { return grid_w_; }
  int patch_h() const { return grid_h_ / p_; }
  int patch_w() const { return grid_w_ / p_; }

  // Row-major token indices of a patch.
  const std::vector<int>& tokens(int patch) const;
  int patch_of(int token) const;

 private:
  int grid_h_, grid_w_, p_;
  std::vector<std::vector<int>> tokens_;
};

enum class SaliencyMode {
  // Head-averaged scaled attention, softmax restricted to visual tokens.
  Softmax,
  // Head-averaged scaled dot products, shifted so the smallest is zero and
  // normalized to unit sum.
  RawLogit,
};

const char* saliency_mode_name(SaliencyMode m);
SaliencyMode parse_saliency_mode(const std::string& s);

// Scores of `keys` (n x d, rotary-embedded) against one query row (1 x d).
// Non-negative and summing to one. Throws InvalidArgument for an empty key set.
std::vector<double> token_saliency(const Mat& query, const Mat& keys, int n_heads,
                                   SaliencyMode mode = SaliencyMode::Softmax);

// Scores of the Visual segment at `layer` for the last Text token, using the
// layer's own input normalization, projections and rotary positions.
std::vector<double> token_saliency(const ToyMLLM& model, int layer, const TokenSequence& seq,
                                   SaliencyMode mode = SaliencyMode::Softmax);

struct PatchSaliency {
  std::vector<double> sums;
  int argmax = 0;  // lowest index on ties
};

PatchSaliency aggregate_patches(std::span<const double> scores, const PatchGrid& grid);

// max / sum. Throws DegenerateInput when the total is not positive.
double saliency_ratio(std::span<const double> patch_sums);

enum class ActionKind { Keep, Expand, Drop };

struct ResolutionAction {
  ActionKind kind = ActionKind::Keep;
  int patch = -1;  // valid for Expand only

  static ResolutionAction keep() { return {ActionKind::Keep, -1}; }
  static ResolutionAction drop() { return {ActionKind::Drop, -1}; }
  static ResolutionAction expand(int patch) { return {ActionKind::Expand, patch}; }
  bool operator==(const ResolutionAction&) const = default;
};

const char* action_name(ActionKind k);

struct SaliencyReport {
  int layer = 0;
  std::vector<double> token_scores;
  std::vector<double> patch_sums;
  double rho = 0.0;
  int argmax_patch = 0;
  ResolutionAction action;
  // Share of the last Text token's full (head-averaged) attention row that
  // lands on the SuperRes segment; zero when none exists.
  double sr_mass = 0.0;
};

// Full scan of one layer input. The action is left as Keep.
SaliencyReport scan_layer(const ToyMLLM& model, int layer, const TokenSequence& seq, const PatchGrid& grid,
                          SaliencyMode mode = SaliencyMode::Softmax);

struct LayerTraceRow {
  int layer = 0;
  double rho = 0.0;
  int argmax_patch = 0;
  bool is_correct = false;
  double sr_mass = 0.0;
};

// Hook-free prefill of the sample, scanned at every layer.
std::vector<LayerTraceRow> layer_trace(const ToyMLLM& model, const SceneSample& sample, int p = 2,
                                       SaliencyMode mode = SaliencyMode::Softmax);

void write_layer_trace_csv(const std::filesystem::path& path, std::span<const LayerTraceRow> rows);

}  // namespace blink
