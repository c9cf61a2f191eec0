// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0
//
// Token super-resolution amplifier: three same-padding convolutions
// (5x5 d->d/2, ReLU, 3x3 d/2->d/4, ReLU, 1x1 d/4->d) applied to an upsampled
// grid of hidden states, plus its distillation objective and training loop.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "blink/backbone_trainer.hpp"
#include "blink/checkpoint.hpp"
#include "blink/data.hpp"
#include "blink/model.hpp"
#include "blink/numerics.hpp"

namespace blink {

template <typename T>
struct TokenSRLayer {
  ConvKernel<T> conv1, conv2, conv3;

  static TokenSRLayer zeros(int d);
  // Uniform in +-1/sqrt(fan_in) for weights and biases.
  static TokenSRLayer random(int d, Rng& rng);

  int dim() const { return conv1.in_channels; }
  std::size_t parameter_count() const;
  // Weights then bias for conv1..conv3, in that order.
  std::vector<std::span<T>> parameter_spans();
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> theta);
};

template <typename T>
struct AmplifyCache {
  Tensor3<T> input, pre1, act1, pre2, act2;
};

// Throws InvalidArgument when the input channel count differs from d.
template <typename T>
Tensor3<T> amplify(const Tensor3<T>& x, const TokenSRLayer<T>& w, AmplifyCache<T>* cache = nullptr);

// Accumulates parameter gradients into `grads`; returns dL/dx.
template <typename T>
Tensor3<T> amplify_backward(const AmplifyCache<T>& cache, const TokenSRLayer<T>& w, const Tensor3<T>& grad_out,
                            TokenSRLayer<T>& grads);

enum class KlDirection { TeacherStudent, StudentTeacher };

struct LossOptions {
  double temperature = 1.0;
  KlDirection direction = KlDirection::TeacherStudent;
};

// Mean over tokens of the KL divergence between channel-softmaxed teacher and
// student vectors. Writes dL/dstudent when `grad_student` is given.
template <typename T>
double tokensr_loss(const Tensor3<T>& student, const Tensor3<T>& teacher, const LossOptions& options = {},
                    Tensor3<T>* grad_student = nullptr);

// Per-layer amplifier weights for a particular backbone.
class TokenSRBank {
 public:
  TokenSRBank() = default;
  TokenSRBank(int d_model, std::string backbone_digest) : d_(d_model), backbone_digest_(std::move(backbone_digest)) {}

  static TokenSRBank random(int d_model, std::span<const int> layers, std::uint64_t seed, std::string backbone_digest);

  int dim() const { return d_; }
  bool has(int layer) const { return layers_.count(layer) > 0; }
  std::vector<int> layers() const;
  TokenSRLayer<Real>& at(int layer);
  const TokenSRLayer<Real>& at(int layer) const;  // ConfigError when absent
  void set(int layer, TokenSRLayer<Real> w) { layers_[layer] = std::move(w); }

  // When set, apply() returns its input unchanged.
  void force_identity(bool on) { identity_ = on; }
  bool identity_forced() const { return identity_; }
  Tensor3<Real> apply(int layer, const Tensor3<Real>& grid) const;

  const std::string& backbone_digest() const { return backbone_digest_; }

  TensorArchive to_archive() const;
  static TokenSRBank from_archive(const TensorArchive& archive);
  void save(const std::filesystem::path& path) const { to_archive().save(path); }
  static TokenSRBank load(const std::filesystem::path& path) { return from_archive(TensorArchive::load(path)); }

 private:
  int d_ = 0;
  std::string backbone_digest_;
  std::map<int, TokenSRLayer<Real>> layers_;
  bool identity_ = false;
};

enum class OptimizerKind { AdamW, MomentumSgd };

struct TokenSRRecipe {
  double lr = 1e-4;
  double warmup_ratio = 0.03;
  int batch_size = 8;
  int epochs = 1;
  OptimizerKind optimizer = OptimizerKind::AdamW;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  LossOptions loss;

  void validate() const;
};

// One training pair: a scene and the labeled quadrant whose crop supplies the
// teacher states.
struct CropPair {
  const Tensor3<float>* full = nullptr;
  int quadrant = 0;
};

struct TokenSRTrainReport {
  std::vector<LossRow> curve;
  std::map<int, double> initial_loss;  // per layer, whole dataset, before training
  std::map<int, double> final_loss;    // per layer, whole dataset, after training
  double initial_mean = 0.0;
  double final_mean = 0.0;
  std::string backbone_digest_before;
  std::string backbone_digest_after;
};

// Student input for one pair at `layer`: the quadrant's tokens from the full
// image, bilinearly resized to the full token grid.
Tensor3<Real> student_input(const ToyMLLM& model, const Tensor3<float>& full, int quadrant, int layer);
// Teacher: visual states of the quadrant crop (re-encoded at input size).
Tensor3<Real> teacher_states(const ToyMLLM& model, const Tensor3<float>& full, int quadrant, int layer);

Tensor3<Real> rows_to_grid(const Mat& rows, int h, int w);
Mat grid_to_rows(const Tensor3<Real>& grid);

// Trains the bank's layers in place. The backbone is only read.
TokenSRTrainReport train_tokensr(const ToyMLLM& model, std::span<const CropPair> pairs, std::span<const int> layers,
                                 const TokenSRRecipe& recipe, TokenSRBank& bank);

struct GradientCheckResult {
  double max_relative_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t parameters = 0;
  // Parameters left out because a probe flipped a ReLU on or off even at the
  // smallest step, where the loss is not differentiable within the stencil.
  std::size_t kink_skipped = 0;
};

// Analytic gradients of the mean loss over `inputs`/`teachers` versus
// five-point central differences, over every conv weight and bias. Each
// parameter uses the largest of step, step/4, step/16, step/64 whose probes
// leave every ReLU on the same side. Relative error uses
// max(|a|, |n|, floor) as denominator.
GradientCheckResult gradient_check(const TokenSRLayer<double>& weights, std::span<const Tensor3<double>> inputs,
                                   std::span<const Tensor3<double>> teachers, const LossOptions& options = {},
                                   double step = 1e-3, double floor = 1e-6);

}  // namespace blink
