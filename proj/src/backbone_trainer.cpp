// Copyright 2026 The Blink Authors
// SPDX-License-Identifier: Apache-2.0

#include "blink/backbone_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>

#include "blink/errors.hpp"
#include "blink/optim.hpp"

namespace blink {

void write_loss_csv(const std::filesystem::path& path, std::span<const LossRow> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write loss curve to " + path.string());
  out << "step,lr,loss\n";
  out.precision(10);
  for (const auto& r : rows) out << r.step << ',' << r.lr << ',' << r.loss << '\n';
}

namespace {

// Backward of y = gain * x * inv_rms (row-wise). Returns dx and accumulates
// into dgain.
Mat rms_backward(const Mat& x, const Mat& gain, const Eigen::VectorXd& inv_rms, const Mat& dy, Mat& dgain) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  Mat dx(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Real r = static_cast<Real>(inv_rms(i));
    RowVec xhat = x.row(i) * r;
    dgain.row(0) += dy.row(i).cwiseProduct(xhat);
    RowVec dxhat = dy.row(i).cwiseProduct(gain.row(0));
    const Real m = dxhat.dot(xhat) / static_cast<Real>(d);
    dx.row(i) = r * (dxhat - xhat * m);
  }
  return dx;
}

// `dattn` (n_heads x n) is an extra gradient on row `attn_row` of each
// head's attention matrix.
Mat layer_backward(const ToyMLLM& model, int layer, const LayerActivations& a, std::span<const int> positions,
                   const Mat& dout, LayerWeights& gw, const Mat* dattn = nullptr, int attn_row = -1) {
  const LayerWeights& w = model.weights().layers[static_cast<std::size_t>(layer)];
  const auto& cfg = model.config();
  const int hd = cfg.head_dim();
  const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(hd)));
  const Eigen::Index n = dout.rows();

  // Feed-forward block.
  gw.b2.row(0) += dout.colwise().sum();
  gw.w2.noalias() += a.ff_act.transpose() * dout;
  Mat dpre = dout * w.w2.transpose();
  dpre = dpre.cwiseProduct(a.ff_pre.unaryExpr([](Real v) { return gelu_grad(v); }));
  gw.w1.noalias() += a.h2.transpose() * dpre;
  gw.b1.row(0) += dpre.colwise().sum();
  Mat dh2 = dpre * w.w1.transpose();
  Mat dmid = dout + rms_backward(a.x_mid, w.ffn_norm, a.inv_rms2, dh2, gw.ffn_norm);

  // Attention block.
  gw.wo.noalias() += a.ctx.transpose() * dmid;
  Mat dctx = dmid * w.wo.transpose();
  Mat dq = Mat::Zero(n, cfg.d_model);
  Mat dk = Mat::Zero(n, cfg.d_model);
  Mat dv = Mat::Zero(n, cfg.d_model);
  for (int h = 0; h < cfg.n_heads; ++h) {
    const Mat& attn = a.attn[static_cast<std::size_t>(h)];
    const auto cols = [&](const Mat& m) { return m.middleCols(h * hd, hd); };
    dv.middleCols(h * hd, hd).noalias() = attn.transpose() * cols(dctx);
    Mat da = cols(dctx) * cols(a.v).transpose();
    if (dattn) da.row(attn_row) += dattn->row(h);
    Mat ds(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Real dot = attn.row(i).dot(da.row(i));
      ds.row(i) = attn.row(i).cwiseProduct(da.row(i).array().matrix() - RowVec::Constant(n, dot)) * scale;
    }
    dq.middleCols(h * hd, hd).noalias() = ds * cols(a.k);
    dk.middleCols(h * hd, hd).noalias() = ds.transpose() * cols(a.q);
  }
  model.apply_rope(dq, positions, /*inverse=*/true);
  model.apply_rope(dk, positions, /*inverse=*/true);
  gw.wq.noalias() += a.h1.transpose() * dq;
  gw.wk.noalias() += a.h1.transpose() * dk;
  gw.wv.noalias() += a.h1.transpose() * dv;
  Mat dh1 = dq * w.wq.transpose();
  dh1.noalias() += dk * w.wk.transpose();
  dh1.noalias() += dv * w.wv.transpose();
  return dmid + rms_backward(a.x_in, w.attn_norm, a.inv_rms1, dh1, gw.attn_norm);
}

struct LayerLayout {
  std::optional<Segment> inserted;  // SR rows added before this layer
  std::optional<Segment> removed;   // SR rows (in the previous layout) dropped before this layer
};

}  // namespace

double backbone_loss(const ToyMLLM& model, const TrainingExample& ex, ModelWeights* grads) {
  if (ex.image == nullptr) throw InvalidArgument("backbone_loss: example has no image");
  const auto& cfg = model.config();
  const ModelWeights& W = model.weights();
  const auto sys = model.system_tokens();
  const std::vector<int> gen = {ex.answer};
  const Mat patches = model.patchify(*ex.image);
  Mat vis = patches * W.patch_proj;
  vis.rowwise() += W.patch_bias.row(0);
  TokenSequence seq = TokenSequence::from_parts({{Role::System, model.embed_tokens(sys)},
                                                 {Role::Visual, vis},
                                                 {Role::Text, model.embed_tokens(ex.query)},
                                                 {Role::Generated, model.embed_tokens(gen)}});
  const auto& inj = ex.injection;
  if (inj.insert_layer >= 0 && inj.rows.cols() != cfg.d_model) {
    throw InvalidArgument("backbone_loss: injected rows have the wrong width");
  }

  std::vector<LayerActivations> acts(static_cast<std::size_t>(cfg.n_layers));
  std::vector<std::vector<int>> positions(static_cast<std::size_t>(cfg.n_layers));
  std::vector<LayerLayout> layout(static_cast<std::size_t>(cfg.n_layers));
  std::vector<int> query_row(static_cast<std::size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    auto& lay = layout[static_cast<std::size_t>(l)];
    if (l == inj.insert_layer) {
      seq.insert_segment_before(Role::Text, Role::SuperRes, inj.rows);
      seq.renumber_positions();
      lay.inserted = seq.require(Role::SuperRes);
    } else if (l == inj.remove_layer && seq.has(Role::SuperRes)) {
      lay.removed = seq.require(Role::SuperRes);
      seq.remove_segment(Role::SuperRes);
      seq.renumber_positions();
    }
    positions[static_cast<std::size_t>(l)] = seq.positions();
    query_row[static_cast<std::size_t>(l)] = seq.last_text_index();
    seq.hidden() = model.layer_forward(l, seq.hidden(), seq.positions(), acts[static_cast<std::size_t>(l)]);
  }

  Eigen::VectorXd inv_rms_final;
  const Mat hf = rms_normalize(seq.hidden(), W.final_norm, &inv_rms_final);
  const int t0 = seq.last_text_index();
  const std::array<std::pair<int, int>, 2> targets = {{{t0, ex.answer}, {t0 + 1, kEosToken}}};
  double loss = 0.0;
  Mat dhf = Mat::Zero(seq.size(), cfg.d_model);
  for (const auto& [row, target] : targets) {
    RowVec logits = hf.row(row) * W.lm_head;
    std::vector<double> lv(logits.data(), logits.data() + logits.size());
    const auto p = softmax(lv);
    loss -= std::log(std::max(p[static_cast<std::size_t>(target)], 1e-300));
    if (grads) {
      RowVec dlogits(logits.size());
      for (Eigen::Index j = 0; j < logits.size(); ++j) dlogits(j) = static_cast<Real>(p[static_cast<std::size_t>(j)] / 2.0);
      dlogits(target) -= Real(0.5);
      grads->lm_head.noalias() += hf.row(row).transpose() * dlogits;
      dhf.row(row) = dlogits * W.lm_head.transpose();
    }
  }
  loss /= 2.0;

  // Attention term. Visual rows sit at the same indices in every layout.
  const int n_sys = cfg.n_system;
  const int n_vis = cfg.n_visual();
  const int g = cfg.grid_size();
  const auto& focus = ex.focus;
  std::vector<std::optional<Mat>> dattn(static_cast<std::size_t>(cfg.n_layers));
  if (focus.quadrant >= 0 && focus.weight > 0.0) {
    if (focus.quadrant > 3) throw InvalidArgument("backbone_loss: focus quadrant must be in [0, 3]");
    std::vector<char> inside(static_cast<std::size_t>(n_vis));
    for (int j = 0; j < n_vis; ++j) {
      const int q = (2 * (j / g) / g) * 2 + 2 * (j % g) / g;
      inside[static_cast<std::size_t>(j)] = q == focus.quadrant;
    }
    const double inv_heads = 1.0 / cfg.n_heads;
    for (int l = std::max(0, focus.min_layer); l <= std::min(cfg.n_layers - 1, focus.max_layer); ++l) {
      const auto& attn = acts[static_cast<std::size_t>(l)].attn;
      const int row = query_row[static_cast<std::size_t>(l)];
      double total = 0.0, hit = 0.0;
      for (int j = 0; j < n_vis; ++j) {
        double a = 0.0;
        for (const Mat& head : attn) a += head(row, n_sys + j);
        a *= inv_heads;
        total += a;
        if (inside[static_cast<std::size_t>(j)]) hit += a;
      }
      hit = std::max(hit, 1e-300);
      loss -= focus.weight * std::log(hit / total);
      if (grads) {
        Mat d = Mat::Zero(cfg.n_heads, attn.front().cols());
        for (int j = 0; j < n_vis; ++j) {
          const double v = -focus.weight * inv_heads * ((inside[static_cast<std::size_t>(j)] ? 1.0 / hit : 0.0) - 1.0 / total);
          d.col(n_sys + j).setConstant(static_cast<Real>(v));
        }
        dattn[static_cast<std::size_t>(l)] = std::move(d);
      }
    }
  }
  if (!grads) return loss;

  Mat dx = rms_backward(seq.hidden(), W.final_norm, inv_rms_final, dhf, grads->final_norm);
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& extra = dattn[static_cast<std::size_t>(l)];
    dx = layer_backward(model, l, acts[static_cast<std::size_t>(l)], positions[static_cast<std::size_t>(l)], dx,
                        grads->layers[static_cast<std::size_t>(l)], extra ? &*extra : nullptr,
                        query_row[static_cast<std::size_t>(l)]);
    const auto& lay = layout[static_cast<std::size_t>(l)];
    if (lay.inserted) {
      const Segment s = *lay.inserted;
      Mat kept(dx.rows() - s.length, dx.cols());
      kept.topRows(s.begin) = dx.topRows(s.begin);
      kept.bottomRows(dx.rows() - s.end()) = dx.bottomRows(dx.rows() - s.end());
      dx = std::move(kept);
    } else if (lay.removed) {
      const Segment s = *lay.removed;
      Mat widened = Mat::Zero(dx.rows() + s.length, dx.cols());
      widened.topRows(s.begin) = dx.topRows(s.begin);
      widened.bottomRows(dx.rows() - s.begin) = dx.bottomRows(dx.rows() - s.begin);
      dx = std::move(widened);
    }
  }

  // Embedding and projector gradients. Layout at the input is
  // [System, Visual, Text, Generated].
  for (int i = 0; i < n_sys; ++i) grads->token_embed.row(sys[static_cast<std::size_t>(i)]) += dx.row(i);
  const Mat dvis = dx.middleRows(n_sys, n_vis);
  grads->patch_proj.noalias() += patches.transpose() * dvis;
  grads->patch_bias.row(0) += dvis.colwise().sum();
  const int text_begin = n_sys + n_vis;
  for (std::size_t i = 0; i < ex.query.size(); ++i) {
    grads->token_embed.row(ex.query[i]) += dx.row(text_begin + static_cast<int>(i));
  }
  grads->token_embed.row(ex.answer) += dx.row(text_begin + static_cast<int>(ex.query.size()));
  return loss;
}

int predict_vanilla(const ToyMLLM& model, const SceneSample& sample) {
  const PrefillResult r = model.forward_prefill(model.build_prompt(sample.image, sample.query));
  return argmax(r.logits);
}

double vanilla_accuracy(const ToyMLLM& model, std::span<const SceneSample> samples) {
  if (samples.empty()) return 0.0;
  int correct = 0;
  for (const auto& s : samples) correct += predict_vanilla(model, s) == s.answer ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

BackboneTrainReport train_backbone(ToyMLLM& model, const BackboneTrainConfig& config,
                                   std::span<const SceneSample> heldout,
                                   const std::function<void(const std::string&)>& log) {
  if (config.steps <= 0 || config.batch_size <= 0) throw InvalidArgument("train_backbone: steps and batch must be positive");
  const auto& cfg = model.config();
  Rng rng(config.seed);
  AdamW<Real> opt(AdamWOptions{0.9, 0.999, 1e-8, config.weight_decay});
  ModelWeights grads = ModelWeights::zeros(cfg);
  BackboneTrainReport report;
  std::uint64_t scene_counter = 0;

  for (int step = 1; step <= config.steps; ++step) {
    grads.set_zero();
    double batch_loss = 0.0;
    for (int b = 0; b < config.batch_size; ++b) {
      const std::uint64_t scene_seed = kTrainSeedBase + config.seed * 0x100000000ULL + scene_counter++;
      const SceneSample scene = generate_scene(scene_seed, rng.uniform_int(4));
      TrainingExample ex;
      ex.query = scene.query;
      ex.answer = scene.answer;
      ex.image = &scene.image;
      ex.focus = AttentionFocus{scene.gt_patch, config.focus_weight, config.focus_min_layer, config.focus_max_layer};
      Tensor3<float> zoomed;
      if (rng.uniform() < config.zoom_primary_prob) {
        ex.focus.quadrant = -1;
        zoomed = make_crops(scene.image, cfg.grid_size())[static_cast<std::size_t>(scene.gt_patch)].crop;
        ex.image = &zoomed;
      } else if (rng.uniform() < config.injection_prob) {
        int quadrant = scene.gt_patch;
        if (rng.uniform() >= config.injection_gt_prob) quadrant = (scene.gt_patch + 1 + rng.uniform_int(3)) % 4;
        const auto crops = make_crops(scene.image, cfg.grid_size());
        const int span = config.injection_max_layer - config.injection_min_layer + 1;
        ex.injection.insert_layer = config.injection_min_layer + rng.uniform_int(span);
        ex.injection.rows = model.visual_states(crops[static_cast<std::size_t>(quadrant)].crop, ex.injection.insert_layer);
        if (rng.uniform() < config.injection_remove_prob && ex.injection.insert_layer + 1 < cfg.n_layers) {
          ex.injection.remove_layer =
              ex.injection.insert_layer + 1 + rng.uniform_int(cfg.n_layers - ex.injection.insert_layer - 1);
        }
      }
      batch_loss += backbone_loss(model, ex, &grads);
    }
    batch_loss /= config.batch_size;
    const Real inv_batch = static_cast<Real>(1.0 / config.batch_size);
    std::vector<std::pair<std::span<Real>, std::span<const Real>>> params;
    std::vector<Mat*> grad_mats;
    grads.visit([&](const std::string&, Mat& g) { grad_mats.push_back(&g); });
    std::size_t gi = 0;
    model.mutable_weights().visit([&](const std::string&, Mat& p) {
      Mat& g = *grad_mats[gi++];
      g *= inv_batch;
      params.emplace_back(std::span<Real>(p.data(), static_cast<std::size_t>(p.size())),
                          std::span<const Real>(g.data(), static_cast<std::size_t>(g.size())));
    });
    const double lr = cosine_lr(step, config.steps, config.warmup_ratio, config.lr);
    opt.step(params, lr);
    report.curve.push_back(LossRow{step, lr, batch_loss});

    if ((config.eval_every > 0 && step % config.eval_every == 0) || step == config.steps) {
      const double acc = vanilla_accuracy(model, heldout);
      report.heldout_curve.emplace_back(step, acc);
      if (log) {
        std::ostringstream os;
        os << "step " << step << " lr " << lr << " loss " << batch_loss << " heldout_acc " << acc;
        log(os.str());
      }
    }
  }
  report.final_accuracy = report.heldout_curve.empty() ? 0.0 : report.heldout_curve.back().second;
  report.reached_target = report.final_accuracy >= config.target_accuracy;
  report.weights_digest = model.weights().digest();
  return report;
}

}  // namespace blink
