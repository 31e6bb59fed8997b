#pragma once

#include <cmath>
#include <cstdio>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "allspark/dataset.hpp"
#include "allspark/metrics.hpp"
#include "allspark/model.hpp"
#include "allspark/semantic_memory.hpp"
#include "allspark/tensor.hpp"

namespace allspark {

enum class TrainMethod { supervised, pseudo_labeling, allspark };

inline std::string to_string(TrainMethod m) {
  switch (m) {
    case TrainMethod::supervised: return "supervised";
    case TrainMethod::pseudo_labeling: return "pseudo";
    case TrainMethod::allspark: return "allspark";
  }
  return "?";
}

struct TrainConfig {
  TrainMethod method = TrainMethod::allspark;
  double lr_init = 0.05;
  std::size_t max_iterations = 600;
  std::size_t epochs = 0;  // when set, overrides max_iterations per pool size
  double poly_power = 0.9;
  double head_lr_multiplier = 5.0;
  std::size_t batch_labeled = 4;
  std::size_t batch_unlabeled = 4;
  double momentum = 0.0;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  int ignore_index = 255;
  std::size_t eval_interval = 100;
  bool augment_hflip = true;
  double capacity_multiplier = 1.0;   // memory slots hold multiplier * C
  std::size_t warmup_threshold = 0;   // 0 means "C channels"
  std::size_t max_bank_width = 0;     // 0 disables bank subsampling

  void validate() const {
    if (!(lr_init > 0)) throw config_error("lr_init must be positive");
    if (max_iterations == 0) throw config_error("max_iterations must be > 0");
    if (!(head_lr_multiplier > 0)) {
      throw config_error("head_lr_multiplier must be positive");
    }
    if (batch_labeled == 0 || batch_unlabeled == 0) {
      throw config_error("batch sizes must be positive");
    }
    if (!(capacity_multiplier > 0)) {
      throw config_error("capacity_multiplier must be positive");
    }
    if (!(poly_power > 0)) throw config_error("poly_power must be positive");
  }
};

/// lr_init * (1 - i/I)^power. Exact at the endpoints: lr(0) = lr_init,
/// lr(I) = 0. Iterations past I clamp to zero (with a one-time warning).
inline double poly_lr(double lr_init, std::size_t i, std::size_t max_iterations,
                      double power) {
  if (i > max_iterations) {
    static bool warned = false;
    if (!warned) {
      std::fprintf(stderr,
                   "warning: poly_lr iteration %zu beyond horizon %zu, "
                   "clamping lr to 0\n",
                   i, max_iterations);
      warned = true;
    }
    return 0.0;
  }
  if (i == max_iterations) return 0.0;
  if (i == 0) return lr_init;
  const double frac =
      1.0 - static_cast<double>(i) / static_cast<double>(max_iterations);
  return lr_init * std::pow(frac, power);
}

struct PseudoLabel {
  std::vector<int> classes;  // H*W argmax map
  std::size_t height = 0;
  std::size_t width = 0;
};

/// Per-pixel argmax, no confidence threshold, ties to the lowest class.
template <typename T>
PseudoLabel pseudo_label(const Prediction<T>& pred) {
  return PseudoLabel{argmax_rows(pred.probs), pred.height, pred.width};
}

template <typename T>
struct LossParts {
  Tensor<T> total;
  Tensor<T> supervised;
  std::optional<Tensor<T>> unsupervised;
};

/// Equally weighted sum of the two flow losses: mean cross-entropy of the
/// labeled predictions against ground truth plus mean cross-entropy of the
/// unlabeled predictions against their pseudo labels.
template <typename T>
LossParts<T> total_loss(Tape<T>* tape,
                        const std::vector<Prediction<T>>& pred_l,
                        const std::vector<std::vector<int>>& labels,
                        const std::vector<Prediction<T>>& pred_u,
                        const std::vector<PseudoLabel>& targets_u,
                        int ignore_index) {
  if (pred_l.size() != labels.size() || pred_u.size() != targets_u.size()) {
    throw contract_error("total_loss: prediction/target count mismatch");
  }
  std::vector<Tensor<T>> probs_l, probs_u;
  std::vector<int> flat_labels, flat_pseudo;
  for (std::size_t i = 0; i < pred_l.size(); ++i) {
    probs_l.push_back(pred_l[i].probs);
    flat_labels.insert(flat_labels.end(), labels[i].begin(), labels[i].end());
  }
  for (std::size_t j = 0; j < pred_u.size(); ++j) {
    probs_u.push_back(pred_u[j].probs);
    flat_pseudo.insert(flat_pseudo.end(), targets_u[j].classes.begin(),
                       targets_u[j].classes.end());
  }
  Tensor<T> stacked_l =
      probs_l.size() == 1 ? probs_l[0] : concat_rows(tape, probs_l);
  Tensor<T> stacked_u =
      probs_u.size() == 1 ? probs_u[0] : concat_rows(tape, probs_u);
  LossParts<T> parts;
  parts.supervised =
      cross_entropy_mean(tape, stacked_l, flat_labels, ignore_index);
  parts.unsupervised = cross_entropy_mean(tape, stacked_u, flat_pseudo);
  parts.total = add(tape, parts.supervised, *parts.unsupervised);
  return parts;
}

/// Plain SGD over named parameter groups; the head group (bottleneck and
/// decoder) trains at its own multiple of the backbone rate.
template <typename T>
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<ParamRef<T>> params, double momentum,
               double weight_decay)
      : params_(std::move(params)),
        momentum_(momentum),
        weight_decay_(weight_decay) {
    if (momentum_ != 0.0) {
      velocity_.resize(params_.size());
      for (std::size_t i = 0; i < params_.size(); ++i) {
        velocity_[i].assign(params_[i].tensor.numel(), T{0});
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  void step(double lr_backbone, double lr_head) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.tensor.has_grad()) continue;
      const T lr = static_cast<T>(
          p.group == ParamGroup::head ? lr_head : lr_backbone);
      auto w = p.tensor.values_mut();
      auto g = p.tensor.grad();
      for (std::size_t e = 0; e < w.size(); ++e) {
        T upd = g[e] + static_cast<T>(weight_decay_) * w[e];
        if (momentum_ != 0.0) {
          velocity_[i][e] =
              static_cast<T>(momentum_) * velocity_[i][e] + upd;
          upd = velocity_[i][e];
        }
        w[e] -= lr * upd;
      }
    }
  }

  const std::vector<ParamRef<T>>& params() const { return params_; }

 private:
  std::vector<ParamRef<T>> params_;
  std::vector<std::vector<T>> velocity_;
  double momentum_;
  double weight_decay_;
};

struct StepReport {
  double loss_s = 0.0;
  double loss_u = 0.0;
  double lr_backbone = 0.0;
  double lr_head = 0.0;
  std::vector<std::size_t> memory_occupancy;
};

template <typename T>
Tensor<T> image_as(const Sample& s) {
  if constexpr (std::is_same_v<T, float>) {
    return s.image;
  } else {
    std::vector<T> buf(s.image.values().begin(), s.image.values().end());
    return Tensor<T>(s.image.shape(), std::move(buf));
  }
}

inline std::vector<int> mask_as_targets(const std::vector<std::uint8_t>& mask) {
  return std::vector<int>(mask.begin(), mask.end());
}

/// One optimization step: forward both flows, derive pseudo labels from the
/// current unlabeled predictions, apply the combined objective, update with
/// the poly schedule. Pseudo labels and memory updates see detached values
/// only. A non-finite loss aborts before touching the weights.
template <typename T>
StepReport train_step(SegModel<T>& model, SemanticMemory<T>& memory,
                      SgdOptimizer<T>& opt,
                      const std::vector<Sample>& batch_l,
                      const std::vector<Sample>& batch_u,
                      const TrainConfig& cfg, std::size_t iteration,
                      Rng* bank_rng = nullptr) {
  if (iteration >= cfg.max_iterations) {
    throw contract_error("train_step iteration " + std::to_string(iteration) +
                         " outside horizon " +
                         std::to_string(cfg.max_iterations));
  }
  if (batch_l.empty()) throw contract_error("empty labeled batch");
  const double lr = poly_lr(cfg.lr_init, iteration, cfg.max_iterations,
                            cfg.poly_power);
  const double lr_head = lr * cfg.head_lr_multiplier;

  Tape<T> tape;
  opt.zero_grad();

  StepReport report;
  report.lr_backbone = lr;
  report.lr_head = lr_head;

  Tensor<T> loss;
  if (cfg.method == TrainMethod::supervised) {
    std::vector<Tensor<T>> probs;
    std::vector<int> flat_labels;
    for (const auto& s : batch_l) {
      Prediction<T> pred = model.decode(
          &tape, model.encode(&tape, image_as<T>(s), FeatureOrigin::labeled));
      probs.push_back(pred.probs);
      const auto targets = mask_as_targets(s.mask);
      flat_labels.insert(flat_labels.end(), targets.begin(), targets.end());
    }
    Tensor<T> stacked = probs.size() == 1 ? probs[0] : concat_rows(&tape, probs);
    Tensor<T> loss_s =
        cross_entropy_mean(&tape, stacked, flat_labels, cfg.ignore_index);
    report.loss_s = static_cast<double>(loss_s.item());
    loss = loss_s;
  } else {
    if (batch_u.empty()) throw contract_error("empty unlabeled batch");
    std::vector<Tensor<T>> images_l, images_u;
    std::vector<std::vector<int>> labels;
    for (const auto& s : batch_l) {
      images_l.push_back(image_as<T>(s));
      labels.push_back(mask_as_targets(s.mask));
    }
    for (const auto& s : batch_u) images_u.push_back(image_as<T>(s));
    TrainForward<T> fwd = forward_train(&tape, model, memory, images_l,
                                        images_u, cfg.max_bank_width, bank_rng);
    std::vector<PseudoLabel> pseudo;
    for (const auto& pu : fwd.unlabeled) pseudo.push_back(pseudo_label(pu));
    LossParts<T> parts = total_loss(&tape, fwd.labeled, labels, fwd.unlabeled,
                                    pseudo, cfg.ignore_index);
    report.loss_s = static_cast<double>(parts.supervised.item());
    report.loss_u = static_cast<double>(parts.unsupervised->item());
    loss = parts.total;
  }

  const double loss_value = static_cast<double>(loss.item());
  if (!std::isfinite(loss_value)) {
    throw numeric_error(
        "non-finite loss at iteration " + std::to_string(iteration) +
        ": loss_s=" + std::to_string(report.loss_s) +
        " loss_u=" + std::to_string(report.loss_u) +
        " lr=" + std::to_string(lr));
  }
  tape.backward(loss);
  opt.step(lr, lr_head);
  report.memory_occupancy = memory.occupancy();
  return report;
}

struct MetricsReport {
  MiouResult iou;
  ConfusionMatrix confusion;
};

/// Runs inference over the whole set and aggregates one global confusion
/// matrix.
template <typename T>
MetricsReport evaluate(const SegModel<T>& model,
                       const std::vector<Sample>& dataset, int ignore_index) {
  if (dataset.empty()) throw contract_error("evaluate: empty dataset");
  ConfusionMatrix cm(model.config().num_classes);
  for (const auto& s : dataset) {
    Prediction<T> pred = forward_infer(model, image_as<T>(s));
    const std::vector<int> pred_map = argmax_rows(pred.probs);
    accumulate(cm, pred_map, mask_as_targets(s.mask), ignore_index);
  }
  MetricsReport r{miou(cm), std::move(cm)};
  return r;
}

struct EvalRecord {
  std::size_t iteration = 0;
  double loss_s = 0.0;
  double loss_u = 0.0;
  double lr = 0.0;
  double miou = 0.0;
  std::vector<double> per_class;
};

struct TrainRunResult {
  std::vector<EvalRecord> evals;
  double final_miou = 0.0;
};

/// Deterministic epoch-style sampler: hands out a shuffled pool batch by
/// batch and reshuffles whenever the pool runs dry.
class BatchSampler {
 public:
  BatchSampler(std::size_t pool_size, std::uint64_t seed)
      : pool_size_(pool_size), rng_(seed) {
    refill();
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    out.reserve(batch);
    while (out.size() < batch) {
      if (cursor_ == order_.size()) refill();
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  void refill() {
    order_.resize(pool_size_);
    for (std::size_t i = 0; i < pool_size_; ++i) order_[i] = i;
    rng_.shuffle(order_);
    cursor_ = 0;
  }

  std::size_t pool_size_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  Rng rng_;
};

/// Full training run over in-memory pools. Writes one CSV row per evaluation
/// when a stream is supplied (header: iteration,loss_s,loss_u,lr,miou, then
/// per-class IoUs).
template <typename T = float>
class Trainer {
 public:
  Trainer(const ModelConfig& mcfg, const TrainConfig& tcfg)
      : model_cfg_(prepare_model_config(mcfg, tcfg)),
        train_cfg_(tcfg),
        model_(model_cfg_),
        memory_(model_cfg_.num_classes,
                std::max<std::size_t>(
                    1, static_cast<std::size_t>(tcfg.capacity_multiplier *
                                                static_cast<double>(
                                                    model_cfg_.channels))),
                model_cfg_.token_count(),
                tcfg.warmup_threshold == 0 ? model_cfg_.channels
                                           : tcfg.warmup_threshold),
        optimizer_(model_.parameters(), tcfg.momentum, tcfg.weight_decay) {
    train_cfg_.validate();
  }

  SegModel<T>& model() { return model_; }
  const SegModel<T>& model() const { return model_; }
  SemanticMemory<T>& memory() { return memory_; }
  const TrainConfig& train_config() const { return train_cfg_; }

  TrainRunResult run(const std::vector<Sample>& labeled_pool,
                     const std::vector<Sample>& unlabeled_pool,
                     const std::vector<Sample>& eval_set,
                     std::ostream* csv = nullptr) {
    if (labeled_pool.empty()) throw contract_error("no labeled samples");
    const bool needs_unlabeled = train_cfg_.method != TrainMethod::supervised;
    if (needs_unlabeled && unlabeled_pool.empty()) {
      throw contract_error("method " + to_string(train_cfg_.method) +
                           " needs unlabeled samples");
    }
    std::size_t iterations = train_cfg_.max_iterations;
    if (train_cfg_.epochs > 0) {
      const std::size_t pool =
          needs_unlabeled ? unlabeled_pool.size() : labeled_pool.size();
      const std::size_t batch = needs_unlabeled ? train_cfg_.batch_unlabeled
                                                : train_cfg_.batch_labeled;
      iterations = train_cfg_.epochs * ((pool + batch - 1) / batch);
    }
    TrainConfig cfg = train_cfg_;
    cfg.max_iterations = iterations;

    BatchSampler sampler_l(labeled_pool.size(), mix_seed(cfg.seed, 1));
    BatchSampler sampler_u(
        needs_unlabeled ? unlabeled_pool.size() : 1, mix_seed(cfg.seed, 2));
    Rng aug_rng(mix_seed(cfg.seed, 3));
    Rng bank_rng(mix_seed(cfg.seed, 4));

    if (csv) write_csv_header(*csv);
    TrainRunResult result;
    StepReport last;
    for (std::size_t i = 0; i < iterations; ++i) {
      std::vector<Sample> batch_l =
          draw(labeled_pool, sampler_l.next(cfg.batch_labeled), aug_rng);
      std::vector<Sample> batch_u;
      if (needs_unlabeled) {
        batch_u =
            draw(unlabeled_pool, sampler_u.next(cfg.batch_unlabeled), aug_rng);
      }
      last = train_step(model_, memory_, optimizer_, batch_l, batch_u, cfg, i,
                        &bank_rng);
      const bool last_step = i + 1 == iterations;
      if ((cfg.eval_interval > 0 && (i + 1) % cfg.eval_interval == 0) ||
          last_step) {
        EvalRecord rec = evaluate_now(i + 1, last, eval_set);
        if (csv) write_csv_row(*csv, rec);
        result.evals.push_back(std::move(rec));
        if (last_step) result.final_miou = result.evals.back().miou;
      }
    }
    return result;
  }

 private:
  static ModelConfig prepare_model_config(ModelConfig mcfg,
                                          const TrainConfig& tcfg) {
    mcfg.use_allspark = tcfg.method == TrainMethod::allspark;
    return mcfg;
  }

  std::vector<Sample> draw(const std::vector<Sample>& pool,
                           const std::vector<std::size_t>& idx, Rng& aug) {
    std::vector<Sample> batch;
    batch.reserve(idx.size());
    for (std::size_t i : idx) {
      const bool flip = train_cfg_.augment_hflip && aug.uniform() < 0.5;
      batch.push_back(flip ? hflip(pool[i]) : pool[i]);
    }
    return batch;
  }

  EvalRecord evaluate_now(std::size_t iteration, const StepReport& last,
                          const std::vector<Sample>& eval_set) {
    MetricsReport m = evaluate(model_, eval_set, train_cfg_.ignore_index);
    EvalRecord rec;
    rec.iteration = iteration;
    rec.loss_s = last.loss_s;
    rec.loss_u = last.loss_u;
    rec.lr = last.lr_backbone;
    rec.miou = m.iou.miou;
    rec.per_class = m.iou.per_class;
    return rec;
  }

  void write_csv_header(std::ostream& os) {
    os << "iteration,loss_s,loss_u,lr,miou";
    for (std::size_t c = 0; c < model_cfg_.num_classes; ++c) {
      os << ",iou_" << c;
    }
    os << "\n";
  }

  static void write_csv_row(std::ostream& os, const EvalRecord& rec) {
    char buf[64];
    os << rec.iteration;
    auto emit = [&](double v) {
      std::snprintf(buf, sizeof(buf), "%.6f", v);
      os << ',' << buf;
    };
    emit(rec.loss_s);
    emit(rec.loss_u);
    emit(rec.lr);
    emit(rec.miou);
    for (double v : rec.per_class) emit(std::isnan(v) ? -1.0 : v);
    os << "\n";
  }

  ModelConfig model_cfg_;
  TrainConfig train_cfg_;
  SegModel<T> model_;
  SemanticMemory<T> memory_;
  SgdOptimizer<T> optimizer_;
};

}  // namespace allspark
