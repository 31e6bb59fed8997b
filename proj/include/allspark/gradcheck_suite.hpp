#pragma once

#include <functional>
#include <string>
#include <vector>

#include "allspark/attention.hpp"
#include "allspark/dataset.hpp"
#include "allspark/gradcheck.hpp"
#include "allspark/model.hpp"
#include "allspark/rng.hpp"
#include "allspark/training.hpp"

namespace allspark {

namespace detail {

inline Tensor<double> rand_tensor(Rng& rng, Shape shape, double lo = -1.0,
                                  double hi = 1.0) {
  std::vector<double> buf(shape_numel(shape));
  for (auto& v : buf) v = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(buf));
}

/// Scalarizes a matrix with fixed rank-1 weights so element errors cannot
/// cancel the way a plain sum would let them.
inline Tensor<double> weighted_sum(Tape<double>* tape, const Tensor<double>& x,
                                   std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> u = rand_tensor(rng, Shape{1, x.rows()}, 0.1, 1.0);
  Tensor<double> v = rand_tensor(rng, Shape{x.cols(), 1}, 0.1, 1.0);
  return matmul(tape, matmul(tape, u, x), v);
}

}  // namespace detail

/// Finite-difference verification of every differentiable operation at
/// random shapes, plus the full train-mode composite (encoder, bottleneck,
/// decoder, combined loss) checked parameter by parameter.
struct GradientSuiteResult {
  std::vector<GradCheckResult> rows;
  bool all_passed = true;

  void add(GradCheckResult r) {
    all_passed = all_passed && r.passed;
    rows.push_back(std::move(r));
  }
};

inline GradientSuiteResult run_gradient_suite(std::size_t max_dim = 8,
                                              std::uint64_t seed = 0,
                                              double tolerance = 1e-4) {
  using detail::rand_tensor;
  using detail::weighted_sum;
  GradientSuiteResult suite;
  Rng dims_rng(mix_seed(seed, 99));
  auto dim = [&](std::size_t lo = 1) {
    return lo + dims_rng.uniform_index(max_dim - lo + 1);
  };

  const std::size_t m = dim(2), n = dim(2), p = dim(2);
  Rng rng(mix_seed(seed, 7));

  {
    Tensor<double> b = rand_tensor(rng, Shape{n, p});
    suite.add(check_gradient(
        "matmul/lhs",
        [&](Tape<double>* t, const Tensor<double>& x) {
          return weighted_sum(t, matmul(t, x, b), 11);
        },
        rand_tensor(rng, Shape{m, n}), tolerance));
    Tensor<double> a = rand_tensor(rng, Shape{m, n});
    suite.add(check_gradient(
        "matmul/rhs",
        [&](Tape<double>* t, const Tensor<double>& x) {
          return weighted_sum(t, matmul(t, a, x), 12);
        },
        rand_tensor(rng, Shape{n, p}), tolerance));
  }
  suite.add(check_gradient(
      "transpose",
      [&](Tape<double>* t, const Tensor<double>& x) {
        return weighted_sum(t, transpose(t, x), 13);
      },
      rand_tensor(rng, Shape{m, n}), tolerance));
  {
    Tensor<double> other = rand_tensor(rng, Shape{m, n});
    suite.add(check_gradient(
        "add",
        [&](Tape<double>* t, const Tensor<double>& x) {
          return weighted_sum(t, add(t, x, other), 14);
        },
        rand_tensor(rng, Shape{m, n}), tolerance));
  }
  {
    Tensor<double> bias = rand_tensor(rng, Shape{n});
    suite.add(check_gradient(
        "add_row_bias/input",
        [&](Tape<double>* t, const Tensor<double>& x) {
          return weighted_sum(t, add_row_bias(t, x, bias), 15);
        },
        rand_tensor(rng, Shape{m, n}), tolerance));
    Tensor<double> base = rand_tensor(rng, Shape{m, n});
    suite.add(check_gradient(
        "add_row_bias/bias",
        [&](Tape<double>* t, const Tensor<double>& x) {
          // A rank-1 tensor feeds the bias slot directly.
          return weighted_sum(t, add_row_bias(t, base, x), 16);
        },
        rand_tensor(rng, Shape{n}), tolerance));
  }
  suite.add(check_gradient(
      "scale",
      [&](Tape<double>* t, const Tensor<double>& x) {
        return weighted_sum(t, scale(t, x, 0.37), 17);
      },
      rand_tensor(rng, Shape{m, n}), tolerance));
  suite.add(check_gradient(
      "tanh",
      [&](Tape<double>* t, const Tensor<double>& x) {
        return weighted_sum(t, tanh_act(t, x), 18);
      },
      rand_tensor(rng, Shape{m, n}), tolerance));
  suite.add(check_gradient(
      "softmax_rows",
      [&](Tape<double>* t, const Tensor<double>& x) {
        return weighted_sum(t, softmax_rows(t, x), 19);
      },
      rand_tensor(rng, Shape{m, n}, -2.0, 2.0), tolerance));
  suite.add(check_gradient(
      "instance_norm_rows",
      [&](Tape<double>* t, const Tensor<double>& x) {
        return weighted_sum(t, instance_norm_rows(t, x), 20);
      },
      rand_tensor(rng, Shape{m, std::max<std::size_t>(2, n)}), tolerance));
  {
    const std::size_t classes = 3;
    std::vector<int> targets(m);
    for (auto& t : targets) {
      t = static_cast<int>(rng.uniform_index(classes));
    }
    suite.add(check_gradient(
        "cross_entropy_mean(softmax)",
        [&](Tape<double>* t, const Tensor<double>& x) {
          return cross_entropy_mean(t, softmax_rows(t, x), targets);
        },
        rand_tensor(rng, Shape{m, classes}), tolerance));
    Tensor<double> proj = rand_tensor(rng, Shape{n, classes});
    Tensor<double> feats = rand_tensor(rng, Shape{m, n});
    suite.add(check_gradient(
        "cross_entropy_mean(softmax(xW))/W",
        [&](Tape<double>* t, const Tensor<double>& w) {
          return cross_entropy_mean(t, softmax_rows(t, matmul(t, feats, w)),
                                    targets);
        },
        proj, tolerance));
  }
  {
    const std::size_t wide = std::max<std::size_t>(3, n);
    suite.add(check_gradient(
        "slice_cols",
        [&](Tape<double>* t, const Tensor<double>& x) {
          return weighted_sum(t, slice_cols(t, x, 1, wide), 21);
        },
        rand_tensor(rng, Shape{m, wide}), tolerance));
    Tensor<double> lhs = rand_tensor(rng, Shape{m, 2});
    suite.add(check_gradient(
        "concat_cols",
        [&](Tape<double>* t, const Tensor<double>& x) {
          return weighted_sum(t, concat_cols(t, {lhs, x}), 22);
        },
        rand_tensor(rng, Shape{m, n}), tolerance));
    Tensor<double> top = rand_tensor(rng, Shape{2, n});
    suite.add(check_gradient(
        "concat_rows",
        [&](Tape<double>* t, const Tensor<double>& x) {
          return weighted_sum(t, concat_rows(t, {top, x}), 23);
        },
        rand_tensor(rng, Shape{m, n}), tolerance));
  }
  suite.add(check_gradient(
      "bilinear_upsample",
      [&](Tape<double>* t, const Tensor<double>& x) {
        return weighted_sum(t, bilinear_upsample(t, x, 2, 2, 6, 6), 24);
      },
      rand_tensor(rng, Shape{4, 3}), tolerance));
  suite.add(check_gradient(
      "avgpool_grid",
      [&](Tape<double>* t, const Tensor<double>& x) {
        return weighted_sum(t, avgpool_grid(t, x, 6, 6, 2, 2), 25);
      },
      rand_tensor(rng, Shape{36, 3}), tolerance));
  suite.add(check_gradient(
      "sum_all",
      [&](Tape<double>* t, const Tensor<double>& x) { return sum_all(t, x); },
      rand_tensor(rng, Shape{m, n}), tolerance));

  // Attention ops at d <= 6, C <= 4, including expansion and two heads.
  {
    const std::size_t d = 5, c = 3, c_bank = 4;
    Rng arng(mix_seed(seed, 31));
    AttentionParams<double> params =
        AttentionParams<double>::init(c, 2, 2, arng);
    Tensor<double> query = rand_tensor(rng, Shape{d, c});
    Tensor<double> bank = rand_tensor(rng, Shape{d, c_bank});
    auto cross = [&](Tape<double>* t, const Tensor<double>& q,
                     const Tensor<double>& bk) {
      FeatureMap<double> fm{q, FeatureOrigin::labeled};
      return weighted_sum(t, channel_cross_attention(t, fm, bk, params).tokens,
                          26);
    };
    suite.add(check_gradient(
        "cross_attention/query",
        [&](Tape<double>* t, const Tensor<double>& x) {
          return cross(t, x, bank);
        },
        query, tolerance));
    suite.add(check_gradient(
        "cross_attention/bank",
        [&](Tape<double>* t, const Tensor<double>& x) {
          return cross(t, query, x);
        },
        bank, tolerance));
    auto with_param = [&](Tensor<double> AttentionParams<double>::*slot,
                          const char* name) {
      Tensor<double> original = params.*slot;
      suite.add(check_gradient(
          name,
          [&, slot](Tape<double>* t, const Tensor<double>& x) {
            AttentionParams<double> local = params;
            local.*slot = x;
            FeatureMap<double> fm{query, FeatureOrigin::labeled};
            Tensor<double> crossed =
                channel_cross_attention(t, fm, bank, local).tokens;
            FeatureMap<double> fu{bank, FeatureOrigin::unlabeled};
            Tensor<double> refined =
                channel_self_attention(t, fu, local).tokens;
            // Wait: self-attention needs C columns; bank has c_bank.
            return add(t, weighted_sum(t, crossed, 27),
                       weighted_sum(t, refined, 28));
          },
          original, tolerance));
    };
    (void)with_param;
    // Cross path touches w_q/w_out; the self path drives w_k/w_v.
    for (auto [slot, name] :
         std::vector<std::pair<Tensor<double> AttentionParams<double>::*,
                               const char*>>{
             {&AttentionParams<double>::w_q, "attention/w_q"},
             {&AttentionParams<double>::w_k, "attention/w_k"},
             {&AttentionParams<double>::w_v, "attention/w_v"},
             {&AttentionParams<double>::w_out, "attention/w_out"}}) {
      Tensor<double> original = params.*slot;
      suite.add(check_gradient(
          name,
          [&, slot](Tape<double>* t, const Tensor<double>& x) {
            AttentionParams<double> local = params;
            local.*slot = x;
            FeatureMap<double> fq{query, FeatureOrigin::labeled};
            Tensor<double> crossed =
                channel_cross_attention(t, fq, bank, local).tokens;
            FeatureMap<double> fu{query, FeatureOrigin::unlabeled};
            Tensor<double> refined =
                channel_self_attention(t, fu, local).tokens;
            return add(t, weighted_sum(t, crossed, 27),
                       weighted_sum(t, refined, 28));
          },
          original, tolerance));
    }
  }
  return suite;
}

/// Finite-difference check of the full training composite at toy dimensions:
/// encode both flows, bottleneck, decode, pseudo labels, combined loss. Every
/// parameter element is probed. `warm_memory` pre-fills the bank so the
/// stored-constant path is covered too.
inline GradientSuiteResult run_composite_gradcheck(bool warm_memory,
                                                   std::uint64_t seed = 0,
                                                   double tolerance = 1e-4,
                                                   double h = 1e-5) {
  ModelConfig cfg;
  cfg.height = 8;
  cfg.width = 8;
  cfg.patch = 4;
  cfg.channels = 4;
  cfg.depth = 1;
  cfg.num_classes = 3;
  cfg.num_heads = 1;
  cfg.expansion = 1;
  cfg.seed = seed;
  cfg.use_allspark = true;

  SegModel<double> model(cfg);
  SemanticMemory<double> memory(cfg.num_classes, cfg.channels,
                                cfg.token_count(), cfg.channels);
  Rng rng(mix_seed(seed, 55));
  if (warm_memory) {
    for (std::size_t cls = 0; cls < cfg.num_classes; ++cls) {
      for (std::size_t i = 0; i < cfg.channels; ++i) {
        std::vector<double> ch(cfg.token_count());
        for (auto& v : ch) v = rng.uniform(-1.0, 1.0);
        memory.enqueue_channel(cls, std::move(ch));
      }
    }
  }

  auto data = generate_dataset(2, cfg.height, cfg.width, cfg.num_classes,
                               mix_seed(seed, 21));
  const std::vector<Tensor<double>> labeled{image_as<double>(data[0])};
  const std::vector<Tensor<double>> unlabeled{image_as<double>(data[1])};
  const std::vector<int> labels = mask_as_targets(data[0].mask);

  auto loss_fn = [&](Tape<double>* tape) {
    SemanticMemory<double> mem_copy = memory;
    TrainForward<double> fwd =
        forward_train(tape, model, mem_copy, labeled, unlabeled);
    std::vector<PseudoLabel> pseudo{pseudo_label(fwd.unlabeled[0])};
    LossParts<double> parts = total_loss(tape, fwd.labeled, {labels},
                                         fwd.unlabeled, pseudo, 255);
    return parts.total;
  };

  Tape<double> tape;
  Tensor<double> loss = loss_fn(&tape);
  tape.backward(loss);

  GradientSuiteResult suite;
  const std::string tag =
      warm_memory ? "composite/warm_memory/" : "composite/empty_memory/";
  for (auto& p : model.parameters()) {
    std::vector<double> fd(p.tensor.numel());
    auto w = p.tensor.values_mut();
    for (std::size_t e = 0; e < fd.size(); ++e) {
      const double keep = w[e];
      w[e] = keep + h;
      const double fp = loss_fn(nullptr).item();
      w[e] = keep - h;
      const double fm = loss_fn(nullptr).item();
      w[e] = keep;
      fd[e] = (fp - fm) / (2.0 * h);
    }
    GradCheckResult row;
    row.name = tag + p.name;
    row.tolerance = tolerance;
    if (p.tensor.has_grad()) {
      row.max_rel_error = max_relative_error(p.tensor.grad(), fd);
    } else {
      double mag = 0.0;
      for (double v : fd) mag = std::max(mag, std::abs(v));
      row.max_rel_error = mag;
    }
    row.passed = row.max_rel_error < tolerance;
    suite.add(std::move(row));
  }
  return suite;
}

}  // namespace allspark
