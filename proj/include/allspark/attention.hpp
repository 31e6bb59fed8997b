#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "allspark/rng.hpp"
#include "allspark/semantic_memory.hpp"
#include "allspark/tensor.hpp"

namespace allspark {

enum class FeatureOrigin { labeled, unlabeled, inference };

/// Hidden feature h: d patch tokens by C channels.
template <typename T>
struct FeatureMap {
  Tensor<T> tokens;  // d x C
  FeatureOrigin origin = FeatureOrigin::labeled;

  std::size_t token_count() const { return tokens.rows(); }
  std::size_t channel_count() const { return tokens.cols(); }
};

/// Projection weights of the bottleneck. The projected width is
/// C' = expansion_factor * C, partitioned evenly across heads.
template <typename T>
struct AttentionParams {
  Tensor<T> w_q;    // C x C'
  Tensor<T> w_k;    // C x C'
  Tensor<T> w_v;    // C x C'
  Tensor<T> w_out;  // C' x C
  std::size_t num_heads = 1;
  std::size_t expansion_factor = 1;
  bool residual = false;
  T norm_eps = static_cast<T>(1e-5);

  std::size_t channels() const { return w_q.rows(); }
  std::size_t projected() const { return w_q.cols(); }

  void validate() const {
    const std::size_t c = w_q.rows();
    const std::size_t cp = c * expansion_factor;
    if (expansion_factor == 0 || num_heads == 0) {
      throw contract_error("expansion factor and head count must be positive");
    }
    auto expect = [&](const Tensor<T>& w, std::size_t r, std::size_t col,
                      const char* name) {
      if (w.rows() != r || w.cols() != col) {
        throw shape_error(std::string(name) + " has shape " +
                          shape_str(w.shape()) + ", expected [" +
                          std::to_string(r) + "x" + std::to_string(col) + "]");
      }
    };
    expect(w_q, c, cp, "w_q");
    expect(w_k, c, cp, "w_k");
    expect(w_v, c, cp, "w_v");
    expect(w_out, cp, c, "w_out");
    if (cp % num_heads != 0) {
      throw contract_error("projected width " + std::to_string(cp) +
                           " not divisible by " + std::to_string(num_heads) +
                           " heads");
    }
  }

  /// Zero-mean uniform init with bound 1 / sqrt(C), seeded.
  static AttentionParams init(std::size_t channels, std::size_t num_heads,
                              std::size_t expansion_factor, Rng& rng,
                              bool residual = false) {
    const std::size_t cp = channels * expansion_factor;
    const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
    auto make = [&](std::size_t r, std::size_t c) {
      std::vector<T> buf(r * c);
      for (auto& v : buf) v = static_cast<T>(rng.uniform(-bound, bound));
      return Tensor<T>(Shape{r, c}, std::move(buf), true);
    };
    AttentionParams p;
    p.w_q = make(channels, cp);
    p.w_k = make(channels, cp);
    p.w_v = make(channels, cp);
    p.w_out = make(cp, channels);
    p.num_heads = num_heads;
    p.expansion_factor = expansion_factor;
    p.residual = residual;
    p.validate();
    return p;
  }

  /// Identity projections for algebraic tests (expansion 1 only).
  static AttentionParams identity(std::size_t channels,
                                  std::size_t num_heads = 1) {
    auto eye = [&]() {
      std::vector<T> buf(channels * channels, T{0});
      for (std::size_t i = 0; i < channels; ++i) buf[i * channels + i] = T{1};
      return Tensor<T>(Shape{channels, channels}, std::move(buf), false);
    };
    AttentionParams p;
    p.w_q = eye();
    p.w_k = eye();
    p.w_v = eye();
    p.w_out = eye();
    p.num_heads = num_heads;
    p.expansion_factor = 1;
    return p;
  }
};

namespace detail {

/// Shared attention core. For every head: similarity of projected query
/// channels against the head's key channels, instance-normalized per query
/// channel and soft-maxed over the key axis, then applied to the value
/// channels. Heads concatenate back to width C' before the output map.
template <typename T>
Tensor<T> channel_attention_core(Tape<T>* tape, const Tensor<T>& query_tokens,
                                 const std::vector<Tensor<T>>& key_banks,
                                 const std::vector<Tensor<T>>& value_banks,
                                 const AttentionParams<T>& params) {
  params.validate();
  const std::size_t heads = params.num_heads;
  const std::size_t cp = params.projected();
  const std::size_t head_width = cp / heads;
  Tensor<T> q = matmul(tape, query_tokens, params.w_q);  // d x C'
  std::vector<Tensor<T>> head_outputs;
  head_outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor<T> qh = heads == 1
                       ? q
                       : slice_cols(tape, q, h * head_width, (h + 1) * head_width);
    Tensor<T> sim = matmul(tape, transpose(tape, qh), key_banks[h]);
    Tensor<T> weights =
        softmax_rows(tape, instance_norm_rows(tape, sim, params.norm_eps));
    Tensor<T> mixed = matmul(tape, weights, transpose(tape, value_banks[h]));
    head_outputs.push_back(transpose(tape, mixed));  // d x head_width
  }
  Tensor<T> merged =
      heads == 1 ? head_outputs[0] : concat_cols(tape, head_outputs);
  Tensor<T> out = matmul(tape, merged, params.w_out);
  if (params.residual) out = add(tape, out, query_tokens);
  return out;
}

template <typename T>
std::vector<Tensor<T>> split_heads(Tape<T>* tape, const Tensor<T>& x,
                                   std::size_t heads) {
  if (heads == 1) return {x};
  const std::size_t w = x.cols() / heads;
  std::vector<Tensor<T>> parts;
  parts.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    parts.push_back(slice_cols(tape, x, h * w, (h + 1) * w));
  }
  return parts;
}

}  // namespace detail

/// Reconstructs the query feature from an external channel bank. The bank's
/// channels serve directly as the key and value channels (they replace the
/// k/v terms of the self-attention formula), so the output is exactly
/// invariant under any joint permutation of bank channels and the bank may
/// have any width >= 1.
template <typename T>
FeatureMap<T> channel_cross_attention(Tape<T>* tape,
                                      const FeatureMap<T>& query_feat,
                                      const Tensor<T>& bank,
                                      const AttentionParams<T>& params) {
  if (bank.rows() != query_feat.tokens.rows()) {
    throw shape_error("bank token length " + std::to_string(bank.rows()) +
                      " != query token length " +
                      std::to_string(query_feat.tokens.rows()));
  }
  std::vector<Tensor<T>> banks(params.num_heads, bank);
  Tensor<T> out = detail::channel_attention_core(tape, query_feat.tokens,
                                                 banks, banks, params);
  return FeatureMap<T>{std::move(out), query_feat.origin};
}

/// Channel-wise self-attention: the feature's own tokens are projected into
/// key and value channels (k = h w_k, v = h w_v) and fed through the same
/// attention core as the cross path.
template <typename T>
FeatureMap<T> channel_self_attention(Tape<T>* tape, const FeatureMap<T>& feat,
                                     const AttentionParams<T>& params) {
  Tensor<T> k = matmul(tape, feat.tokens, params.w_k);
  Tensor<T> v = matmul(tape, feat.tokens, params.w_v);
  auto key_banks = detail::split_heads(tape, k, params.num_heads);
  auto value_banks = detail::split_heads(tape, v, params.num_heads);
  Tensor<T> out = detail::channel_attention_core(tape, feat.tokens, key_banks,
                                                 value_banks, params);
  return FeatureMap<T>{std::move(out), feat.origin};
}

enum class AllSparkMode { train, infer };

template <typename T>
struct AllSparkOutput {
  FeatureMap<T> labeled;
  std::optional<FeatureMap<T>> unlabeled;
};

/// The bottleneck forward. In training the labeled feature is rebuilt from
/// the semantic-memory bank (or, before warm-up, from the in-batch unlabeled
/// tokens) while the unlabeled feature is refined by self-attention. At
/// inference the memory is out of the circuit entirely and the single input
/// passes through self-attention.
template <typename T>
AllSparkOutput<T> allspark_forward(Tape<T>* tape, const FeatureMap<T>& labeled,
                                   const std::optional<FeatureMap<T>>& unlabeled,
                                   const SemanticMemory<T>& memory,
                                   const AttentionParams<T>& params,
                                   AllSparkMode mode,
                                   std::size_t max_bank_width = 0,
                                   Rng* rng = nullptr) {
  if (mode == AllSparkMode::infer) {
    if (unlabeled.has_value()) {
      throw contract_error("inference takes a single feature map");
    }
    return {channel_self_attention(tape, labeled, params), std::nullopt};
  }
  if (!unlabeled.has_value()) {
    throw contract_error("training requires labeled and unlabeled features");
  }
  // Stored channels are constants; the warm-up fallback keeps its gradient
  // path, matching the formula the bank stands in for.
  Tensor<T> bank =
      flatten_bank(memory, std::optional<Tensor<T>>(unlabeled->tokens),
                   max_bank_width, rng);
  FeatureMap<T> reborn = channel_cross_attention(tape, labeled, bank, params);
  FeatureMap<T> refined = channel_self_attention(tape, *unlabeled, params);
  return {std::move(reborn), std::move(refined)};
}

}  // namespace allspark
