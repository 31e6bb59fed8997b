#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "allspark/attention.hpp"
#include "allspark/rng.hpp"
#include "allspark/semantic_memory.hpp"
#include "allspark/tensor.hpp"

namespace allspark {

struct ModelConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t patch = 8;
  std::size_t channels = 16;
  std::size_t depth = 2;
  std::size_t num_classes = 4;
  std::size_t num_heads = 1;
  std::size_t expansion = 1;
  bool attention_residual = false;
  bool use_allspark = true;
  std::uint64_t seed = 0;

  std::size_t grid_h() const { return height / patch; }
  std::size_t grid_w() const { return width / patch; }
  std::size_t token_count() const { return grid_h() * grid_w(); }

  void validate() const {
    if (num_classes < 2) throw config_error("num_classes must be >= 2");
    if (patch == 0 || height % patch != 0 || width % patch != 0) {
      throw config_error("image " + std::to_string(height) + "x" +
                         std::to_string(width) +
                         " not divisible by patch size " +
                         std::to_string(patch));
    }
    if (channels == 0 || depth == 0) {
      throw config_error("channels and depth must be positive");
    }
    if (use_allspark && grid_h() != grid_w()) {
      throw config_error(
          "the bottleneck's probability token needs a square patch grid; got " +
          std::to_string(grid_h()) + "x" + std::to_string(grid_w()));
    }
  }
};

/// Per-pixel prediction. Rows are pixels in row-major (y, x) order.
template <typename T>
struct Prediction {
  Tensor<T> logits;  // (H*W) x K
  Tensor<T> probs;   // (H*W) x K, rows on the simplex
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t num_classes() const { return probs.cols(); }
};

enum class ParamGroup { backbone, head };

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T> tensor;
  ParamGroup group;
};

/// Rearranges a {3, H, W} image into a (d x 3*p*p) patch matrix. Token t
/// walks the grid row-major; within a token the layout is channel-major,
/// then patch row, then patch column. Constant w.r.t. the tape.
template <typename T>
Tensor<T> image_to_patches(const Tensor<T>& image, const ModelConfig& cfg) {
  if (image.rank() != 3 || image.shape()[0] != 3 ||
      image.shape()[1] != cfg.height || image.shape()[2] != cfg.width) {
    throw shape_error("image shape " + shape_str(image.shape()) +
                      " does not match configured [3x" +
                      std::to_string(cfg.height) + "x" +
                      std::to_string(cfg.width) + "]");
  }
  const std::size_t p = cfg.patch, gh = cfg.grid_h(), gw = cfg.grid_w();
  const std::size_t d = gh * gw, pw = 3 * p * p;
  auto iv = image.values();
  std::vector<T> buf(d * pw);
  for (std::size_t gy = 0; gy < gh; ++gy) {
    for (std::size_t gx = 0; gx < gw; ++gx) {
      T* row = buf.data() + (gy * gw + gx) * pw;
      std::size_t idx = 0;
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t py = 0; py < p; ++py) {
          const std::size_t y = gy * p + py;
          for (std::size_t px = 0; px < p; ++px) {
            row[idx++] = iv[(c * cfg.height + y) * cfg.width + gx * p + px];
          }
        }
      }
    }
  }
  return Tensor<T>(Shape{d, pw}, std::move(buf));
}

/// Desk-scale segmentation network: linear patch embedding, a stack of
/// token-mixing blocks, the channel-attention bottleneck, and a per-token
/// linear classifier decoded to full resolution.
template <typename T>
class SegModel {
 public:
  explicit SegModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    const std::size_t pw = 3 * cfg_.patch * cfg_.patch;
    patch_w_ = uniform_init(rng, pw, cfg_.channels);
    patch_b_ = Tensor<T>::zeros(Shape{cfg_.channels}, true);
    blocks_.resize(cfg_.depth);
    for (auto& b : blocks_) {
      b.w = uniform_init(rng, cfg_.channels, cfg_.channels);
      b.b = Tensor<T>::zeros(Shape{cfg_.channels}, true);
    }
    attn_ = AttentionParams<T>::init(cfg_.channels, cfg_.num_heads,
                                     cfg_.expansion, rng,
                                     cfg_.attention_residual);
    dec_w_ = uniform_init(rng, cfg_.channels, cfg_.num_classes);
    dec_b_ = Tensor<T>::zeros(Shape{cfg_.num_classes}, true);
    const std::size_t d = cfg_.token_count();
    mix_ = Tensor<T>::full(Shape{d, d}, T{1} / static_cast<T>(d));
  }

  const ModelConfig& config() const { return cfg_; }
  AttentionParams<T>& attention() { return attn_; }
  const AttentionParams<T>& attention() const { return attn_; }

  FeatureMap<T> encode(Tape<T>* tape, const Tensor<T>& image,
                       FeatureOrigin origin) const {
    Tensor<T> patches = image_to_patches(image, cfg_);
    Tensor<T> x = add_row_bias(tape, matmul(tape, patches, patch_w_), patch_b_);
    for (const auto& blk : blocks_) {
      Tensor<T> a =
          tanh_act(tape, add_row_bias(tape, matmul(tape, x, blk.w), blk.b));
      // Token-mean mixing: every token also sees the grid average.
      x = add(tape, a, matmul(tape, mix_, a));
    }
    return FeatureMap<T>{std::move(x), origin};
  }

  Prediction<T> decode(Tape<T>* tape, const FeatureMap<T>& feat) const {
    Tensor<T> tok_logits =
        add_row_bias(tape, matmul(tape, feat.tokens, dec_w_), dec_b_);
    Tensor<T> logits = bilinear_upsample(tape, tok_logits, cfg_.grid_h(),
                                         cfg_.grid_w(), cfg_.height, cfg_.width);
    Tensor<T> probs = softmax_rows(tape, logits);
    return Prediction<T>{std::move(logits), std::move(probs), cfg_.height,
                         cfg_.width};
  }

  std::vector<ParamRef<T>> parameters() {
    std::vector<ParamRef<T>> ps;
    ps.push_back({"encoder.patch_w", patch_w_, ParamGroup::backbone});
    ps.push_back({"encoder.patch_b", patch_b_, ParamGroup::backbone});
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      ps.push_back({"encoder.block" + std::to_string(i) + ".w", blocks_[i].w,
                    ParamGroup::backbone});
      ps.push_back({"encoder.block" + std::to_string(i) + ".b", blocks_[i].b,
                    ParamGroup::backbone});
    }
    if (cfg_.use_allspark) {
      ps.push_back({"attn.w_q", attn_.w_q, ParamGroup::head});
      ps.push_back({"attn.w_k", attn_.w_k, ParamGroup::head});
      ps.push_back({"attn.w_v", attn_.w_v, ParamGroup::head});
      ps.push_back({"attn.w_out", attn_.w_out, ParamGroup::head});
    }
    ps.push_back({"decoder.w", dec_w_, ParamGroup::head});
    ps.push_back({"decoder.b", dec_b_, ParamGroup::head});
    return ps;
  }

 private:
  struct Block {
    Tensor<T> w, b;
  };

  static Tensor<T> uniform_init(Rng& rng, std::size_t rows, std::size_t cols) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
    std::vector<T> buf(rows * cols);
    for (auto& v : buf) v = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>(Shape{rows, cols}, std::move(buf), true);
  }

  ModelConfig cfg_;
  Tensor<T> patch_w_, patch_b_;
  std::vector<Block> blocks_;
  AttentionParams<T> attn_;
  Tensor<T> dec_w_, dec_b_;
  Tensor<T> mix_;
};

/// Pools the per-pixel probabilities down to the sqrt(d) x sqrt(d) patch
/// grid. Average pooling keeps every row on the simplex.
template <typename T>
ProbabilityToken<T> probability_token(const Prediction<T>& pred,
                                      std::size_t token_count) {
  const auto side = static_cast<std::size_t>(
      std::llround(std::sqrt(static_cast<double>(token_count))));
  if (side * side != token_count) {
    throw config_error("probability token needs a square grid; " +
                       std::to_string(token_count) + " tokens");
  }
  if (pred.height % side != 0 || pred.width % side != 0) {
    throw config_error("prediction " + std::to_string(pred.height) + "x" +
                       std::to_string(pred.width) +
                       " does not pool evenly to " + std::to_string(side) +
                       "x" + std::to_string(side));
  }
  Tensor<T> pooled = avgpool_grid<T>(nullptr, pred.probs.detach(), pred.height,
                                     pred.width, side, side);
  return ProbabilityToken<T>::from_tensor(std::move(pooled));
}

template <typename T>
struct TrainForward {
  std::vector<Prediction<T>> labeled;
  std::vector<Prediction<T>> unlabeled;
  std::vector<ProbabilityToken<T>> ptokens;
  std::vector<ChannelAssignment> assignments;
};

/// One training-step forward over a batch: encode both flows, run the
/// bottleneck (labeled crossing into the memory bank, unlabeled refined by
/// self-attention), decode, then route this step's unlabeled channels into
/// the memory. The memory update uses detached tensors only and happens
/// after all loss-relevant outputs exist.
template <typename T>
TrainForward<T> forward_train(Tape<T>* tape, SegModel<T>& model,
                              SemanticMemory<T>& memory,
                              const std::vector<Tensor<T>>& labeled_images,
                              const std::vector<Tensor<T>>& unlabeled_images,
                              std::size_t max_bank_width = 0,
                              Rng* rng = nullptr) {
  if (labeled_images.empty() || unlabeled_images.empty()) {
    throw contract_error("forward_train requires non-empty batches");
  }
  const ModelConfig& cfg = model.config();
  std::vector<FeatureMap<T>> feats_l, feats_u;
  feats_l.reserve(labeled_images.size());
  feats_u.reserve(unlabeled_images.size());
  for (const auto& img : labeled_images) {
    feats_l.push_back(model.encode(tape, img, FeatureOrigin::labeled));
  }
  for (const auto& img : unlabeled_images) {
    feats_u.push_back(model.encode(tape, img, FeatureOrigin::unlabeled));
  }

  TrainForward<T> out;
  if (cfg.use_allspark) {
    memory.ensure_token_length(cfg.token_count());
    std::vector<Tensor<T>> unlabeled_tokens;
    for (const auto& f : feats_u) unlabeled_tokens.push_back(f.tokens);
    Tensor<T> fallback = unlabeled_tokens.size() == 1
                             ? unlabeled_tokens[0]
                             : concat_cols(tape, unlabeled_tokens);
    Tensor<T> bank = flatten_bank(
        memory, std::optional<Tensor<T>>(std::move(fallback)), max_bank_width,
        rng);
    for (auto& f : feats_l) {
      out.labeled.push_back(
          model.decode(tape, channel_cross_attention(tape, f, bank,
                                                     model.attention())));
    }
    for (auto& f : feats_u) {
      out.unlabeled.push_back(model.decode(
          tape, channel_self_attention(tape, f, model.attention())));
    }
  } else {
    for (auto& f : feats_l) out.labeled.push_back(model.decode(tape, f));
    for (auto& f : feats_u) out.unlabeled.push_back(model.decode(tape, f));
  }

  if (cfg.use_allspark) {
    for (std::size_t j = 0; j < feats_u.size(); ++j) {
      ProbabilityToken<T> pt =
          probability_token(out.unlabeled[j], cfg.token_count());
      Tensor<T> raw = feats_u[j].tokens.detach();
      ChannelAssignment asg =
          group_channels(channel_class_similarity(raw, pt));
      enqueue_grouped(memory, raw, asg);
      out.ptokens.push_back(std::move(pt));
      out.assignments.push_back(std::move(asg));
    }
  }
  return out;
}

/// Inference path: encode, self-attention bottleneck, decode. No memory, no
/// grouping; a pure function of (image, parameters).
template <typename T>
Prediction<T> forward_infer(const SegModel<T>& model, const Tensor<T>& image) {
  FeatureMap<T> feat =
      model.encode(nullptr, image, FeatureOrigin::inference);
  if (model.config().use_allspark) {
    feat = channel_self_attention<T>(nullptr, feat, model.attention());
  }
  return model.decode(nullptr, feat);
}

}  // namespace allspark
