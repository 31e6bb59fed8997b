#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "allspark/rng.hpp"
#include "allspark/tensor.hpp"

namespace allspark {

/// Soft predictions pooled to the patch grid: one row per token, one column
/// per class, rows on the simplex.
template <typename T>
struct ProbabilityToken {
  Tensor<T> values;  // d x K

  static ProbabilityToken from_tensor(Tensor<T> t) {
    const std::size_t d = t.rows(), k = t.cols();
    auto tv = t.values();
    for (std::size_t i = 0; i < d; ++i) {
      T sum{0};
      for (std::size_t j = 0; j < k; ++j) sum += tv[i * k + j];
      if (std::abs(static_cast<double>(sum) - 1.0) > 1e-4) {
        throw contract_error("probability token row " + std::to_string(i) +
                             " sums to " + std::to_string(double(sum)));
      }
    }
    return ProbabilityToken{std::move(t)};
  }

  std::size_t token_count() const { return values.rows(); }
  std::size_t num_classes() const { return values.cols(); }
};

/// Result of channel-wise semantic grouping: a class per channel plus the
/// inverse map.
struct ChannelAssignment {
  std::vector<int> channel_class;          // length C
  std::vector<std::vector<int>> groups;    // per class, channel indices

  static ChannelAssignment from_classes(std::vector<int> classes,
                                        std::size_t num_classes) {
    ChannelAssignment a;
    a.groups.resize(num_classes);
    for (std::size_t c = 0; c < classes.size(); ++c) {
      const int cls = classes[c];
      if (cls < 0 || static_cast<std::size_t>(cls) >= num_classes) {
        throw contract_error("channel class " + std::to_string(cls) +
                             " out of range");
      }
      a.groups[static_cast<std::size_t>(cls)].push_back(static_cast<int>(c));
    }
    a.channel_class = std::move(classes);
    return a;
  }
};

/// Class-balanced FIFO store of feature channels. Each class owns a queue of
/// up to `capacity` channels; every channel is a token-length vector captured
/// as plain data (never gradient-carrying).
template <typename T>
class SemanticMemory {
 public:
  SemanticMemory(std::size_t num_classes, std::size_t capacity,
                 std::size_t token_length, std::size_t warmup_threshold)
      : num_classes_(num_classes),
        capacity_(capacity),
        token_length_(token_length),
        warmup_threshold_(warmup_threshold),
        slots_(num_classes),
        inserted_(num_classes, 0) {
    if (num_classes == 0 || capacity == 0 || token_length == 0) {
      throw contract_error("semantic memory dimensions must be positive");
    }
  }

  std::size_t num_classes() const { return num_classes_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t token_length() const { return token_length_; }
  std::size_t warmup_threshold() const { return warmup_threshold_; }

  std::size_t slot_size(std::size_t cls) const { return slots_[cls].size(); }
  std::uint64_t inserted_count(std::size_t cls) const { return inserted_[cls]; }

  std::size_t total_stored() const {
    std::size_t n = 0;
    for (const auto& s : slots_) n += s.size();
    return n;
  }

  std::vector<std::size_t> occupancy() const {
    std::vector<std::size_t> occ(num_classes_);
    for (std::size_t k = 0; k < num_classes_; ++k) occ[k] = slots_[k].size();
    return occ;
  }

  /// Oldest-first view of one class slot.
  const std::deque<std::vector<T>>& slot(std::size_t cls) const {
    return slots_[cls];
  }

  void enqueue_channel(std::size_t cls, std::vector<T> channel) {
    if (cls >= num_classes_) {
      throw contract_error("enqueue into class " + std::to_string(cls) +
                           " of " + std::to_string(num_classes_));
    }
    if (channel.size() != token_length_) {
      throw shape_error("stored channel length " +
                        std::to_string(channel.size()) + " != token length " +
                        std::to_string(token_length_));
    }
    auto& q = slots_[cls];
    q.push_back(std::move(channel));
    ++inserted_[cls];
    while (q.size() > capacity_) q.pop_front();
  }

  void clear() {
    for (auto& q : slots_) q.clear();
    std::fill(inserted_.begin(), inserted_.end(), std::uint64_t{0});
  }

  /// Invalidate on crop-size change: the stored channels' token length is
  /// only meaningful for one grid.
  void ensure_token_length(std::size_t d) {
    if (d == token_length_) return;
    token_length_ = d;
    clear();
  }

 private:
  std::size_t num_classes_;
  std::size_t capacity_;
  std::size_t token_length_;
  std::size_t warmup_threshold_;
  std::vector<std::deque<std::vector<T>>> slots_;
  std::vector<std::uint64_t> inserted_;
};

/// Similarity between each feature channel and each class: the K x C matrix
/// of inner products between probability-token columns and feature channels.
/// The raw product is the default route; the instance-normalized variant
/// (per class row) sits behind `normalize`.
template <typename T>
Tensor<T> channel_class_similarity(const Tensor<T>& feat,
                                   const ProbabilityToken<T>& ptoken,
                                   bool normalize = false) {
  if (feat.rows() != ptoken.values.rows()) {
    throw shape_error("similarity token mismatch: feature " +
                      shape_str(feat.shape()) + " vs probability token " +
                      shape_str(ptoken.values.shape()));
  }
  Tensor<T> pt = transpose<T>(nullptr, ptoken.values);  // K x d
  Tensor<T> sim = matmul<T>(nullptr, pt, feat);         // K x C
  if (normalize) sim = instance_norm_rows<T>(nullptr, sim);
  return sim;
}

/// Per channel, the class of maximal similarity; ties go to the lowest index.
template <typename T>
ChannelAssignment group_channels(const Tensor<T>& sim) {
  return ChannelAssignment::from_classes(argmax_cols(sim), sim.rows());
}

/// Appends each feature channel to its assigned class slot, evicting the
/// oldest entries beyond capacity. The feature must be detached: memory
/// contents are constants.
template <typename T>
void enqueue_grouped(SemanticMemory<T>& memory, const Tensor<T>& feat,
                     const ChannelAssignment& assignment) {
  if (feat.requires_grad()) {
    throw contract_error(
        "enqueue_grouped requires detached features; memory stores constants");
  }
  const std::size_t d = feat.rows(), c = feat.cols();
  if (assignment.channel_class.size() != c) {
    throw shape_error("assignment covers " +
                      std::to_string(assignment.channel_class.size()) +
                      " channels, feature has " + std::to_string(c));
  }
  auto fv = feat.values();
  for (std::size_t ch = 0; ch < c; ++ch) {
    std::vector<T> column(d);
    for (std::size_t t = 0; t < d; ++t) column[t] = fv[t * c + ch];
    memory.enqueue_channel(
        static_cast<std::size_t>(assignment.channel_class[ch]),
        std::move(column));
  }
}

/// Concatenates all stored channels (class order, FIFO order within a class)
/// into a d x C_bank matrix. Below the warm-up threshold the in-batch
/// fallback is returned instead. `max_width` > 0 caps the bank by uniform
/// subsampling without replacement through `rng`.
template <typename T>
Tensor<T> flatten_bank(const SemanticMemory<T>& memory,
                       const std::optional<Tensor<T>>& fallback,
                       std::size_t max_width = 0, Rng* rng = nullptr) {
  const std::size_t total = memory.total_stored();
  if (total < memory.warmup_threshold()) {
    if (!fallback.has_value()) {
      throw state_error("semantic memory holds " + std::to_string(total) +
                        " channels, below warm-up threshold " +
                        std::to_string(memory.warmup_threshold()) +
                        ", and no fallback was provided");
    }
    return *fallback;
  }
  const std::size_t d = memory.token_length();
  std::vector<const std::vector<T>*> channels;
  channels.reserve(total);
  for (std::size_t cls = 0; cls < memory.num_classes(); ++cls) {
    for (const auto& ch : memory.slot(cls)) channels.push_back(&ch);
  }
  if (max_width > 0 && channels.size() > max_width) {
    if (!rng) {
      throw contract_error("bank subsampling requested without an RNG");
    }
    // Partial Fisher-Yates: the first max_width entries become the sample.
    for (std::size_t i = 0; i < max_width; ++i) {
      const std::size_t j =
          i + static_cast<std::size_t>(rng->uniform_index(channels.size() - i));
      std::swap(channels[i], channels[j]);
    }
    channels.resize(max_width);
  }
  const std::size_t width = channels.size();
  std::vector<T> buf(d * width);
  for (std::size_t c = 0; c < width; ++c) {
    const auto& col = *channels[c];
    for (std::size_t t = 0; t < d; ++t) buf[t * width + c] = col[t];
  }
  return Tensor<T>(Shape{d, width}, std::move(buf));
}

}  // namespace allspark
