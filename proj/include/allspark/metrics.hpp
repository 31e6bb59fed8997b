#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "allspark/errors.hpp"
#include "allspark/semantic_memory.hpp"

namespace allspark {

/// K x K pixel tally; rows index ground truth, columns prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes)
      : k_(num_classes), counts_(num_classes * num_classes, 0) {
    if (num_classes == 0) throw contract_error("confusion matrix needs K >= 1");
  }

  std::size_t num_classes() const { return k_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const {
    return counts_[gt * k_ + pred];
  }
  std::uint64_t& at(std::size_t gt, std::size_t pred) {
    return counts_[gt * k_ + pred];
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  /// Merging two tallies is plain addition, so parallel accumulation then
  /// merge equals serial accumulation exactly.
  void merge(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw shape_error("confusion matrix size mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) {
      counts_[i] += other.counts_[i];
    }
  }

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

/// Tally one prediction/ground-truth pair, skipping ignored pixels.
inline void accumulate(ConfusionMatrix& cm, std::span<const int> pred_map,
                       std::span<const int> gt_map, int ignore_index) {
  if (pred_map.size() != gt_map.size()) {
    throw shape_error("accumulate: prediction and ground truth differ in size");
  }
  const int k = static_cast<int>(cm.num_classes());
  for (std::size_t i = 0; i < pred_map.size(); ++i) {
    const int gt = gt_map[i];
    if (gt == ignore_index) continue;
    const int pr = pred_map[i];
    if (gt < 0 || gt >= k || pr < 0 || pr >= k) {
      throw contract_error("accumulate: class out of range at pixel " +
                           std::to_string(i) + " (gt=" + std::to_string(gt) +
                           ", pred=" + std::to_string(pr) + ")");
    }
    ++cm.at(static_cast<std::size_t>(gt), static_cast<std::size_t>(pr));
  }
}

struct MiouResult {
  double miou = 0.0;
  std::vector<double> per_class;  // NaN where the class never appears
  std::vector<bool> valid;
};

/// IoU_k = diag / (row + col - diag); classes with empty union are excluded
/// from the mean.
inline MiouResult miou(const ConfusionMatrix& cm) {
  const std::size_t k = cm.num_classes();
  MiouResult r;
  r.per_class.assign(k, std::numeric_limits<double>::quiet_NaN());
  r.valid.assign(k, false);
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::uint64_t inter = cm.at(c, c);
    const std::uint64_t uni = row + col - inter;
    if (uni == 0) continue;
    const double iou =
        static_cast<double>(inter) / static_cast<double>(uni);
    r.per_class[c] = iou;
    r.valid[c] = true;
    sum += iou;
    ++counted;
  }
  if (counted == 0) {
    throw contract_error("mIoU undefined: every class has an empty union");
  }
  r.miou = sum / static_cast<double>(counted);
  return r;
}

struct GroupingStats {
  std::vector<std::uint64_t> routed_per_class;
  std::uint64_t total = 0;
  std::optional<double> accuracy;  // set when source classes are known
};

/// Histogram of channel->class routing across a run; when the channels'
/// true source classes are known the routed fraction that matched is
/// reported as well.
inline GroupingStats grouping_stats(
    const std::vector<ChannelAssignment>& assignments,
    std::size_t num_classes,
    const std::vector<std::vector<int>>* source_classes = nullptr) {
  GroupingStats g;
  g.routed_per_class.assign(num_classes, 0);
  std::uint64_t correct = 0, scored = 0;
  for (std::size_t a = 0; a < assignments.size(); ++a) {
    const auto& asg = assignments[a];
    for (std::size_t c = 0; c < asg.channel_class.size(); ++c) {
      ++g.routed_per_class[static_cast<std::size_t>(asg.channel_class[c])];
      ++g.total;
      if (source_classes) {
        ++scored;
        if ((*source_classes)[a][c] == asg.channel_class[c]) ++correct;
      }
    }
  }
  if (source_classes && scored > 0) {
    g.accuracy = static_cast<double>(correct) / static_cast<double>(scored);
  }
  return g;
}

}  // namespace allspark
