#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "allspark/rng.hpp"
#include "allspark/tensor.hpp"

namespace allspark {

struct Sample {
  Tensor<float> image;             // {3, H, W}, values in [0, 1]
  std::vector<std::uint8_t> mask;  // H*W class indices
  std::string id;
};

struct SplitManifest {
  std::vector<std::string> labeled;
  std::vector<std::string> unlabeled;
  std::uint64_t seed = 0;
  double ratio = 0.0;
};

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  const double c = v * s;
  const double hp = h / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) {
    r = c, g = x;
  } else if (hp < 2) {
    r = x, g = c;
  } else if (hp < 3) {
    g = c, b = x;
  } else if (hp < 4) {
    g = x, b = c;
  } else if (hp < 5) {
    r = x, b = c;
  } else {
    r = c, b = x;
  }
  rgb[0] = r + (v - c);
  rgb[1] = g + (v - c);
  rgb[2] = b + (v - c);
}

}  // namespace detail

/// Base color of a class. Background is a dark gray; foreground classes get
/// hue-spaced colors of moderate saturation so the noise floor matters.
inline void class_base_color(std::size_t cls, std::size_t num_classes,
                             double rgb[3]) {
  if (cls == 0) {
    rgb[0] = rgb[1] = rgb[2] = 0.30;
    return;
  }
  const double hue =
      360.0 * static_cast<double>(cls - 1) / static_cast<double>(num_classes - 1);
  detail::hsv_to_rgb(hue, 0.45, 0.62, rgb);
}

/// One synthetic sample: 1-3 axis-aligned rectangles/ellipses, each from a
/// distinct non-background class, over a noisy background. Deterministic per
/// (seed, index).
inline Sample generate_sample(std::size_t index, std::size_t height,
                              std::size_t width, std::size_t num_classes,
                              std::uint64_t seed) {
  Rng rng(mix_seed(seed, index));
  const std::size_t max_shapes =
      std::min<std::size_t>(3, num_classes - 1);
  const std::size_t count = 1 + rng.uniform_index(max_shapes);

  // Distinct classes for this sample's shapes.
  std::vector<std::size_t> classes(num_classes - 1);
  for (std::size_t i = 0; i < classes.size(); ++i) classes[i] = i + 1;
  rng.shuffle(classes);
  classes.resize(count);

  std::vector<std::uint8_t> mask(height * width, 0);
  std::vector<float> img(3 * height * width);
  double bg[3];
  class_base_color(0, num_classes, bg);

  struct Blob {
    bool ellipse;
    double cy, cx, ry, rx;
    std::size_t cls;
  };
  std::vector<Blob> blobs;
  for (std::size_t s = 0; s < count; ++s) {
    Blob b;
    b.ellipse = rng.uniform() < 0.5;
    b.ry = rng.uniform(0.12, 0.32) * static_cast<double>(height);
    b.rx = rng.uniform(0.12, 0.32) * static_cast<double>(width);
    b.cy = rng.uniform(b.ry, static_cast<double>(height) - b.ry);
    b.cx = rng.uniform(b.rx, static_cast<double>(width) - b.rx);
    b.cls = classes[s];
    blobs.push_back(b);
  }
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t cls = 0;
      for (const auto& b : blobs) {  // later shapes overwrite earlier ones
        const double dy = (static_cast<double>(y) + 0.5 - b.cy) / b.ry;
        const double dx = (static_cast<double>(x) + 0.5 - b.cx) / b.rx;
        const bool inside = b.ellipse ? (dy * dy + dx * dx <= 1.0)
                                      : (std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0);
        if (inside) cls = b.cls;
      }
      mask[y * width + x] = static_cast<std::uint8_t>(cls);
    }
  }
  // Paint base colors plus per-pixel Gaussian noise, clamped to [0, 1].
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      double rgb[3];
      class_base_color(mask[y * width + x], num_classes, rgb);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = rgb[c] + rng.normal(0.0, 0.05);
        img[(c * height + y) * width + x] =
            static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  Sample out;
  out.image = Tensor<float>(Shape{3, height, width}, std::move(img));
  out.mask = std::move(mask);
  char buf[16];
  std::snprintf(buf, sizeof(buf), "s%05zu", index);
  out.id = buf;
  return out;
}

inline std::vector<Sample> generate_dataset(std::size_t n, std::size_t height,
                                            std::size_t width,
                                            std::size_t num_classes,
                                            std::uint64_t seed) {
  if (num_classes < 2) {
    throw contract_error("dataset needs >= 2 classes (0 is background)");
  }
  std::vector<Sample> set;
  set.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    set.push_back(generate_sample(i, height, width, num_classes, seed));
  }
  return set;
}

/// Seeded shuffle then prefix split. Labeled count is floor(ratio*n) with a
/// minimum of one sample.
inline SplitManifest split_dataset(const std::vector<Sample>& samples,
                                   double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw contract_error("split ratio must lie in (0, 1)");
  }
  if (samples.empty()) throw contract_error("cannot split an empty dataset");
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0x5717));
  rng.shuffle(order);
  std::size_t n_labeled = static_cast<std::size_t>(
      std::floor(ratio * static_cast<double>(samples.size())));
  n_labeled = std::max<std::size_t>(1, n_labeled);
  if (n_labeled >= samples.size()) {
    throw contract_error("split leaves no unlabeled samples");
  }
  SplitManifest m;
  m.seed = seed;
  m.ratio = ratio;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_labeled ? m.labeled : m.unlabeled)
        .push_back(samples[order[i]].id);
  }
  std::sort(m.labeled.begin(), m.labeled.end());
  std::sort(m.unlabeled.begin(), m.unlabeled.end());
  return m;
}

/// Horizontal flip of image and mask together.
inline Sample hflip(const Sample& s) {
  const auto& shape = s.image.shape();
  const std::size_t h = shape[1], w = shape[2];
  std::vector<float> img(s.image.values().begin(), s.image.values().end());
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      float* row = img.data() + (c * h + y) * w;
      std::reverse(row, row + w);
    }
  }
  std::vector<std::uint8_t> mask = s.mask;
  for (std::size_t y = 0; y < h; ++y) {
    std::reverse(mask.begin() + static_cast<std::ptrdiff_t>(y * w),
                 mask.begin() + static_cast<std::ptrdiff_t>((y + 1) * w));
  }
  return Sample{Tensor<float>(shape, std::move(img)), std::move(mask), s.id};
}

}  // namespace allspark
