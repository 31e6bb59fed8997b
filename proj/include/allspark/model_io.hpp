#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "allspark/model.hpp"
#include "allspark/semantic_memory.hpp"
#include "allspark/serialize.hpp"

namespace allspark {

namespace detail {

inline RawTensor encode_model_config(const ModelConfig& cfg) {
  std::vector<std::int32_t> v{
      static_cast<std::int32_t>(cfg.height),
      static_cast<std::int32_t>(cfg.width),
      static_cast<std::int32_t>(cfg.patch),
      static_cast<std::int32_t>(cfg.channels),
      static_cast<std::int32_t>(cfg.depth),
      static_cast<std::int32_t>(cfg.num_classes),
      static_cast<std::int32_t>(cfg.num_heads),
      static_cast<std::int32_t>(cfg.expansion),
      cfg.attention_residual ? 1 : 0,
      cfg.use_allspark ? 1 : 0,
  };
  return raw_from_i32(Shape{v.size()}, v);
}

inline ModelConfig decode_model_config(const RawTensor& raw) {
  const auto v = detail::from_le_bytes<std::int32_t>(raw.bytes);
  if (raw.dtype != Dtype::i32 || v.size() != 10) {
    throw format_error("malformed model-config entry in checkpoint");
  }
  ModelConfig cfg;
  cfg.height = static_cast<std::size_t>(v[0]);
  cfg.width = static_cast<std::size_t>(v[1]);
  cfg.patch = static_cast<std::size_t>(v[2]);
  cfg.channels = static_cast<std::size_t>(v[3]);
  cfg.depth = static_cast<std::size_t>(v[4]);
  cfg.num_classes = static_cast<std::size_t>(v[5]);
  cfg.num_heads = static_cast<std::size_t>(v[6]);
  cfg.expansion = static_cast<std::size_t>(v[7]);
  cfg.attention_residual = v[8] != 0;
  cfg.use_allspark = v[9] != 0;
  return cfg;
}

}  // namespace detail

/// Serializes model parameters (optionally with the semantic-memory
/// contents) into a checkpoint container ready for save_checkpoint.
template <typename T>
Checkpoint checkpoint_from_model(SegModel<T>& model,
                                 const SemanticMemory<T>* memory = nullptr) {
  Checkpoint ck;
  ck.add("meta/model_config", detail::encode_model_config(model.config()));
  for (const auto& p : model.parameters()) {
    ck.add("param/" + p.name, raw_from_tensor(p.tensor));
  }
  if (memory) {
    std::vector<std::int32_t> meta{
        static_cast<std::int32_t>(memory->num_classes()),
        static_cast<std::int32_t>(memory->capacity()),
        static_cast<std::int32_t>(memory->token_length()),
        static_cast<std::int32_t>(memory->warmup_threshold()),
    };
    ck.add("memory/meta", raw_from_i32(Shape{meta.size()}, meta));
    for (std::size_t cls = 0; cls < memory->num_classes(); ++cls) {
      const auto& slot = memory->slot(cls);
      if (slot.empty()) continue;
      const std::size_t d = memory->token_length();
      std::vector<T> buf;
      buf.reserve(slot.size() * d);
      for (const auto& ch : slot) buf.insert(buf.end(), ch.begin(), ch.end());
      Tensor<T> t(Shape{slot.size(), d}, std::move(buf));
      ck.add("memory/slot" + std::to_string(cls), raw_from_tensor(t));
    }
  }
  return ck;
}

/// Rebuilds a model from a checkpoint. Every parameter entry must be present
/// with the exact stored shape.
template <typename T>
SegModel<T> model_from_checkpoint(const Checkpoint& ck) {
  const RawTensor* meta = ck.find("meta/model_config");
  if (!meta) throw format_error("checkpoint lacks meta/model_config");
  SegModel<T> model(detail::decode_model_config(*meta));
  for (auto& p : model.parameters()) {
    const RawTensor* stored = ck.find("param/" + p.name);
    if (!stored) {
      throw format_error("checkpoint lacks parameter " + p.name);
    }
    Tensor<T> loaded = tensor_from_raw<T>(*stored);
    if (loaded.shape() != p.tensor.shape()) {
      throw format_error("parameter " + p.name + " has shape " +
                         shape_str(loaded.shape()) + ", expected " +
                         shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.values_mut();
    auto src = loaded.values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return model;
}

/// Restores semantic-memory contents dumped by checkpoint_from_model.
/// Returns nothing when the checkpoint carries no memory section.
template <typename T>
std::optional<SemanticMemory<T>> memory_from_checkpoint(const Checkpoint& ck) {
  const RawTensor* meta = ck.find("memory/meta");
  if (!meta) return std::nullopt;
  const auto v = detail::from_le_bytes<std::int32_t>(meta->bytes);
  if (meta->dtype != Dtype::i32 || v.size() != 4) {
    throw format_error("malformed memory/meta entry in checkpoint");
  }
  SemanticMemory<T> mem(static_cast<std::size_t>(v[0]),
                        static_cast<std::size_t>(v[1]),
                        static_cast<std::size_t>(v[2]),
                        static_cast<std::size_t>(v[3]));
  for (std::size_t cls = 0; cls < mem.num_classes(); ++cls) {
    const RawTensor* slot = ck.find("memory/slot" + std::to_string(cls));
    if (!slot) continue;
    Tensor<T> t = tensor_from_raw<T>(*slot);
    const std::size_t d = mem.token_length();
    if (t.rank() != 2 || t.cols() != d) {
      throw format_error("memory slot " + std::to_string(cls) +
                         " has shape " + shape_str(t.shape()));
    }
    auto tv = t.values();
    for (std::size_t rrow = 0; rrow < t.rows(); ++rrow) {
      std::vector<T> ch(tv.begin() + static_cast<std::ptrdiff_t>(rrow * d),
                        tv.begin() + static_cast<std::ptrdiff_t>((rrow + 1) * d));
      mem.enqueue_channel(cls, std::move(ch));
    }
  }
  return mem;
}

}  // namespace allspark
