#pragma once

#include <filesystem>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rfcl/container.hpp"
#include "rfcl/model.hpp"

namespace rfcl {

inline constexpr const char* kHeadBlocksRecord = "meta.head_blocks";

/// Encoder layers, head blocks, and the head block structure as named records.
inline std::vector<ContainerEntry> model_to_entries(const Model& model) {
  std::vector<ContainerEntry> entries;
  for (const auto& p : model.named_parameters()) {
    ContainerEntry e{p.name, {}, {}};
    for (auto d : p.tensor.shape()) e.dims.push_back(d);
    auto v = p.tensor.values();
    e.values.assign(v.begin(), v.end());
    entries.push_back(std::move(e));
  }
  ContainerEntry meta{kHeadBlocksRecord, {model.head().num_blocks()}, {}};
  for (auto s : model.head().block_sizes()) meta.values.push_back(static_cast<double>(s));
  entries.push_back(std::move(meta));
  return entries;
}

/// Free-form tag records ("meta.<key>") ride along with model records and are
/// ignored by the model parser.
inline bool is_tag_record(const std::string& name) {
  return name.starts_with("meta.") && name != kHeadBlocksRecord;
}

inline ContainerEntry text_tag(const std::string& key, std::string_view text) {
  ContainerEntry e{"meta." + key, {text.size()}, {}};
  for (unsigned char ch : text) e.values.push_back(static_cast<double>(ch));
  return e;
}

inline std::optional<std::string> find_text_tag(const std::vector<ContainerEntry>& entries, const std::string& key) {
  for (const auto& e : entries) {
    if (e.name != "meta." + key) continue;
    std::string out;
    for (double v : e.values) {
      if (!(v >= 0.0 && v <= 255.0) || v != std::floor(v)) {
        throw ContainerError(ContainerErrorKind::shape_table_mismatch, "tag '" + key + "' is not text");
      }
      out.push_back(static_cast<char>(static_cast<unsigned char>(v)));
    }
    return out;
  }
  return std::nullopt;
}

inline Model model_from_entries(const std::vector<ContainerEntry>& entries, bool requires_grad = true) {
  std::map<std::string, const ContainerEntry*> by_name;
  std::size_t tags = 0;
  for (const auto& e : entries) {
    if (is_tag_record(e.name)) {
      ++tags;
      continue;
    }
    if (!by_name.emplace(e.name, &e).second) {
      throw ContainerError(ContainerErrorKind::shape_table_mismatch, "duplicate record '" + e.name + "'");
    }
  }
  auto mismatch = [](const std::string& what) {
    return ContainerError(ContainerErrorKind::shape_table_mismatch, what);
  };
  auto tensor_of = [&](const std::string& name, std::size_t rank) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw mismatch("missing record '" + name + "'");
    const auto& e = *it->second;
    if (e.dims.size() != rank) throw mismatch("record '" + name + "' has rank " + std::to_string(e.dims.size()));
    Shape shape;
    for (auto d : e.dims) {
      if (d == 0) throw mismatch("record '" + name + "' has a zero dimension");
      shape.push_back(static_cast<std::size_t>(d));
    }
    return Tensor(shape, e.values, requires_grad);
  };

  std::vector<Linear> layers;
  for (std::size_t i = 0; by_name.count("encoder." + std::to_string(i) + ".weight"); ++i) {
    const auto prefix = "encoder." + std::to_string(i);
    layers.push_back(Linear{tensor_of(prefix + ".weight", 2), tensor_of(prefix + ".bias", 1)});
  }
  if (layers.empty()) throw mismatch("no encoder layers recorded");

  EncoderSpec spec;
  spec.input_dim = layers.front().in_dim();
  spec.hidden_dims.clear();
  for (const auto& l : layers) spec.hidden_dims.push_back(l.out_dim());

  auto meta = by_name.find(kHeadBlocksRecord);
  if (meta == by_name.end() || meta->second->dims.size() != 1) throw mismatch("missing head block structure");
  ClassifierHead head(layers.back().out_dim());
  const auto& sizes = meta->second->values;
  for (std::size_t b = 0; b < sizes.size(); ++b) {
    const auto prefix = "head." + std::to_string(b);
    Linear block{tensor_of(prefix + ".weight", 2), tensor_of(prefix + ".bias", 1)};
    if (static_cast<double>(block.out_dim()) != sizes[b] || block.bias.size() != block.out_dim() ||
        block.in_dim() != head.in_dim()) {
      throw mismatch("head block " + std::to_string(b) + " disagrees with the recorded structure");
    }
    head.append(std::move(block));
  }
  const std::size_t expected = 2 * layers.size() + 2 * sizes.size() + 1;
  if (entries.size() - tags != expected) throw mismatch("unexpected extra records in checkpoint");
  try {
    return Model::from_parts(spec, std::move(layers), std::move(head));
  } catch (const DimensionError& e) {
    throw mismatch(e.what());
  }
}

inline void save_checkpoint(const Model& model, const std::filesystem::path& path,
                            const std::vector<ContainerEntry>& tags = {}) {
  auto entries = model_to_entries(model);
  for (const auto& t : tags) {
    if (!is_tag_record(t.name)) throw DomainError("tag record '" + t.name + "' must start with 'meta.'");
    entries.push_back(t);
  }
  write_container(path, entries);
}

inline Model load_checkpoint(const std::filesystem::path& path, bool requires_grad = true) {
  return model_from_entries(read_container(path), requires_grad);
}

inline CheckpointModel load_frozen_checkpoint(const std::filesystem::path& path, std::size_t source_task) {
  return CheckpointModel(load_checkpoint(path, false), source_task);
}

}  // namespace rfcl
