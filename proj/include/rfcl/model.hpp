#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rfcl/adam.hpp"
#include "rfcl/error.hpp"
#include "rfcl/fisher.hpp"
#include "rfcl/tape.hpp"
#include "rfcl/tensor.hpp"

namespace rfcl {

using Rng = std::mt19937_64;

/// MLP encoder widths. Every hidden layer is followed by ReLU.
struct EncoderSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims{256, 128, 128, 64};

  void validate() const {
    if (input_dim == 0) throw DimensionError("encoder input_dim must be positive");
    if (hidden_dims.empty()) throw DimensionError("encoder needs at least one hidden layer");
    for (auto d : hidden_dims) {
      if (d == 0) throw DimensionError("encoder hidden widths must be positive");
    }
  }

  friend bool operator==(const EncoderSpec&, const EncoderSpec&) = default;
};

/// Affine map y = x W + b with W stored as [in x out].
struct Linear {
  Tensor weight;
  Tensor bias;

  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }

  static Linear uniform(std::size_t in, std::size_t out, Rng& rng, bool requires_grad) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> w(in * out), b(out);
    for (auto& v : w) v = dist(rng);
    for (auto& v : b) v = dist(rng);
    return Linear{Tensor({in, out}, std::move(w), requires_grad), Tensor({out}, std::move(b), requires_grad)};
  }

  Linear clone(bool requires_grad) const { return Linear{weight.clone(requires_grad), bias.clone(requires_grad)}; }

  Tensor apply(Tape& tape, const Tensor& x) const { return tape.add(tape.matmul(x, weight), bias); }
};

/// The single expanding classifier: one block of output units per task, in
/// task order. Logit columns are the concatenation of the blocks.
class ClassifierHead {
 public:
  ClassifierHead() = default;
  explicit ClassifierHead(std::size_t in_dim) : in_dim_(in_dim) {}

  std::size_t in_dim() const { return in_dim_; }
  std::size_t num_blocks() const { return blocks_.size(); }
  std::size_t width() const {
    std::size_t w = 0;
    for (const auto& b : blocks_) w += b.out_dim();
    return w;
  }
  std::vector<std::size_t> block_sizes() const {
    std::vector<std::size_t> out;
    for (const auto& b : blocks_) out.push_back(b.out_dim());
    return out;
  }
  /// First logit column of block `index`; index == num_blocks() gives width().
  std::size_t offset(std::size_t index) const {
    if (index > blocks_.size()) throw DimensionError("head block index out of range");
    std::size_t w = 0;
    for (std::size_t i = 0; i < index; ++i) w += blocks_[i].out_dim();
    return w;
  }

  const std::vector<Linear>& blocks() const { return blocks_; }
  std::vector<Linear>& blocks() { return blocks_; }

  void append(Linear block) {
    if (block.in_dim() != in_dim_) {
      throw DimensionError("head block input width " + std::to_string(block.in_dim()) +
                           " does not match " + std::to_string(in_dim_));
    }
    blocks_.push_back(std::move(block));
  }

 private:
  std::size_t in_dim_ = 0;
  std::vector<Linear> blocks_;
};

using TapSet = std::vector<std::string>;

struct ForwardResult {
  Tensor logits;
  std::map<std::string, Tensor> activations;
};

/// Name of hidden layer `index` (0-based) among `count`, counted from the
/// back: the last hidden layer is "pen", the one before it "L-2", and so on.
inline std::string hidden_tap_name(std::size_t index, std::size_t count) {
  const std::size_t from_back = count - index;
  return from_back == 1 ? std::string("pen") : "L-" + std::to_string(from_back);
}

inline constexpr const char* kLinearTap = "linear";

class Model {
 public:
  Model() = default;

  Model(EncoderSpec spec, Rng& rng) : spec_(std::move(spec)) {
    spec_.validate();
    std::size_t in = spec_.input_dim;
    for (auto width : spec_.hidden_dims) {
      layers_.push_back(Linear::uniform(in, width, rng, true));
      in = width;
    }
    head_ = ClassifierHead(in);
  }

  /// Assembles a model from existing parameters; used by checkpoint loading.
  static Model from_parts(EncoderSpec spec, std::vector<Linear> layers, ClassifierHead head) {
    spec.validate();
    if (layers.size() != spec.hidden_dims.size()) throw DimensionError("layer count does not match encoder spec");
    std::size_t in = spec.input_dim;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].in_dim() != in || layers[i].out_dim() != spec.hidden_dims[i] ||
          layers[i].bias.size() != layers[i].out_dim()) {
        throw DimensionError("encoder layer " + std::to_string(i) + " has inconsistent shape");
      }
      in = layers[i].out_dim();
    }
    if (head.in_dim() != in) throw DimensionError("head input width does not match last hidden width");
    Model m;
    m.spec_ = std::move(spec);
    m.layers_ = std::move(layers);
    m.head_ = std::move(head);
    m.trainable_ = m.layers_.front().weight.requires_grad();
    return m;
  }

  const EncoderSpec& spec() const { return spec_; }
  const ClassifierHead& head() const { return head_; }
  const std::vector<Linear>& layers() const { return layers_; }
  std::size_t num_classes() const { return head_.width(); }

  std::vector<std::string> tap_names() const {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < layers_.size(); ++i) names.push_back(hidden_tap_name(i, layers_.size()));
    names.emplace_back(kLinearTap);
    return names;
  }

  bool has_tap(const std::string& name) const {
    const auto names = tap_names();
    return std::find(names.begin(), names.end(), name) != names.end();
  }

  /// Logits over every head block plus post-ReLU activations at `taps`.
  ForwardResult forward(Tape& tape, const Tensor& x, const TapSet& taps = {}) const {
    if (x.rank() != 2 || x.cols() != spec_.input_dim) {
      throw DimensionError("input width mismatch: expected " + std::to_string(spec_.input_dim) + " columns, got " +
                           shape_string(x.shape()));
    }
    for (const auto& t : taps) {
      if (!has_tap(t)) throw DimensionError("unknown tap '" + t + "'");
    }
    auto wanted = [&](const std::string& name) { return std::find(taps.begin(), taps.end(), name) != taps.end(); };

    ForwardResult result;
    Tensor h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = tape.relu(layers_[i].apply(tape, h));
      const auto name = hidden_tap_name(i, layers_.size());
      if (wanted(name)) result.activations[name] = h;
    }
    if (head_.num_blocks() == 0) {
      if (wanted(kLinearTap)) throw DimensionError("model has no head blocks to tap");
      result.logits = Tensor();
      return result;
    }
    std::vector<Tensor> parts;
    parts.reserve(head_.num_blocks());
    for (const auto& block : head_.blocks()) parts.push_back(block.apply(tape, h));
    result.logits = tape.concat_cols(parts);
    if (wanted(kLinearTap)) result.activations[kLinearTap] = result.logits;
    return result;
  }

  /// Appends a head block of `new_classes` units initialized uniformly in
  /// +-1/sqrt(fan_in). Existing blocks are left untouched.
  void expand_head(std::size_t new_classes, Rng& rng) {
    if (new_classes == 0) throw DomainError("expand_head needs at least one new class");
    head_.append(Linear::uniform(head_.in_dim(), new_classes, rng, trainable_));
  }

  /// Stable parameter names: encoder.<i>.{weight,bias}, head.<b>.{weight,bias}.
  std::vector<NamedTensor> named_parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      out.push_back({"encoder." + std::to_string(i) + ".weight", layers_[i].weight});
      out.push_back({"encoder." + std::to_string(i) + ".bias", layers_[i].bias});
    }
    for (std::size_t b = 0; b < head_.num_blocks(); ++b) {
      out.push_back({"head." + std::to_string(b) + ".weight", head_.blocks()[b].weight});
      out.push_back({"head." + std::to_string(b) + ".bias", head_.blocks()[b].bias});
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : named_parameters()) n += p.tensor.size();
    return n;
  }

  /// Deep copy with fresh storage.
  Model clone(bool requires_grad) const {
    Model m;
    m.spec_ = spec_;
    m.trainable_ = requires_grad;
    for (const auto& l : layers_) m.layers_.push_back(l.clone(requires_grad));
    m.head_ = ClassifierHead(head_.in_dim());
    for (const auto& b : head_.blocks()) m.head_.append(b.clone(requires_grad));
    return m;
  }

  void set_trainable(bool flag) {
    trainable_ = flag;
    for (auto& p : named_parameters()) p.tensor.set_requires_grad(flag);
  }

  void set_head_block_trainable(std::size_t block, bool flag) {
    auto& b = head_.blocks().at(block);
    b.weight.set_requires_grad(flag);
    b.bias.set_requires_grad(flag);
  }

  /// Copies encoder parameter values from `source` (shapes must agree).
  void load_encoder_from(const Model& source) {
    if (source.spec_ != spec_) throw DimensionError("encoder architecture mismatch when loading encoder");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto w = layers_[i].weight.values();
      auto b = layers_[i].bias.values();
      auto sw = source.layers_[i].weight.values();
      auto sb = source.layers_[i].bias.values();
      std::copy(sw.begin(), sw.end(), w.begin());
      std::copy(sb.begin(), sb.end(), b.begin());
    }
  }

  void zero_grad() {
    for (auto& p : named_parameters()) {
      if (p.tensor.requires_grad()) p.tensor.zero_grad();
    }
  }

 private:
  EncoderSpec spec_;
  std::vector<Linear> layers_;
  ClassifierHead head_;
  bool trainable_ = true;
};

/// 64-bit FNV-1a over the raw bytes of every parameter, in name order.
inline std::uint64_t parameter_digest(const Model& model) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : model.named_parameters()) {
    mix(p.name.data(), p.name.size());
    auto v = p.tensor.values();
    mix(v.data(), v.size() * sizeof(double));
  }
  return h;
}

/// Frozen deep copy of a model taken at the end of a task. Its parameters
/// carry no gradient slots and are reachable only through const access.
class CheckpointModel {
 public:
  CheckpointModel(const Model& source, std::size_t source_task) : model_(source.clone(false)), source_task_(source_task) {}

  /// Task index whose training produced these parameters.
  std::size_t source_task() const { return source_task_; }
  const Model& model() const { return model_; }

  ForwardResult forward(const Tensor& x, const TapSet& taps = {}) const {
    Tape tape = Tape::inference();
    return model_.forward(tape, x, taps);
  }

  const std::optional<FisherDiagonal>& fisher() const { return fisher_; }

  void attach_fisher(FisherDiagonal fisher) {
    for (const auto& p : model_.named_parameters()) {
      const auto* entry = fisher.find(p.name);
      if (!entry || entry->size() != p.tensor.size()) {
        throw DimensionError("fisher diagonal is not congruent with checkpoint parameter '" + p.name + "'");
      }
    }
    fisher_ = std::move(fisher);
  }

 private:
  Model model_;
  std::size_t source_task_ = 0;
  std::optional<FisherDiagonal> fisher_;
};

inline CheckpointModel freeze_checkpoint(const Model& model, std::size_t source_task = 0) {
  return CheckpointModel(model, source_task);
}

inline CheckpointModel freeze_checkpoint(const CheckpointModel& checkpoint) {
  CheckpointModel copy(checkpoint.model(), checkpoint.source_task());
  if (checkpoint.fisher()) copy.attach_fisher(*checkpoint.fisher());
  return copy;
}

}  // namespace rfcl
