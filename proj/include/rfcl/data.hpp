#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "rfcl/container.hpp"
#include "rfcl/error.hpp"
#include "rfcl/tensor.hpp"

namespace rfcl {

/// Row-major feature matrix with one class label per row.
struct Examples {
  std::size_t dim = 0;
  std::vector<double> features;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  std::span<const double> row(std::size_t i) const { return {features.data() + i * dim, dim}; }

  void push(std::span<const double> x, std::size_t label) {
    features.insert(features.end(), x.begin(), x.end());
    labels.push_back(label);
  }

  /// Rows selected by index, in the given order.
  Examples subset(std::span<const std::size_t> rows) const {
    Examples out;
    out.dim = dim;
    out.features.reserve(rows.size() * dim);
    out.labels.reserve(rows.size());
    for (auto r : rows) out.push(row(r), labels[r]);
    return out;
  }

  /// Rows whose label is in `classes`, preserving order.
  Examples with_classes(const std::vector<std::size_t>& classes) const {
    std::set<std::size_t> keep(classes.begin(), classes.end());
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < size(); ++i) {
      if (keep.count(labels[i])) rows.push_back(i);
    }
    return subset(rows);
  }

  Tensor as_tensor() const {
    if (size() == 0) throw DimensionError("cannot build a tensor from zero examples");
    return Tensor({size(), dim}, features);
  }

  void append(const Examples& other) {
    if (dim != other.dim && size() != 0) throw DimensionError("cannot append examples of a different width");
    dim = other.dim;
    features.insert(features.end(), other.features.begin(), other.features.end());
    labels.insert(labels.end(), other.labels.begin(), other.labels.end());
  }

  friend bool operator==(const Examples&, const Examples&) = default;
};

struct Dataset {
  std::size_t num_classes = 0;
  std::size_t dim = 0;
  Examples train;
  Examples test;
  std::string provenance;

  /// Every class has a train and a test example; labels are dense.
  void validate() const {
    if (num_classes < 2) throw DomainError("dataset needs at least two classes");
    if (train.dim != dim || test.dim != dim) throw DimensionError("dataset split widths disagree");
    std::vector<std::size_t> ntrain(num_classes, 0), ntest(num_classes, 0);
    for (auto y : train.labels) {
      if (y >= num_classes) throw DomainError("train label " + std::to_string(y) + " out of range");
      ++ntrain[y];
    }
    for (auto y : test.labels) {
      if (y >= num_classes) throw DomainError("test label " + std::to_string(y) + " out of range");
      ++ntest[y];
    }
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (ntrain[c] == 0 || ntest[c] == 0) {
        throw DomainError("class " + std::to_string(c) + " lacks train or test examples");
      }
    }
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct SyntheticSpec {
  std::size_t num_classes = 50;
  std::size_t dim = 16;
  std::size_t per_class = 100;
  double separation = 6.0;
  std::uint64_t seed = 0;
};

/// Isotropic unit-variance Gaussian clusters around random unit directions
/// scaled by `separation`; 80/20 train/test per class.
inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw DomainError("synthetic data needs num_classes >= 2");
  if (spec.dim < 2) throw DomainError("synthetic data needs dim >= 2");
  if (spec.per_class < 2) throw DomainError("synthetic data needs per_class >= 2");
  if (!(spec.separation >= 0.0) || !std::isfinite(spec.separation)) {
    throw DomainError("synthetic separation must be finite and nonnegative");
  }
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.dim = spec.dim;
  ds.train.dim = ds.test.dim = spec.dim;
  ds.provenance = "synthetic:M=" + std::to_string(spec.num_classes) + ",d=" + std::to_string(spec.dim) +
                  ",n=" + std::to_string(spec.per_class) + ",sep=" + std::to_string(spec.separation) +
                  ",seed=" + std::to_string(spec.seed);

  std::vector<double> mean(spec.dim);
  std::vector<double> x(spec.dim);
  const std::size_t n_test = std::max<std::size_t>(1, spec.per_class / 5);
  const std::size_t n_train = spec.per_class - n_test;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (auto& m : mean) {
        m = normal(rng);
        norm += m * m;
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (auto& m : mean) m = m / norm * spec.separation;
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      for (std::size_t k = 0; k < spec.dim; ++k) x[k] = mean[k] + normal(rng);
      (i < n_train ? ds.train : ds.test).push(x, c);
    }
  }
  ds.validate();
  return ds;
}

// -- CIFAR binary ------------------------------------------------------------

enum class CifarVariant { cifar10, cifar100_fine };

inline constexpr std::size_t kCifarPixels = 3072;

inline std::size_t cifar_record_size(CifarVariant v) {
  return v == CifarVariant::cifar10 ? 1 + kCifarPixels : 2 + kCifarPixels;
}

inline std::size_t cifar_num_classes(CifarVariant v) { return v == CifarVariant::cifar10 ? 10 : 100; }

/// Parses raw CIFAR records. Pixels (R, G, B planes, row-major) are scaled
/// to [0,1]; for CIFAR-100 the fine label is used.
inline Examples parse_cifar_records(std::string_view bytes, CifarVariant variant) {
  const std::size_t rec = cifar_record_size(variant);
  if (bytes.size() % rec != 0) {
    const std::size_t whole = bytes.size() / rec;
    throw FormatError("cifar file length " + std::to_string(bytes.size()) + " is not a multiple of the " +
                      std::to_string(rec) + "-byte record; expected " + std::to_string((whole + 1) * rec) +
                      " bytes, incomplete record starts at byte offset " + std::to_string(whole * rec));
  }
  if (bytes.empty()) throw FormatError("cifar file is empty");
  const std::size_t label_offset = variant == CifarVariant::cifar10 ? 0 : 1;
  const std::size_t pixel_offset = variant == CifarVariant::cifar10 ? 1 : 2;
  const std::size_t classes = cifar_num_classes(variant);
  Examples out;
  out.dim = kCifarPixels;
  out.features.reserve(bytes.size() / rec * kCifarPixels);
  for (std::size_t r = 0; r * rec < bytes.size(); ++r) {
    const auto* record = reinterpret_cast<const unsigned char*>(bytes.data()) + r * rec;
    const std::size_t label = record[label_offset];
    if (label >= classes) {
      throw FormatError("cifar label " + std::to_string(label) + " out of range at byte offset " +
                        std::to_string(r * rec + label_offset));
    }
    for (std::size_t p = 0; p < kCifarPixels; ++p) out.features.push_back(record[pixel_offset + p] / 255.0);
    out.labels.push_back(label);
  }
  return out;
}

inline Examples load_cifar_binary(const std::filesystem::path& path, CifarVariant variant) {
  return parse_cifar_records(read_file_bytes(path), variant);
}

/// Combines train and test record files into a Dataset.
inline Dataset load_cifar_dataset(const std::vector<std::filesystem::path>& train_files,
                                  const std::vector<std::filesystem::path>& test_files, CifarVariant variant) {
  Dataset ds;
  ds.num_classes = cifar_num_classes(variant);
  ds.dim = kCifarPixels;
  ds.train.dim = ds.test.dim = kCifarPixels;
  for (const auto& f : train_files) ds.train.append(load_cifar_binary(f, variant));
  for (const auto& f : test_files) ds.test.append(load_cifar_binary(f, variant));
  ds.provenance = variant == CifarVariant::cifar10 ? "cifar10" : "cifar100_fine";
  ds.validate();
  return ds;
}

// -- dataset cache -------------------------------------------------------------

inline std::vector<ContainerEntry> dataset_to_entries(const Dataset& ds) {
  auto labels = [](const Examples& e) {
    return std::vector<double>(e.labels.begin(), e.labels.end());
  };
  return {
      {"meta.num_classes", {1}, {static_cast<double>(ds.num_classes)}},
      {"train.features", {ds.train.size(), ds.dim}, ds.train.features},
      {"train.labels", {ds.train.size()}, labels(ds.train)},
      {"test.features", {ds.test.size(), ds.dim}, ds.test.features},
      {"test.labels", {ds.test.size()}, labels(ds.test)},
  };
}

inline Dataset dataset_from_entries(const std::vector<ContainerEntry>& entries, std::string provenance) {
  std::map<std::string, const ContainerEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto need = [&](const char* name) -> const ContainerEntry& {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw ContainerError(ContainerErrorKind::shape_table_mismatch, std::string("dataset cache lacks ") + name);
    }
    return *it->second;
  };
  auto examples = [&](const char* feat, const char* lab) {
    const auto& f = need(feat);
    const auto& l = need(lab);
    if (f.dims.size() != 2 || l.dims.size() != 1 || f.dims[0] != l.dims[0]) {
      throw ContainerError(ContainerErrorKind::shape_table_mismatch, std::string("inconsistent ") + feat);
    }
    Examples e;
    e.dim = static_cast<std::size_t>(f.dims[1]);
    e.features = f.values;
    for (double v : l.values) e.labels.push_back(static_cast<std::size_t>(v));
    return e;
  };
  Dataset ds;
  ds.num_classes = static_cast<std::size_t>(need("meta.num_classes").values.at(0));
  ds.train = examples("train.features", "train.labels");
  ds.test = examples("test.features", "test.labels");
  ds.dim = ds.train.dim;
  ds.provenance = std::move(provenance);
  ds.validate();
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  write_container(path, dataset_to_entries(ds));
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  return dataset_from_entries(read_container(path), "cache:" + path.filename().string());
}

// -- task sequences ------------------------------------------------------------

/// Class partition schedule: uniform(num_tasks, per_task) or
/// expansion(first, tail...).
struct SplitSpec {
  enum class Kind { uniform, expansion };
  Kind kind = Kind::uniform;
  std::size_t num_tasks = 5;
  std::size_t per_task = 10;
  std::size_t first = 0;
  std::vector<std::size_t> tail;
  std::uint64_t seed = 0;

  static SplitSpec uniform(std::size_t n, std::size_t per, std::uint64_t seed = 0) {
    SplitSpec s;
    s.kind = Kind::uniform;
    s.num_tasks = n;
    s.per_task = per;
    s.seed = seed;
    return s;
  }

  static SplitSpec expansion(std::size_t first, std::vector<std::size_t> tail, std::uint64_t seed = 0) {
    SplitSpec s;
    s.kind = Kind::expansion;
    s.first = first;
    s.tail = std::move(tail);
    s.seed = seed;
    return s;
  }

  std::vector<std::size_t> sizes() const {
    if (kind == Kind::uniform) return std::vector<std::size_t>(num_tasks, per_task);
    std::vector<std::size_t> out{first};
    out.insert(out.end(), tail.begin(), tail.end());
    return out;
  }
};

/// Ordered, pairwise-disjoint class sets; task n's classes occupy head block n.
class TaskSequence {
 public:
  TaskSequence() = default;
  explicit TaskSequence(std::vector<std::vector<std::size_t>> tasks) : tasks_(std::move(tasks)) {
    std::set<std::size_t> seen;
    for (const auto& t : tasks_) {
      if (t.empty()) throw DomainError("task with no classes");
      for (auto c : t) {
        if (!seen.insert(c).second) throw DomainError("class " + std::to_string(c) + " appears in two tasks");
      }
    }
    std::size_t column = 0;
    for (const auto& t : tasks_) {
      for (auto c : t) column_of_[c] = column++;
    }
  }

  std::size_t num_tasks() const { return tasks_.size(); }
  const std::vector<std::size_t>& classes(std::size_t task) const { return tasks_.at(task); }
  const std::vector<std::vector<std::size_t>>& tasks() const { return tasks_; }

  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> out;
    for (const auto& t : tasks_) out.push_back(t.size());
    return out;
  }

  /// Logit column of a class id: its position in the concatenated task order.
  std::size_t column(std::size_t class_id) const {
    auto it = column_of_.find(class_id);
    if (it == column_of_.end()) throw DomainError("class " + std::to_string(class_id) + " is in no task");
    return it->second;
  }

  /// First logit column of `task`.
  std::size_t offset(std::size_t task) const {
    std::size_t w = 0;
    for (std::size_t i = 0; i < task; ++i) w += tasks_.at(i).size();
    return w;
  }

  std::size_t task_of(std::size_t class_id) const {
    for (std::size_t t = 0; t < tasks_.size(); ++t) {
      if (std::find(tasks_[t].begin(), tasks_[t].end(), class_id) != tasks_[t].end()) return t;
    }
    throw DomainError("class " + std::to_string(class_id) + " is in no task");
  }

  friend bool operator==(const TaskSequence& a, const TaskSequence& b) { return a.tasks_ == b.tasks_; }

 private:
  std::vector<std::vector<std::size_t>> tasks_;
  std::map<std::size_t, std::size_t> column_of_;
};

/// Shuffles class ids with the split seed and deals them out greedily.
inline TaskSequence make_task_sequence(const Dataset& dataset, const SplitSpec& spec) {
  const auto sizes = spec.sizes();
  if (sizes.empty()) throw DomainError("split schedule has no tasks");
  std::size_t total = 0;
  for (auto s : sizes) {
    if (s == 0) throw DomainError("split schedule contains an empty task");
    total += s;
  }
  if (total > dataset.num_classes) {
    throw DomainError("split schedule needs " + std::to_string(total) + " classes but the dataset has " +
                      std::to_string(dataset.num_classes));
  }
  std::vector<std::size_t> order(dataset.num_classes);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(spec.seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> tasks;
  std::size_t next = 0;
  for (auto s : sizes) {
    tasks.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(next),
                       order.begin() + static_cast<std::ptrdiff_t>(next + s));
    next += s;
  }
  return TaskSequence(std::move(tasks));
}

namespace detail {

inline Dataset restrict_classes(const Dataset& ds, const std::vector<std::size_t>& classes, const std::string& tag) {
  std::map<std::size_t, std::size_t> relabel;
  for (std::size_t i = 0; i < classes.size(); ++i) relabel[classes[i]] = i;
  auto remap = [&](const Examples& e) {
    Examples out = e.with_classes(classes);
    for (auto& y : out.labels) y = relabel.at(y);
    return out;
  };
  Dataset out;
  out.num_classes = classes.size();
  out.dim = ds.dim;
  out.train = remap(ds.train);
  out.test = remap(ds.test);
  out.provenance = ds.provenance + "|" + tag;
  out.validate();
  return out;
}

}  // namespace detail

struct AuxiliarySplit {
  Dataset auxiliary;
  Dataset continual;
  std::vector<std::size_t> auxiliary_classes;  // original ids, ascending
  std::vector<std::size_t> continual_classes;
};

/// Class-level disjoint partition for pre-training. Both sides are relabelled
/// densely in ascending order of original class id.
inline AuxiliarySplit auxiliary_split(const Dataset& dataset, double aux_fraction, std::uint64_t seed) {
  if (!(aux_fraction > 0.0 && aux_fraction < 1.0)) throw DomainError("aux_fraction must lie in (0,1)");
  const auto m = dataset.num_classes;
  const auto n_aux = static_cast<std::size_t>(std::llround(aux_fraction * static_cast<double>(m)));
  if (n_aux < 2 || m - std::min(n_aux, m) < 2) {
    throw DomainError("aux_fraction " + std::to_string(aux_fraction) + " leaves fewer than two classes on one side");
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  AuxiliarySplit out;
  out.auxiliary_classes.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_aux));
  out.continual_classes.assign(order.begin() + static_cast<std::ptrdiff_t>(n_aux), order.end());
  std::sort(out.auxiliary_classes.begin(), out.auxiliary_classes.end());
  std::sort(out.continual_classes.begin(), out.continual_classes.end());
  out.auxiliary = detail::restrict_classes(dataset, out.auxiliary_classes, "aux");
  out.continual = detail::restrict_classes(dataset, out.continual_classes, "continual");
  return out;
}

}  // namespace rfcl
