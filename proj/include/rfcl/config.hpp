#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rfcl/data.hpp"
#include "rfcl/error.hpp"
#include "rfcl/trainer.hpp"

namespace rfcl {

using Json = nlohmann::ordered_json;

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | cifar | cache
  SyntheticSpec synthetic;
  std::string cifar_variant = "cifar100";
  std::vector<std::string> train_files;
  std::vector<std::string> test_files;
  std::string cache_path;
};

struct PretrainConfig {
  bool enabled = false;
  double aux_fraction = 0.5;
  std::optional<std::size_t> epochs;
  std::string encoder_path;
};

struct AnalysisConfig {
  bool cka = true;
  std::vector<std::string> cka_taps{"L-4", "L-3", "L-2", "pen", "linear"};
  std::size_t probe_size = 256;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  SplitSpec split = SplitSpec::uniform(5, 10);
  std::vector<std::size_t> hidden_dims{256, 128, 128, 64};
  MethodSpec method;
  TrainSchedule schedule;
  PretrainConfig pretrain;
  AnalysisConfig analysis;
  std::string output_dir = "runs";
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

namespace detail {

/// Reads one JSON object, tracking which keys were consumed so leftovers can
/// be reported as unknown.
class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "expected an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  const Json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <class T>
  void read(const std::string& key, T& out) {
    if (!has(key)) return;
    out = convert<T>(j_.at(key), field(key));
  }

  template <class T>
  void read(const std::string& key, std::optional<T>& out) {
    if (!has(key)) return;
    out = convert<T>(j_.at(key), field(key));
  }

  Section child(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) return Section(empty(), field(key));
    return Section(j_.at(key), field(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + field(it.key()) + "'");
    }
  }

  template <class T>
  static T convert(const Json& v, const std::string& name) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(name + ": expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(name + ": expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(name + ": expected a number");
      return v.get<T>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError(name + ": expected an integer");
      if (v.is_number_integer() && v.get<std::int64_t>() < 0) throw ConfigError(name + ": must be nonnegative");
      return static_cast<T>(v.get<std::uint64_t>());
    } else {
      if (!v.is_array()) throw ConfigError(name + ": expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(convert<typename T::value_type>(v[i], name + "[" + std::to_string(i) + "]"));
      }
      return out;
    }
  }

 private:
  static const Json& empty() {
    static const Json e = Json::object();
    return e;
  }
  std::string where() const { return path_.empty() ? "" : path_ + ": "; }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class F>
void wrap_domain(const std::string& section, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(section + ": " + e.what());
  }
}

}  // namespace detail

inline ExperimentConfig parse_config(const Json& root) {
  ExperimentConfig c;
  detail::Section top(root, "");

  {
    auto s = top.child("dataset");
    s.read("kind", c.dataset.kind);
    auto& d = c.dataset;
    if (d.kind == "synthetic") {
      s.read("num_classes", d.synthetic.num_classes);
      s.read("dim", d.synthetic.dim);
      s.read("per_class", d.synthetic.per_class);
      s.read("separation", d.synthetic.separation);
      s.read("seed", d.synthetic.seed);
      if (d.synthetic.num_classes < 2) throw ConfigError("dataset.num_classes: must be at least 2");
      if (d.synthetic.dim < 2) throw ConfigError("dataset.dim: must be at least 2");
      if (d.synthetic.per_class < 2) throw ConfigError("dataset.per_class: must be at least 2");
      if (!(d.synthetic.separation >= 0.0)) throw ConfigError("dataset.separation: must be nonnegative");
    } else if (d.kind == "cifar") {
      s.read("variant", d.cifar_variant);
      s.read("train_files", d.train_files);
      s.read("test_files", d.test_files);
      if (d.cifar_variant != "cifar10" && d.cifar_variant != "cifar100") {
        throw ConfigError("dataset.variant: expected 'cifar10' or 'cifar100'");
      }
      if (d.train_files.empty()) throw ConfigError("dataset.train_files: must list at least one file");
      if (d.test_files.empty()) throw ConfigError("dataset.test_files: must list at least one file");
    } else if (d.kind == "cache") {
      s.read("path", d.cache_path);
      if (d.cache_path.empty()) throw ConfigError("dataset.path: required for a cached dataset");
    } else {
      throw ConfigError("dataset.kind: expected 'synthetic', 'cifar' or 'cache', got '" + d.kind + "'");
    }
    s.finish();
  }

  {
    auto s = top.child("split");
    std::string kind = "uniform";
    s.read("kind", kind);
    std::uint64_t seed = 0;
    s.read("seed", seed);
    if (kind == "uniform") {
      std::size_t n = 5, per = 10;
      s.read("num_tasks", n);
      s.read("per_task", per);
      if (n == 0) throw ConfigError("split.num_tasks: must be positive");
      if (per == 0) throw ConfigError("split.per_task: must be positive");
      c.split = SplitSpec::uniform(n, per, seed);
    } else if (kind == "expansion") {
      std::size_t first = 0;
      std::vector<std::size_t> tail;
      s.read("first", first);
      s.read("tail", tail);
      if (first == 0) throw ConfigError("split.first: must be positive");
      for (auto t : tail) {
        if (t == 0) throw ConfigError("split.tail: entries must be positive");
      }
      c.split = SplitSpec::expansion(first, tail, seed);
    } else {
      throw ConfigError("split.kind: expected 'uniform' or 'expansion', got '" + kind + "'");
    }
    s.finish();
  }

  {
    auto s = top.child("model");
    s.read("hidden_dims", c.hidden_dims);
    if (c.hidden_dims.empty()) throw ConfigError("model.hidden_dims: must not be empty");
    for (auto h : c.hidden_dims) {
      if (h == 0) throw ConfigError("model.hidden_dims: widths must be positive");
    }
    s.finish();
  }

  {
    auto s = top.child("method");
    std::string name = "Naive", head = "sigmoid";
    s.read("name", name);
    s.read("head", head);
    if (head != "softmax" && head != "sigmoid") throw ConfigError("method.head: expected 'softmax' or 'sigmoid'");
    detail::wrap_domain("method.name", [&] {
      c.method = MethodSpec::from_name(name, head == "softmax" ? HeadMode::softmax : HeadMode::sigmoid);
    });
    s.read("balanced_bce", c.method.balanced_bce);
    s.read("temperature", c.method.temperature);
    s.read("freeze_old_heads", c.method.freeze_old_heads);
    s.read("featkd_taps", c.method.featkd_taps);
    auto w = s.child("weights");
    auto override_weight = [&](const char* key, double& slot) {
      if (!w.has(key)) return;
      const double v = detail::Section::convert<double>(w.raw(key), w.field(key));
      if (slot == 0.0 && v != 0.0) {
        throw ConfigError(w.field(key) + ": method '" + name + "' does not use this term");
      }
      slot = v;
    };
    override_weight("ewc", c.method.weights.ewc);
    override_weight("l2", c.method.weights.l2);
    override_weight("pred_kd", c.method.weights.pred_kd);
    override_weight("feat_kd", c.method.weights.feat_kd);
    w.finish();
    if (c.method.balanced_bce && c.method.head_mode != HeadMode::sigmoid) {
      throw ConfigError("method.balanced_bce: requires the sigmoid head");
    }
    detail::wrap_domain("method", [&] { c.method.validate(); });
    s.finish();
  }

  {
    auto s = top.child("schedule");
    auto& t = c.schedule;
    s.read("epochs", t.epochs);
    s.read("batch_size", t.batch_size);
    s.read("lr", t.lr);
    s.read("lr_decay_epochs", t.lr_decay_epochs);
    s.read("lr_decay_factor", t.lr_decay_factor);
    s.read("weight_decay", t.weight_decay);
    s.read("seed", t.seed);
    if (!(t.lr > 0.0)) throw ConfigError("schedule.lr: must be positive");
    detail::wrap_domain("schedule", [&] { t.validate(); });
    s.finish();
  }

  {
    auto s = top.child("pretrain");
    auto& p = c.pretrain;
    s.read("enabled", p.enabled);
    s.read("aux_fraction", p.aux_fraction);
    s.read("epochs", p.epochs);
    s.read("encoder_path", p.encoder_path);
    if (!(p.aux_fraction > 0.0 && p.aux_fraction < 1.0)) throw ConfigError("pretrain.aux_fraction: must lie in (0,1)");
    if (p.epochs && *p.epochs == 0) throw ConfigError("pretrain.epochs: must be positive");
    if (!p.encoder_path.empty() && !p.enabled) throw ConfigError("pretrain.encoder_path: set 'enabled' to use it");
    s.finish();
  }

  {
    auto s = top.child("analysis");
    auto& a = c.analysis;
    s.read("cka", a.cka);
    s.read("cka_taps", a.cka_taps);
    s.read("probe_size", a.probe_size);
    if (a.probe_size < 2) throw ConfigError("analysis.probe_size: must be at least 2");
    if (a.cka && a.cka_taps.empty()) throw ConfigError("analysis.cka_taps: must not be empty");
    s.finish();
  }

  top.read("output_dir", c.output_dir);
  top.read("seeds", c.seeds);
  if (c.seeds.empty()) throw ConfigError("seeds: must list at least one seed");
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size()) {
    throw ConfigError("seeds: must be distinct");
  }
  top.finish();

  // Tap names depend only on the encoder depth, so they can be checked now.
  const auto n_hidden = c.hidden_dims.size();
  auto known_tap = [&](const std::string& tap) {
    if (tap == kLinearTap) return true;
    for (std::size_t i = 0; i < n_hidden; ++i) {
      if (hidden_tap_name(i, n_hidden) == tap) return true;
    }
    return false;
  };
  for (const auto& tap : c.analysis.cka_taps) {
    if (!known_tap(tap)) throw ConfigError("analysis.cka_taps: unknown tap '" + tap + "'");
  }
  if (c.method.uses_feat_kd()) {
    for (const auto& tap : c.method.featkd_taps) {
      if (!known_tap(tap) || tap == kLinearTap) {
        throw ConfigError("method.featkd_taps: unknown encoder tap '" + tap + "'");
      }
    }
  }
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what());
  }
  return parse_config(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

/// Fully materialized config: every default written out explicitly.
inline Json resolved_json(const ExperimentConfig& c) {
  Json j;
  Json d;
  d["kind"] = c.dataset.kind;
  if (c.dataset.kind == "synthetic") {
    d["num_classes"] = c.dataset.synthetic.num_classes;
    d["dim"] = c.dataset.synthetic.dim;
    d["per_class"] = c.dataset.synthetic.per_class;
    d["separation"] = c.dataset.synthetic.separation;
    d["seed"] = c.dataset.synthetic.seed;
  } else if (c.dataset.kind == "cifar") {
    d["variant"] = c.dataset.cifar_variant;
    d["train_files"] = c.dataset.train_files;
    d["test_files"] = c.dataset.test_files;
  } else {
    d["path"] = c.dataset.cache_path;
  }
  j["dataset"] = d;

  Json s;
  if (c.split.kind == SplitSpec::Kind::uniform) {
    s["kind"] = "uniform";
    s["num_tasks"] = c.split.num_tasks;
    s["per_task"] = c.split.per_task;
  } else {
    s["kind"] = "expansion";
    s["first"] = c.split.first;
    s["tail"] = c.split.tail;
  }
  s["seed"] = c.split.seed;
  j["split"] = s;

  j["model"] = {{"hidden_dims", c.hidden_dims}};

  Json m;
  m["name"] = c.method.name;
  m["head"] = to_string(c.method.head_mode);
  m["balanced_bce"] = c.method.balanced_bce;
  m["temperature"] = c.method.temperature;
  m["freeze_old_heads"] = c.method.freeze_old_heads;
  m["featkd_taps"] = c.method.featkd_taps;
  m["weights"] = {{"ewc", c.method.weights.ewc},
                  {"l2", c.method.weights.l2},
                  {"pred_kd", c.method.weights.pred_kd},
                  {"feat_kd", c.method.weights.feat_kd}};
  j["method"] = m;

  const auto& t = c.schedule;
  j["schedule"] = {{"epochs", t.epochs},
                   {"batch_size", t.batch_size},
                   {"lr", t.lr},
                   {"lr_decay_epochs", t.lr_decay_epochs},
                   {"lr_decay_factor", t.lr_decay_factor},
                   {"weight_decay", t.weight_decay},
                   {"seed", t.seed}};

  Json p;
  p["enabled"] = c.pretrain.enabled;
  p["aux_fraction"] = c.pretrain.aux_fraction;
  p["epochs"] = c.pretrain.epochs ? Json(*c.pretrain.epochs) : Json(nullptr);
  p["encoder_path"] = c.pretrain.encoder_path;
  j["pretrain"] = p;

  j["analysis"] = {{"cka", c.analysis.cka}, {"cka_taps", c.analysis.cka_taps}, {"probe_size", c.analysis.probe_size}};
  j["output_dir"] = c.output_dir;
  j["seeds"] = c.seeds;
  return j;
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Digest of the resolved config, as 16 hex digits. The output directory is
/// excluded so relocating a run keeps its identity.
inline std::string config_digest(const ExperimentConfig& c) {
  Json j = resolved_json(c);
  j.erase("output_dir");
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << fnv1a64(j.dump());
  return os.str();
}

}  // namespace rfcl
