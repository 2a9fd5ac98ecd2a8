#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rfcl/checkpoint.hpp"
#include "rfcl/cka.hpp"
#include "rfcl/config.hpp"
#include "rfcl/container.hpp"
#include "rfcl/data.hpp"
#include "rfcl/metrics.hpp"
#include "rfcl/trainer.hpp"

namespace rfcl {

namespace fs = std::filesystem;

inline constexpr const char* kOutputRootEnv = "RFCL_OUTPUT_ROOT";

/// Raised when a run would overwrite existing artifacts without --force.
class ArtifactsExist : public Error {
 public:
  using Error::Error;
};

/// Raised when report/cka inputs are missing files; names every one.
class IncompleteArtifacts : public Error {
 public:
  using Error::Error;
};

inline std::string checkpoint_file_name(std::size_t task) { return "ckpt_task_" + std::to_string(task + 1) + ".bin"; }

inline fs::path output_root(const ExperimentConfig& c) {
  if (const char* env = std::getenv(kOutputRootEnv); env && *env) return fs::path(env);
  return fs::path(c.output_dir);
}

inline Dataset load_experiment_dataset(const DatasetConfig& d) {
  if (d.kind == "synthetic") return generate_synthetic(d.synthetic);
  if (d.kind == "cache") return load_dataset(d.cache_path);
  std::vector<fs::path> train(d.train_files.begin(), d.train_files.end());
  std::vector<fs::path> test(d.test_files.begin(), d.test_files.end());
  return load_cifar_dataset(train, test, d.cifar_variant == "cifar10" ? CifarVariant::cifar10 : CifarVariant::cifar100_fine);
}

inline ExperimentSpec experiment_spec(const ExperimentConfig& c) {
  ExperimentSpec e;
  e.split = c.split;
  e.hidden_dims = c.hidden_dims;
  e.method = c.method;
  e.schedule = c.schedule;
  e.pretrain.enabled = c.pretrain.enabled;
  e.pretrain.aux_fraction = c.pretrain.aux_fraction;
  e.pretrain.epochs = c.pretrain.epochs;
  if (c.pretrain.enabled && !c.pretrain.encoder_path.empty()) {
    e.pretrain.encoder = load_checkpoint(c.pretrain.encoder_path, false);
  }
  e.cka_taps = c.analysis.cka_taps;
  e.probe_size = c.analysis.probe_size;
  e.compute_cka = c.analysis.cka;
  return e;
}

// -- text formats --------------------------------------------------------------

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void write_text(const fs::path& path, const std::string& text) { atomic_write(path, text); }

inline std::string read_text(const fs::path& path) {
  try {
    return read_file_bytes(path);
  } catch (const ContainerError&) {
    throw IncompleteArtifacts("missing " + path.string());
  }
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

}  // namespace detail

/// One row per (row task i, task n): i,n,task_size,test_count,local,global.
inline std::string accuracy_matrix_csv(const AccuracyMatrix& m) {
  std::ostringstream os;
  os << "i,n,task_size,test_count,local,global\n";
  for (std::size_t i = 0; i < m.num_tasks(); ++i) {
    for (std::size_t n = 0; n <= i; ++n) {
      os << (i + 1) << ',' << (n + 1) << ',' << m.task_sizes()[n] << ',' << m.test_counts()[n] << ','
         << detail::fmt(m.local(i, n)) << ',' << detail::fmt(m.global(i, n)) << '\n';
    }
  }
  return os.str();
}

inline AccuracyMatrix parse_accuracy_matrix_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "i,n,task_size,test_count,local,global") {
    throw FormatError("accuracy matrix CSV has an unexpected header");
  }
  struct Row {
    std::size_t i, n, size, count;
    double local, global;
  };
  std::vector<Row> rows;
  std::size_t N = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != 6) throw FormatError("accuracy matrix CSV row has " + std::to_string(cells.size()) + " cells");
    try {
      Row r{std::stoul(cells[0]), std::stoul(cells[1]), std::stoul(cells[2]), std::stoul(cells[3]),
            std::stod(cells[4]), std::stod(cells[5])};
      if (r.i == 0 || r.n == 0 || r.n > r.i) throw FormatError("accuracy matrix CSV index out of range");
      N = std::max(N, r.i);
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw FormatError("accuracy matrix CSV has a non-numeric cell: " + line);
    }
  }
  if (N == 0) throw FormatError("accuracy matrix CSV is empty");
  std::vector<std::size_t> sizes(N, 0), counts(N, 0);
  for (const auto& r : rows) {
    sizes[r.n - 1] = r.size;
    counts[r.n - 1] = r.count;
  }
  AccuracyMatrix m(sizes, counts);
  for (const auto& r : rows) m.set(r.i - 1, r.n - 1, r.local, r.global);
  if (!m.complete()) throw FormatError("accuracy matrix CSV is missing entries");
  return m;
}

inline Json metrics_json(const MetricsReport& r) {
  Json j;
  j["final_accuracy"] = r.final_accuracy;
  j["global_forgetting"] = r.global_forgetting ? Json(*r.global_forgetting) : Json(nullptr);
  j["local_forgetting"] = r.local_forgetting ? Json(*r.local_forgetting) : Json(nullptr);
  return j;
}

inline std::string step_log_header() { return "task,epoch,step,lr,total,cls,pred_kd,feat_kd,ewc,l2\n"; }

inline std::string step_log_line(const StepRecord& s) {
  std::ostringstream os;
  os << (s.task + 1) << ',' << (s.epoch + 1) << ',' << s.step << ',' << detail::fmt(s.lr) << ','
     << detail::fmt(s.total) << ',' << detail::fmt(s.cls) << ',' << detail::fmt(s.pred_kd) << ','
     << detail::fmt(s.feat_kd) << ',' << detail::fmt(s.ewc) << ',' << detail::fmt(s.l2) << '\n';
  return os.str();
}

// -- run -----------------------------------------------------------------------

struct SeedOutcome {
  std::uint64_t seed = 0;
  fs::path dir;
  AccuracyMatrix accuracy;
  MetricsReport metrics;
};

struct RunOutcome {
  std::string digest;
  fs::path dir;
  std::vector<SeedOutcome> seeds;
};

inline fs::path experiment_dir(const ExperimentConfig& c) { return output_root(c) / config_digest(c); }

/// Executes every seed of a config and writes its artifacts.
inline RunOutcome run_config(const ExperimentConfig& config, bool force, std::ostream* log = nullptr) {
  RunOutcome out;
  out.digest = config_digest(config);
  out.dir = experiment_dir(config);
  for (auto seed : config.seeds) {
    const auto dir = out.dir / std::to_string(seed);
    if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
      throw ArtifactsExist("artifacts exist in " + dir.string() + "; pass --force to overwrite");
    }
  }

  const Json resolved = resolved_json(config);
  fs::create_directories(out.dir);
  detail::write_text(out.dir / "resolved_config.json", resolved.dump(2) + "\n");

  const Dataset dataset = load_experiment_dataset(config.dataset);
  const ExperimentSpec spec = experiment_spec(config);

  Json summary;
  summary["config_digest"] = out.digest;
  summary["method"] = config.method.name;
  summary["trials"] = Json::array();
  double sum_acc = 0.0, sum_gf = 0.0, sum_lf = 0.0;

  for (auto seed : config.seeds) {
    const auto dir = out.dir / std::to_string(seed);
    if (fs::exists(dir)) fs::remove_all(dir);
    fs::create_directories(dir);
    if (log) *log << "[" << out.digest << "] seed " << seed << ": " << config.method.name << "\n";

    std::string loss_csv = step_log_header();
    RunResult result = run_experiment(spec, dataset, seed, [&](const StepRecord& s) { loss_csv += step_log_line(s); });

    const auto tag = text_tag("config_digest", out.digest);
    for (std::size_t n = 0; n < result.checkpoints.size(); ++n) {
      save_checkpoint(result.checkpoints[n].model(), dir / checkpoint_file_name(n),
                      {tag, text_tag("source_task", std::to_string(n + 1))});
    }
    if (result.pretrained) {
      save_checkpoint(*result.pretrained, dir / "pretrained_encoder.bin", {tag});
    }
    const auto& probe = result.probe;
    std::vector<double> probe_labels(probe.labels.begin(), probe.labels.end());
    write_container(dir / "probe.bin", {ContainerEntry{"probe.features", {probe.size(), probe.dim}, probe.features},
                                        ContainerEntry{"probe.labels", {probe.size()}, probe_labels}, tag});

    detail::write_text(dir / "acc_matrix.csv", accuracy_matrix_csv(result.state.accuracy));
    detail::write_text(dir / "loss.csv", loss_csv);
    if (result.cka) detail::write_text(dir / "cka.csv", result.cka->to_csv());

    Json metrics = metrics_json(result.metrics);
    metrics["config_digest"] = out.digest;
    metrics["seed"] = seed;
    detail::write_text(dir / "metrics.json", metrics.dump(2) + "\n");

    Json manifest;
    manifest["config_digest"] = out.digest;
    manifest["seed"] = seed;
    manifest["method"] = config.method.name;
    manifest["num_tasks"] = result.tasks.num_tasks();
    manifest["task_sizes"] = result.tasks.sizes();
    Json classes = Json::array();
    for (std::size_t n = 0; n < result.tasks.num_tasks(); ++n) classes.push_back(result.tasks.classes(n));
    manifest["task_classes"] = classes;
    manifest["steps"] = result.state.steps;
    if (result.pretrained_aux_accuracy) manifest["pretrained_aux_accuracy"] = *result.pretrained_aux_accuracy;
    if (result.cka && !result.cka->errors.empty()) manifest["cka_errors"] = result.cka->errors;
    std::vector<std::string> files;
    for (std::size_t n = 0; n < result.checkpoints.size(); ++n) files.push_back(checkpoint_file_name(n));
    for (const char* f : {"probe.bin", "acc_matrix.csv", "loss.csv", "metrics.json"}) files.push_back(f);
    if (result.cka) files.push_back("cka.csv");
    if (result.pretrained) files.push_back("pretrained_encoder.bin");
    manifest["files"] = files;
    manifest["config"] = resolved;
    detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");

    Json trial = metrics_json(result.metrics);
    trial["seed"] = seed;
    summary["trials"].push_back(trial);
    sum_acc += result.metrics.final_accuracy;
    sum_gf += result.metrics.global_forgetting.value_or(0.0);
    sum_lf += result.metrics.local_forgetting.value_or(0.0);
    out.seeds.push_back(SeedOutcome{seed, dir, result.state.accuracy, result.metrics});
  }

  const double k = static_cast<double>(config.seeds.size());
  const bool multi = out.seeds.front().metrics.global_forgetting.has_value();
  summary["mean"] = {{"final_accuracy", sum_acc / k},
                     {"global_forgetting", multi ? Json(sum_gf / k) : Json(nullptr)},
                     {"local_forgetting", multi ? Json(sum_lf / k) : Json(nullptr)}};
  detail::write_text(out.dir / "summary.json", summary.dump(2) + "\n");
  return out;
}

// -- report --------------------------------------------------------------------

struct ReportRow {
  std::string label;
  std::size_t trials = 0;
  double final_accuracy = 0.0;
  double final_accuracy_std = 0.0;
  std::optional<double> global_forgetting;
  std::optional<double> global_forgetting_std;
  std::optional<double> local_forgetting;
  std::optional<double> local_forgetting_std;
};

namespace detail {

inline std::vector<fs::path> seed_dirs(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_directory() && !name.empty() && name.find_first_not_of("0123456789") == std::string::npos) {
      out.push_back(e.path());
    }
  }
  std::sort(out.begin(), out.end(), [](const fs::path& a, const fs::path& b) {
    return std::stoull(a.filename().string()) < std::stoull(b.filename().string());
  });
  return out;
}

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
}

}  // namespace detail

/// Builds one row per experiment directory, recomputing metrics from the
/// stored accuracy matrices.
inline std::vector<ReportRow> build_report(const std::vector<fs::path>& dirs) {
  std::vector<std::string> missing;
  std::vector<ReportRow> rows;
  for (const auto& dir : dirs) {
    ReportRow row;
    row.label = dir.filename().string();
    if (fs::exists(dir / "resolved_config.json")) {
      auto j = Json::parse(detail::read_text(dir / "resolved_config.json"));
      row.label = j["method"]["name"].get<std::string>() + " (" + j["method"]["head"].get<std::string>() + ")";
    } else {
      missing.push_back((dir / "resolved_config.json").string());
    }
    const auto seeds = detail::seed_dirs(dir);
    if (seeds.empty()) missing.push_back((dir / "<seed>").string());
    std::vector<double> acc, gf, lf;
    for (const auto& s : seeds) {
      for (const char* f : {"manifest.json", "acc_matrix.csv"}) {
        if (!fs::exists(s / f)) missing.push_back((s / f).string());
      }
      if (!fs::exists(s / "acc_matrix.csv")) continue;
      const auto m = compute_metrics(parse_accuracy_matrix_csv(detail::read_text(s / "acc_matrix.csv")));
      acc.push_back(m.final_accuracy);
      if (m.global_forgetting) gf.push_back(*m.global_forgetting);
      if (m.local_forgetting) lf.push_back(*m.local_forgetting);
    }
    if (acc.empty()) continue;
    row.trials = acc.size();
    std::tie(row.final_accuracy, row.final_accuracy_std) = detail::mean_std(acc);
    if (gf.size() == acc.size()) {
      auto [m, s] = detail::mean_std(gf);
      row.global_forgetting = m;
      row.global_forgetting_std = s;
    }
    if (lf.size() == acc.size()) {
      auto [m, s] = detail::mean_std(lf);
      row.local_forgetting = m;
      row.local_forgetting_std = s;
    }
    rows.push_back(row);
  }
  if (!missing.empty()) {
    std::string msg = "incomplete artifacts:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw IncompleteArtifacts(msg);
  }
  return rows;
}

inline std::string report_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream os;
  os << "method,trials,final_accuracy,final_accuracy_std,global_forgetting,global_forgetting_std,local_forgetting,"
        "local_forgetting_std\n";
  auto opt = [](const std::optional<double>& v) { return v ? detail::fmt(*v) : std::string(); };
  for (const auto& r : rows) {
    os << r.label << ',' << r.trials << ',' << detail::fmt(r.final_accuracy) << ',' << detail::fmt(r.final_accuracy_std)
       << ',' << opt(r.global_forgetting) << ',' << opt(r.global_forgetting_std) << ',' << opt(r.local_forgetting) << ','
       << opt(r.local_forgetting_std) << '\n';
  }
  return os.str();
}

/// Percentages, mean ± std over trials.
inline std::string report_text(const std::vector<ReportRow>& rows) {
  std::size_t w = 6;
  for (const auto& r : rows) w = std::max(w, r.label.size());
  std::ostringstream os;
  auto cell = [](std::optional<double> m, std::optional<double> s) {
    if (!m) return std::string("n/a");
    std::ostringstream c;
    c << std::fixed << std::setprecision(1) << 100.0 * *m << " +/- " << 100.0 * s.value_or(0.0);
    return c.str();
  };
  os << std::left << std::setw(static_cast<int>(w)) << "Method" << "  " << std::setw(16) << "A_1:N (up)" << std::setw(16)
     << "F^G (down)" << std::setw(16) << "F^L (down)" << "trials\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(static_cast<int>(w)) << r.label << "  " << std::setw(16)
       << cell(r.final_accuracy, r.final_accuracy_std) << std::setw(16)
       << cell(r.global_forgetting, r.global_forgetting_std) << std::setw(16)
       << cell(r.local_forgetting, r.local_forgetting_std) << r.trials << '\n';
  }
  return os.str();
}

// -- cka -----------------------------------------------------------------------

/// Recomputes the CKA trajectory of one seed directory from its stored
/// checkpoints and probe batch.
inline CkaTrajectory cka_from_artifacts(const fs::path& seed_dir) {
  const auto manifest_path = seed_dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw IncompleteArtifacts("missing " + manifest_path.string());
  const auto manifest = Json::parse(detail::read_text(manifest_path));
  const auto n_tasks = manifest.at("num_tasks").get<std::size_t>();
  const auto sizes = manifest.at("task_sizes").get<std::vector<std::size_t>>();
  const auto taps = manifest.at("config").at("analysis").at("cka_taps").get<std::vector<std::string>>();

  std::vector<std::string> missing;
  for (std::size_t n = 0; n < n_tasks; ++n) {
    if (!fs::exists(seed_dir / checkpoint_file_name(n))) missing.push_back(checkpoint_file_name(n));
  }
  if (!fs::exists(seed_dir / "probe.bin")) missing.push_back("probe.bin");
  if (!missing.empty()) {
    std::string msg = "missing in " + seed_dir.string() + ":";
    for (const auto& m : missing) msg += " " + m;
    throw IncompleteArtifacts(msg);
  }

  std::vector<CheckpointModel> checkpoints;
  for (std::size_t n = 0; n < n_tasks; ++n) checkpoints.push_back(load_frozen_checkpoint(seed_dir / checkpoint_file_name(n), n));
  std::optional<Tensor> probe;
  for (const auto& e : read_container(seed_dir / "probe.bin")) {
    if (e.name != "probe.features") continue;
    if (e.dims.size() != 2) throw ContainerError(ContainerErrorKind::shape_table_mismatch, "probe features must be a matrix");
    probe = Tensor({static_cast<std::size_t>(e.dims[0]), static_cast<std::size_t>(e.dims[1])}, e.values);
  }
  if (!probe) throw ContainerError(ContainerErrorKind::shape_table_mismatch, "probe.bin has no features record");

  std::optional<AccuracyMatrix> acc;
  if (fs::exists(seed_dir / "acc_matrix.csv")) acc = parse_accuracy_matrix_csv(detail::read_text(seed_dir / "acc_matrix.csv"));
  return cka_trajectory(checkpoints, *probe, taps, sizes.front(), acc ? &*acc : nullptr);
}

/// Writes cka.csv into each seed directory under `dir` (or into `dir` itself
/// when it is a seed directory). Returns the written paths.
inline std::vector<fs::path> write_cka_artifacts(const fs::path& dir) {
  std::vector<fs::path> targets;
  if (fs::exists(dir / "manifest.json")) {
    targets.push_back(dir);
  } else {
    targets = detail::seed_dirs(dir);
  }
  if (targets.empty()) throw IncompleteArtifacts("no run artifacts under " + dir.string());
  std::vector<fs::path> written;
  for (const auto& t : targets) {
    const auto traj = cka_from_artifacts(t);
    detail::write_text(t / "cka.csv", traj.to_csv());
    written.push_back(t / "cka.csv");
  }
  return written;
}

}  // namespace rfcl
