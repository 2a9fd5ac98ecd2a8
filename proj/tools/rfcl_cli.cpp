// Command-line driver: run experiments from JSON configs, tabulate results,
// and recompute CKA trajectories from stored artifacts.
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid config or usage.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "rfcl/rfcl.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kConfig = 2;

int cmd_run(const std::string& path, bool force) {
  const auto config = rfcl::load_config(path);
  const auto out = rfcl::run_config(config, force, &std::cerr);
  std::vector<rfcl::ReportRow> rows = rfcl::build_report({out.dir});
  std::cout << rfcl::report_text(rows);
  std::cout << "artifacts: " << out.dir.string() << "\n";
  return kOk;
}

int cmd_validate(const std::string& path) {
  const auto config = rfcl::load_config(path);
  std::cout << rfcl::resolved_json(config).dump(2) << "\n";
  std::cout << "digest: " << rfcl::config_digest(config) << "\n";
  return kOk;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& out) {
  std::vector<rfcl::fs::path> paths(dirs.begin(), dirs.end());
  const auto rows = rfcl::build_report(paths);
  const auto text = rfcl::report_text(rows);
  std::cout << text;
  if (!out.empty()) {
    rfcl::atomic_write(out + ".txt", text);
    rfcl::atomic_write(out + ".csv", rfcl::report_csv(rows));
    std::cout << "wrote " << out << ".txt and " << out << ".csv\n";
  }
  return kOk;
}

int cmd_cka(const std::string& dir) {
  for (const auto& p : rfcl::write_cka_artifacts(dir)) {
    std::cout << rfcl::read_file_bytes(p);
    std::cerr << "wrote " << p.string() << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rehearsal-free class-incremental continual learning"};
  app.require_subcommand(1);

  std::string config_path;
  bool force = false;
  auto* run = app.add_subcommand("run", "Train every seed of a config and write artifacts");
  run->add_option("config", config_path, "Experiment config (JSON)")->required();
  run->add_flag("--force", force, "Overwrite existing artifacts");

  auto* validate = app.add_subcommand("validate", "Check a config and print its resolved form");
  validate->add_option("config", config_path, "Experiment config (JSON)")->required();

  std::vector<std::string> report_dirs;
  std::string report_out;
  auto* report = app.add_subcommand("report", "Tabulate 3-trial means from experiment directories");
  report->add_option("dirs", report_dirs, "Experiment directories (<out>/<digest>)")->required();
  report->add_option("--out", report_out, "Write <prefix>.txt and <prefix>.csv");

  std::string cka_dir;
  auto* cka = app.add_subcommand("cka", "Recompute CKA trajectories from stored checkpoints");
  cka->add_option("dir", cka_dir, "Experiment or seed directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*run) return cmd_run(config_path, force);
    if (*validate) return cmd_validate(config_path);
    if (*report) return cmd_report(report_dirs, report_out);
    if (*cka) return cmd_cka(cka_dir);
  } catch (const rfcl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kRuntime;
}
