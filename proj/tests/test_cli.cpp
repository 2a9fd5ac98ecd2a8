#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "rfcl/artifacts.hpp"

using namespace rfcl;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    root_ = fs::temp_directory_path() / "rfcl_cli_test" / info->name();
    fs::remove_all(root_);
    fs::create_directories(root_);
    out_root_ = root_ / "out";
    ::setenv(kOutputRootEnv, out_root_.c_str(), 1);
  }
  void TearDown() override { ::unsetenv(kOutputRootEnv); }

  Outcome cli(const std::string& args) {
    const auto o = root_ / "stdout.txt", e = root_ / "stderr.txt";
    const std::string cmd = std::string("\"") + RFCL_CLI_PATH + "\" " + args + " > \"" + o.string() + "\" 2> \"" +
                            e.string() + "\"";
    const int status = std::system(cmd.c_str());
    Outcome r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(o);
    r.err = slurp(e);
    return r;
  }

  fs::path write_config(const std::string& name, const std::string& body) {
    const auto p = root_ / name;
    std::ofstream(p) << body;
    return p;
  }

  static std::string small_config(const std::string& method, std::size_t tasks = 2, const std::string& extra = "") {
    return R"({
      "dataset": {"kind": "synthetic", "num_classes": 12, "dim": 8, "per_class": 20, "separation": 5, "seed": 3},
      "split": {"kind": "uniform", "num_tasks": )" +
           std::to_string(tasks) + R"(, "per_task": 4},
      "model": {"hidden_dims": [16, 12]},
      "method": {"name": ")" + method + R"(", "head": "sigmoid"},
      "schedule": {"epochs": 3, "lr_decay_epochs": [2], "batch_size": 16, "lr": 0.005},
      "analysis": {"cka_taps": ["pen", "linear"], "probe_size": 16},
      "output_dir": "unused_output_dir",
      "seeds": [1, 2])" + extra + "}";
  }

  fs::path experiment_dir_for(const fs::path& config) { return out_root_ / config_digest(load_config(config)); }

  fs::path root_;
  fs::path out_root_;
};

}  // namespace

TEST_F(CliTest, RunWritesCompleteArtifacts) {
  const auto cfg = write_config("naive.json", small_config("Naive"));
  const auto r = cli("run " + cfg.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto dir = experiment_dir_for(cfg);
  EXPECT_FALSE(fs::exists(root_ / "unused_output_dir"));
  EXPECT_TRUE(fs::exists(dir / "resolved_config.json"));
  EXPECT_TRUE(fs::exists(dir / "summary.json"));
  const auto digest = dir.filename().string();
  for (const char* seed : {"1", "2"}) {
    const auto s = dir / seed;
    for (const char* f : {"manifest.json", "ckpt_task_1.bin", "ckpt_task_2.bin", "acc_matrix.csv", "metrics.json",
                          "loss.csv", "cka.csv", "probe.bin"}) {
      EXPECT_TRUE(fs::exists(s / f)) << s / f;
    }
    EXPECT_EQ(find_text_tag(read_container(s / "ckpt_task_2.bin"), "config_digest"), digest);
    EXPECT_EQ(find_text_tag(read_container(s / "ckpt_task_2.bin"), "source_task"), "2");
    const auto manifest = Json::parse(slurp(s / "manifest.json"));
    EXPECT_EQ(manifest["config_digest"], digest);
    EXPECT_EQ(Json::parse(slurp(s / "metrics.json"))["config_digest"], digest);
    EXPECT_EQ(slurp(s / "loss.csv").rfind(step_log_header(), 0), 0u);
    EXPECT_EQ(slurp(s / "acc_matrix.csv").rfind("i,n,task_size,test_count,local,global\n", 0), 0u);
  }
  EXPECT_NE(r.out.find("Naive (sigmoid)"), std::string::npos) << r.out;
}

TEST_F(CliTest, SecondRunRefusesWithoutForce) {
  const auto cfg = write_config("naive.json", small_config("Naive"));
  ASSERT_EQ(cli("run " + cfg.string()).code, 0);
  const auto matrix = experiment_dir_for(cfg) / "1" / "acc_matrix.csv";
  const auto first = slurp(matrix);
  const auto again = cli("run " + cfg.string());
  EXPECT_EQ(again.code, 1);
  EXPECT_NE(again.err.find("artifacts exist"), std::string::npos) << again.err;
  const auto forced = cli("run " + cfg.string() + " --force");
  ASSERT_EQ(forced.code, 0) << forced.err;
  EXPECT_EQ(slurp(matrix), first);
}

TEST_F(CliTest, ConfigErrorsExitTwo) {
  const auto cfg = write_config("typo.json", R"({"schedule": {"epocs": 3}})");
  const auto r = cli("run " + cfg.string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("epocs"), std::string::npos) << r.err;
  EXPECT_EQ(cli("validate " + (root_ / "absent.json").string()).code, 2);
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
}

TEST_F(CliTest, ValidatePrintsResolvedConfigAndDigest) {
  const auto cfg = write_config("ok.json", small_config("PredKD+EWC"));
  const auto r = cli("validate " + cfg.string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("digest: " + config_digest(load_config(cfg))), std::string::npos);
  EXPECT_NE(r.out.find("\"ewc\": 10.0"), std::string::npos) << r.out;
}

TEST_F(CliTest, RuntimeFailureExitsOneWithTaskContext) {
  auto text = small_config("Naive");
  text.replace(text.find("\"lr\": 0.005"), 11, "\"lr\": 1e200");
  const auto r = cli("run " + write_config("explode.json", text).string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("task 1: "), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("step"), std::string::npos) << r.err;
}

TEST_F(CliTest, ReportMatchesRecomputedMetrics) {
  const auto a = write_config("a.json", small_config("Naive"));
  const auto b = write_config("b.json", small_config("PredKD"));
  ASSERT_EQ(cli("run " + a.string()).code, 0);
  ASSERT_EQ(cli("run " + b.string()).code, 0);
  const auto da = experiment_dir_for(a), db = experiment_dir_for(b);
  const auto prefix = root_ / "table";
  const auto r = cli("report " + da.string() + " " + db.string() + " --out " + prefix.string());
  ASSERT_EQ(r.code, 0) << r.err;

  std::istringstream csv(slurp(prefix.string() + ".csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line.substr(0, 39), "method,trials,final_accuracy,final_accu");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(csv, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0][0], "Naive (sigmoid)");
  EXPECT_EQ(rows[1][0], "PredKD (sigmoid)");
  for (std::size_t k = 0; k < 2; ++k) {
    const auto dir = k == 0 ? da : db;
    double acc = 0, gf = 0, lf = 0;
    for (const char* seed : {"1", "2"}) {
      // Independent recomputation straight from the stored table.
      std::istringstream m(slurp(dir / seed / "acc_matrix.csv"));
      std::string l;
      std::getline(m, l);
      std::map<std::pair<int, int>, std::pair<double, double>> cell;
      std::map<int, double> size, count;
      while (std::getline(m, l)) {
        int i, n;
        double ts, tc, lo, gl;
        char c;
        std::istringstream ls(l);
        ls >> i >> c >> n >> c >> ts >> c >> tc >> c >> lo >> c >> gl;
        cell[{i, n}] = {lo, gl};
        size[n] = ts;
        count[n] = tc;
      }
      acc += (count[1] * cell[{2, 1}].second + count[2] * cell[{2, 2}].second) / (count[1] + count[2]);
      gf += size[1] / (size[1] + size[2]) * (cell[{1, 1}].second - cell[{2, 1}].second);
      lf += cell[{1, 1}].first - cell[{2, 1}].first;
    }
    EXPECT_NEAR(std::stod(rows[k][2]), acc / 2, 1e-12);
    EXPECT_NEAR(std::stod(rows[k][4]), gf / 2, 1e-12);
    EXPECT_NEAR(std::stod(rows[k][6]), lf / 2, 1e-12);
  }
  EXPECT_TRUE(fs::exists(prefix.string() + ".txt"));
  EXPECT_NE(r.out.find("F^G"), std::string::npos);
}

TEST_F(CliTest, ReportListsMissingFiles) {
  const auto cfg = write_config("naive.json", small_config("Naive"));
  ASSERT_EQ(cli("run " + cfg.string()).code, 0);
  const auto dir = experiment_dir_for(cfg);
  fs::remove(dir / "2" / "acc_matrix.csv");
  const auto r = cli("report " + dir.string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("2/acc_matrix.csv"), std::string::npos) << r.err;
}

TEST_F(CliTest, CkaMatchesInProcessTrajectory) {
  const auto cfg = write_config("kd.json", small_config("PredKD", 3));
  ASSERT_EQ(cli("run " + cfg.string()).code, 0);
  const auto seed_dir = experiment_dir_for(cfg) / "1";
  const auto during_run = slurp(seed_dir / "cka.csv");
  fs::remove(seed_dir / "cka.csv");
  const auto r = cli("cka " + seed_dir.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto from_cli = slurp(seed_dir / "cka.csv");

  std::vector<CheckpointModel> ckpts;
  for (std::size_t n = 0; n < 3; ++n) ckpts.push_back(load_frozen_checkpoint(seed_dir / checkpoint_file_name(n), n));
  Tensor probe;
  for (const auto& e : read_container(seed_dir / "probe.bin")) {
    if (e.name == "probe.features") probe = Tensor({e.dims[0], e.dims[1]}, e.values);
  }
  const auto acc = parse_accuracy_matrix_csv(slurp(seed_dir / "acc_matrix.csv"));
  const auto direct = cka_trajectory(ckpts, probe, {"pen", "linear"}, 4, &acc).to_csv();
  EXPECT_EQ(from_cli, direct);
  EXPECT_EQ(from_cli, during_run);
  EXPECT_EQ(r.out, from_cli);
}

TEST_F(CliTest, CkaOfSingleTaskRunIsAllOnes) {
  const auto cfg = write_config("one.json", small_config("Naive", 1));
  ASSERT_EQ(cli("run " + cfg.string()).code, 0);
  const auto r = cli("cka " + experiment_dir_for(cfg).string());
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream csv(slurp(experiment_dir_for(cfg) / "2" / "cka.csv"));
  std::string line;
  std::getline(csv, line);
  int rows = 0;
  while (std::getline(csv, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    EXPECT_EQ(cells[0], "1");
    EXPECT_NEAR(std::stod(cells[2]), 1.0, 1e-10);
    ++rows;
  }
  EXPECT_EQ(rows, 2);
}

TEST_F(CliTest, CkaNamesMissingCheckpoint) {
  const auto cfg = write_config("three.json", small_config("Naive", 3));
  ASSERT_EQ(cli("run " + cfg.string()).code, 0);
  const auto seed_dir = experiment_dir_for(cfg) / "1";
  fs::remove(seed_dir / "ckpt_task_3.bin");
  const auto r = cli("cka " + seed_dir.string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("ckpt_task_3.bin"), std::string::npos) << r.err;
}
