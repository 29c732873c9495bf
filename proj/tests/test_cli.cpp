#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "kernreg/run_config.hpp"

using namespace kernreg;
namespace fs = std::filesystem;

namespace {

#ifndef KERNREG_BIN
#error "KERNREG_BIN must point at the CLI binary"
#endif

std::string bin() { return KERNREG_BIN; }

int run_cli(const std::string& args) {
    std::string cmd = "KERNREG_THREADS=1 " + bin() + " " + args + " >/dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::vector<std::string>> parse_csv(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

std::string write_config(const std::string& dir, const std::string& body) {
    fs::create_directories(dir);
    std::string path = dir + "/config.json";
    std::ofstream out(path);
    out << body;
    return path;
}

std::string base_config(const std::string& outdir) {
    return std::string(R"({
  "seed": 11,
  "output_dir": ")") +
           outdir + R"(",
  "dataset": {"kind": "gaussian-blobs-2d", "n": 120, "separation": 6.0},
  "model": {"preset": "mlp", "in_dim": 2, "hidden": [6], "classes": 1},
  "loss": "logistic",
  "train": {"lr": 0.05, "epochs": 2, "batch_size": 16},
  "eval": {"epsilons": [0.0, 0.1], "steps": 10, "split": "val", "sample": 64, "norm_epsilon": 0.25}
})";
}

}  // namespace

TEST_CASE("train: two epochs give two metric rows, reproducible byte-for-byte") {
    std::string dir = (fs::temp_directory_path() / "kr_cli_train").string();
    fs::remove_all(dir);
    std::string cfg = write_config(dir, base_config(dir + "/run"));

    REQUIRE(run_cli("train --config " + cfg) == 0);
    auto rows = parse_csv(dir + "/run/metrics.csv");
    REQUIRE(rows.size() == 3);  // header + 2 epochs
    CHECK(rows[0][0] == "epoch");
    CHECK(rows[1][0] == "0");
    CHECK(rows[2][0] == "1");
    CHECK(fs::exists(dir + "/run/model.krnr"));

    std::string first = slurp(dir + "/run/metrics.csv");
    REQUIRE(run_cli("train --config " + cfg) == 0);
    CHECK(slurp(dir + "/run/metrics.csv") == first);  // identical bytes
}

TEST_CASE("eval-robust: epsilon zero row matches the final validation accuracy") {
    std::string dir = (fs::temp_directory_path() / "kr_cli_eval").string();
    fs::remove_all(dir);
    std::string cfg = write_config(dir, base_config(dir + "/run"));
    REQUIRE(run_cli("train --config " + cfg) == 0);
    REQUIRE(run_cli("eval-robust --config " + cfg) == 0);

    auto metrics = parse_csv(dir + "/run/metrics.csv");
    auto robust = parse_csv(dir + "/run/robust.csv");
    REQUIRE(robust.size() == 3);  // header + 2 epsilons
    CHECK(robust[0] == std::vector<std::string>{"epsilon", "steps", "geometry", "accuracy"});
    // find val_acc column
    std::size_t vcol = 0;
    for (std::size_t i = 0; i < metrics[0].size(); ++i)
        if (metrics[0][i] == "val_acc") vcol = i;
    CHECK(robust[1][0] == "0");
    CHECK(std::stod(robust[1][3]) == doctest::Approx(std::stod(metrics.back()[vcol])).epsilon(1e-12));
    // nonincreasing in epsilon
    CHECK(std::stod(robust[2][3]) <= std::stod(robust[1][3]) + 1e-12);
}

TEST_CASE("norms and margins commands emit valid tables") {
    std::string dir = (fs::temp_directory_path() / "kr_cli_norms").string();
    fs::remove_all(dir);
    std::string cfg = write_config(dir, base_config(dir + "/run"));
    REQUIRE(run_cli("train --config " + cfg) == 0);
    REQUIRE(run_cli("norms --config " + cfg) == 0);
    REQUIRE(run_cli("margins --config " + cfg) == 0);

    auto norms = parse_csv(dir + "/run/norms.csv");
    REQUIRE(norms.size() == 2);
    CHECK(norms[0][1] == "lower");
    CHECK(std::stod(norms[1][1]) <= std::stod(norms[1][2]) + 1e-6);  // lower <= upper

    auto margins = parse_csv(dir + "/run/margins.csv");
    CHECK(margins[0] == std::vector<std::string>{"raw", "normalized", "cdf"});
    REQUIRE(margins.size() > 2);
    double prev = 0;
    for (std::size_t i = 1; i < margins.size(); ++i) {
        double cdf = std::stod(margins[i][2]);
        CHECK(cdf >= prev);
        prev = cdf;
    }
    CHECK(prev == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("config errors exit with code 2 and name the key") {
    std::string dir = (fs::temp_directory_path() / "kr_cli_bad").string();
    fs::remove_all(dir);
    fs::create_directories(dir);
    // unknown key
    std::string bad = write_config(dir, R"({"seed": 1, "bogus_key": 2,
      "dataset": {"kind": "gaussian-blobs-2d"}, "model": {"preset": "linear", "in_dim": 2}})");
    CHECK(run_cli("train --config " + bad) == 2);
    // malformed json
    std::string mal = dir + "/mal.json";
    std::ofstream(mal) << "{ not json";
    CHECK(run_cli("train --config " + mal) == 2);
    // bad override path
    std::string ok = write_config(dir + "/ok", base_config(dir + "/ok/run"));
    CHECK(run_cli("train --config " + ok + " --set nosuch.key=1") == 2);
    // missing checkpoint for eval
    std::string fresh = write_config(dir + "/fresh", base_config(dir + "/fresh/run"));
    CHECK(run_cli("eval-robust --config " + fresh) == 2);
}

TEST_CASE("overrides reach nested penalty fields") {
    std::string dir = (fs::temp_directory_path() / "kr_cli_ovr").string();
    fs::remove_all(dir);
    std::string body = std::string(R"({
  "seed": 3, "output_dir": ")") + dir + R"(/run",
  "dataset": {"kind": "gaussian-blobs-2d", "n": 80, "separation": 6.0},
  "model": {"preset": "mlp", "in_dim": 2, "hidden": [4], "classes": 1},
  "loss": "logistic",
  "train": {"lr": 0.05, "epochs": 1, "batch_size": 16,
            "penalties": [{"kind": "weight_decay", "lambda": 0.0}]}
})";
    std::string cfg = write_config(dir, body);
    RunConfig rc = parse_run_config(cfg, {"train.penalties.0.lambda=0.25", "train.epochs=3"});
    CHECK(rc.train.penalties.at(0).lambda == 0.25);
    CHECK(rc.train.epochs == 3);
    REQUIRE(run_cli("train --config " + cfg + " --set train.penalties.0.lambda=0.25") == 0);
}

TEST_CASE("grid command: sub-runs and summary table") {
    std::string dir = (fs::temp_directory_path() / "kr_cli_grid").string();
    fs::remove_all(dir);
    std::string body = std::string(R"({
  "seed": 7, "output_dir": ")") + dir + R"(/run",
  "dataset": {"kind": "gaussian-blobs-2d", "n": 100, "separation": 5.0},
  "model": {"preset": "mlp", "in_dim": 2, "hidden": [5], "classes": 1},
  "loss": "logistic",
  "train": {"lr": 0.05, "epochs": 2, "batch_size": 16,
            "penalties": [{"kind": "weight_decay", "lambda": 0.0}]},
  "grid": {"points": [
    {"label": "wd0", "overrides": {"train.penalties.0.lambda": 0.0}},
    {"label": "wd1", "overrides": {"train.penalties.0.lambda": 0.001}}
  ]}
})";
    std::string cfg = write_config(dir, body);
    REQUIRE(run_cli("grid --config " + cfg) == 0);
    auto summary = parse_csv(dir + "/run/summary.csv");
    REQUIRE(summary.size() == 3);  // header + 2 points
    CHECK(summary[1][1] == "wd0");
    CHECK(summary[2][1] == "wd1");
    CHECK(fs::exists(dir + "/run/grid_0/metrics.csv"));
    CHECK(fs::exists(dir + "/run/grid_1/metrics.csv"));
}

TEST_CASE("sequence dataset path with mutation augmentation config parses") {
    std::string dir = (fs::temp_directory_path() / "kr_cli_seq").string();
    fs::remove_all(dir);
    std::string body = std::string(R"({
  "seed": 5, "output_dir": ")") + dir + R"(/run",
  "dataset": {"kind": "onehot-sequences", "n": 60, "length": 32, "alphabet": 20, "augment_mutate_p": 0.1},
  "model": {"preset": "seq-conv", "length": 32, "alphabet": 20, "channels": 6, "classes": 1},
  "loss": "logistic",
  "train": {"optimizer": "adam", "lr": 0.01, "epochs": 1, "batch_size": 20}
})";
    std::string cfg = write_config(dir, body);
    RunConfig rc = parse_run_config(cfg, {});
    CHECK(rc.train.optimizer == TrainConfig::Optimizer::adam);
    CHECK(rc.augment_mutate_p == 0.1);
    REQUIRE(run_cli("train --config " + cfg) == 0);
    CHECK(fs::exists(dir + "/run/metrics.csv"));
}
