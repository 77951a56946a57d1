#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mdcnn/data.hpp"
#include "mdcnn/params.hpp"

#ifndef MDCNN_CLI_PATH
#error "MDCNN_CLI_PATH must name the CLI binary"
#endif

using namespace mdcnn;
namespace fs = std::filesystem;

namespace {

struct CliRun {
    int code = -1;
    std::string out;
};

fs::path work_dir() {
    const fs::path d = fs::temp_directory_path() / "mdcnn_test_cli";
    fs::create_directories(d);
    return d;
}

std::string path(const std::string& name) { return (work_dir() / name).string(); }

/// Runs the CLI with stdout captured and stderr discarded.
CliRun cli(const std::string& args) {
    const std::string cmd = std::string(MDCNN_CLI_PATH) + " " + args + " 2>/dev/null";
    CliRun r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    std::array<char, 4096> buf{};
    while (std::fgets(buf.data(), buf.size(), pipe)) r.out += buf.data();
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Cli, GenRotatingWritesDataset) {
    const CliRun r = cli("gen --kind spd-rotating --classes 30,60 --n 200 --len 20 --dim 3 --seed 7 --out " + path("d.msq"));
    ASSERT_EQ(r.code, 0) << r.out;
    const SequenceDataset ds = load_dataset(path("d.msq"));
    EXPECT_EQ(ds.size(), 400u);
    EXPECT_EQ(ds.num_classes(), 2);
    EXPECT_EQ(ds.entries[0].sequence.length(), 20);
}

TEST(Cli, GenGroupsWritesTwoFiles) {
    const CliRun r = cli("gen --kind groups --effect 0 --n 5 --seed 1 --out " + path("g.msq"));
    ASSERT_EQ(r.code, 0);
    const SequenceDataset a = load_dataset(path("g.a.msq"));
    EXPECT_EQ(a.size(), 5u);
    EXPECT_EQ(a.kind, ManifoldKind::Sphere);
    EXPECT_EQ(a.dim, 8);
    EXPECT_EQ(load_dataset(path("g.b.msq")).size(), 5u);
}

TEST(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(cli("gen --kind spd-rotating").code, 2);
    EXPECT_EQ(cli("").code, 2);
    EXPECT_EQ(cli("gen --kind spirals --out " + path("x.msq")).code, 2);
    EXPECT_EQ(cli("train --data /nonexistent.msq --out " + path("m.mpar")).code, 2);
    EXPECT_EQ(cli("gen --kind spd-rotating --n 2 --len 0 --out " + path("x.msq")).code, 2);
    EXPECT_EQ(cli("checkgrad --blocks 1:2").code, 2);
}

TEST(Cli, HelpExitsZero) { EXPECT_EQ(cli("--help").code, 0); }

TEST(Cli, TrainThenEvalSeparableTask) {
    ASSERT_EQ(cli("gen --kind spd-rotating --classes 0,90 --n 20 --len 6 --dim 2 --noise 0 --seed 3 --out " +
                  path("sep.msq"))
                  .code,
              0);
    const CliRun t = cli("train --data " + path("sep.msq") + " --blocks 1:2:2 --lr 0.1 --epochs 30 --batch 4 --out " +
                      path("sep.mpar") + " --history " + path("sep_hist.csv"));
    ASSERT_EQ(t.code, 0) << t.out;
    EXPECT_EQ(slurp(path("sep_hist.csv")).rfind("epoch,loss,accuracy,fd_fallbacks\n1,", 0), 0u);
    const CliRun e = cli("eval --model " + path("sep.mpar") + " --data " + path("sep.msq") + " --out " + path("sep_eval.csv"));
    ASSERT_EQ(e.code, 0);
    EXPECT_NE(e.out.find("accuracy 1\n"), std::string::npos) << e.out;
    EXPECT_NE(slurp(path("sep_eval.csv")).find("accuracy,1\n"), std::string::npos);
}

TEST(Cli, EvalDimensionMismatchNamesBothDims) {
    ASSERT_EQ(cli("gen --kind spd-rotating --n 2 --len 4 --dim 3 --out " + path("d3.msq")).code, 0);
    ASSERT_EQ(cli("gen --kind spd-rotating --n 2 --len 4 --dim 2 --out " + path("d2.msq")).code, 0);
    ASSERT_EQ(cli("train --data " + path("d3.msq") + " --epochs 1 --out " + path("d3.mpar")).code, 0);
    const std::string cmd = std::string(MDCNN_CLI_PATH) + " eval --model " + path("d3.mpar") + " --data " +
                            path("d2.msq") + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    std::string all;
    std::array<char, 4096> buf{};
    while (std::fgets(buf.data(), buf.size(), pipe)) all += buf.data();
    const int status = pclose(pipe);
    EXPECT_EQ(WEXITSTATUS(status), 2);
    EXPECT_NE(all.find("dim 3"), std::string::npos) << all;
    EXPECT_NE(all.find("dim 2"), std::string::npos) << all;
}

TEST(Cli, CheckgradPassesAndCatchesCorruption) {
    const CliRun ok = cli("checkgrad --blocks 1:2:2 --seed 2");
    EXPECT_EQ(ok.code, 0) << ok.out;
    EXPECT_NE(ok.out.find("PASS"), std::string::npos);
    const CliRun sphere = cli("checkgrad --manifold sphere --dim 5 --blocks 1:2:2 --seed 2");
    EXPECT_EQ(sphere.code, 0) << sphere.out;
    const CliRun bad = cli("checkgrad --blocks 1:2:2 --corrupt-layer block0.conv1");
    EXPECT_EQ(bad.code, 1);
    EXPECT_NE(bad.out.find("layer block0.conv1"), std::string::npos) << bad.out;
}

TEST(Cli, PermtestRankFormulaAndReplay) {
    ASSERT_EQ(cli("gen --kind groups --n 6 --max-len 20 --effect 3 --seed 4 --out " + path("pt.msq")).code, 0);
    const std::string base = "permtest --a " + path("pt.a.msq") + " --b " + path("pt.b.msq") +
                             " --perms 199 --seed 5 --pretrain-epochs 1 --finetune-epochs 1";
    const CliRun r = cli(base + " --out " + path("pt1.csv") + " --hist " + path("pt1_hist.csv"));
    ASSERT_EQ(r.code, 0) << r.out;
    // The printed p-value is the add-one rank of sigma among the CSV null rows.
    std::istringstream csv(slurp(path("pt1.csv")));
    std::string line;
    std::getline(csv, line);
    std::vector<double> null;
    double sigma = -1.0;
    while (std::getline(csv, line)) {
        if (line.rfind("summary,", 0) == 0) {
            sigma = std::stod(line.substr(8, line.find(',', 8) - 8));
            continue;
        }
        null.push_back(std::stod(line.substr(line.rfind(',') + 1)));
    }
    ASSERT_EQ(null.size(), 199u);
    std::size_t ge = 0;
    for (double v : null) ge += v >= sigma ? 1 : 0;
    const double p = static_cast<double>(1 + ge) / 200.0;
    char expected[64];
    std::snprintf(expected, sizeof expected, "p-value %.6g\n", p);
    EXPECT_NE(r.out.find(expected), std::string::npos) << r.out;
    EXPECT_LT(p, 0.05);
    const CliRun again = cli("--threads 2 " + base + " --out " + path("pt2.csv") + " --hist " + path("pt2_hist.csv"));
    ASSERT_EQ(again.code, 0);
    EXPECT_EQ(slurp(path("pt1.csv")), slurp(path("pt2.csv")));
    EXPECT_EQ(slurp(path("pt1_hist.csv")), slurp(path("pt2_hist.csv")));
}

TEST(Cli, ConfigFileAndDump) {
    {
        std::ofstream f(path("gen.ini"));
        f << "[gen]\nkind=spd-rotating\nn=3\nlen=5\ndim=2\nseed=8\n";
    }
    const CliRun r = cli("--config " + path("gen.ini") + " --dump-config " + path("dump.ini") + " gen --out " +
                      path("cfg.msq"));
    ASSERT_EQ(r.code, 0);
    EXPECT_EQ(load_dataset(path("cfg.msq")).size(), 6u);
    const std::string dump = slurp(path("dump.ini"));
    EXPECT_NE(dump.find("seed=8"), std::string::npos) << dump;
    // Replaying the dumped configuration reproduces the file.
    ASSERT_EQ(cli("--config " + path("dump.ini") + " gen --out " + path("cfg2.msq")).code, 0);
    EXPECT_EQ(slurp(path("cfg.msq")), slurp(path("cfg2.msq")));
}
