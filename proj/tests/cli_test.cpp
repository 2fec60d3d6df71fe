#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "sib/cli/commands.hpp"
#include "sib/cli/config.hpp"
#include "sib/errors.hpp"

using namespace sib;
using namespace sib::cli;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / ("sib_cli_" + std::to_string(counter()++) + "_" +
                                                 ::testing::UnitTest::GetInstance()->current_test_info()->name())) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  static int& counter() {
    static int c = 0;
    return c;
  }
  fs::path path_;
};

const char* kTiny =
    "# tiny recipe\n"
    "side = 16\n"
    "n_train = 12\n"
    "n_test = 6\n"
    "channels = 2\n"
    "batch_size = 4\n"
    "probe_size = 8\n"
    "epochs = 1\n"
    "steps = 10\n"
    "ig_steps = 8\n"
    "methods = saliency, gradcam, ours\n";

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "sib");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return run(static_cast<int>(argv.size()), argv.data());
}

fs::path write_config(const TempDir& d, const std::string& text) {
  const fs::path p = d.path() / "c.txt";
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST(Config, DefaultsAndComments) {
  const RunConfig c = parse_config("# only a comment\n\n  gamma = 0.5  # trailing\n");
  EXPECT_EQ(c.train.objective.gamma, 0.5);
  EXPECT_EQ(c.train.objective.tau, 1.0);
  EXPECT_EQ(c.recipe.classes, 3u);
  EXPECT_EQ(c.mode, Mode::Sib);
  EXPECT_EQ(c.methods.size(), 7u);
}

TEST(Config, UnknownKeysAndViolationsAreListedTogether) {
  try {
    (void)parse_config("colour = red\nlr = -1\nside = 20\nbatch_size = 1\nepochs = many\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string w = e.what();
    for (const char* part : {"unknown key 'colour'", "lr must be > 0", "side must be 16, 32 or 64",
                             "batch_size must be >= 2", "epochs"}) {
      EXPECT_NE(w.find(part), std::string::npos) << part << " missing from: " << w;
    }
    EXPECT_EQ(w.find('\n'), std::string::npos);
  }
}

TEST(Config, SerializeRoundTrips) {
  const RunConfig c = parse_config(std::string(kTiny) + "gamma = 0.1\nhsic = global\nmode = baseline\nseed = 7\n");
  const std::string s = serialize(c);
  EXPECT_EQ(serialize(parse_config(s)), s);
  const RunConfig r = parse_config(s);
  EXPECT_EQ(r.seed(), 7u);
  EXPECT_EQ(r.recipe.seed, 7u);
  EXPECT_EQ(r.train.objective.hsic, core::HsicScaling::Global);
  EXPECT_EQ(r.mode, Mode::Baseline);
}

TEST(Config, BaselineModeZeroesTheSibTerms) {
  RunConfig c;
  c.mode = Mode::Baseline;
  const auto t = effective_train_config(c);
  EXPECT_EQ(t.objective.gamma, 0.0);
  EXPECT_FALSE(t.objective.use_bg);
  c.mode = Mode::Sib;
  EXPECT_EQ(effective_train_config(c).objective.gamma, 1.0);
}

TEST(Config, OverridesApplyAfterFile) {
  TempDir d;
  const auto p = write_config(d, std::string(kTiny) + "seed = 3\n");
  const RunConfig c = resolve(p, {.seed = 11, .out = "elsewhere", .mode = Mode::Baseline});
  EXPECT_EQ(c.seed(), 11u);
  EXPECT_EQ(c.recipe.seed, 11u);
  EXPECT_EQ(c.out, "elsewhere");
  EXPECT_EQ(c.mode, Mode::Baseline);
}

TEST(Cli, TrainWithZeroEpochsLogsInitialRowOnly) {
  TempDir d;
  const auto p = write_config(d, std::string(kTiny) + "epochs = 0\n");
  ASSERT_EQ(run_cli({"train", "--config", p.string(), "--out", d.path().string()}), 0);
  std::ifstream log(d.path() / "sib" / "train_log.csv");
  std::string header, row, extra;
  std::getline(log, header);
  std::getline(log, row);
  EXPECT_EQ(header, "epoch,acc,l_ce,l_fg,l_bg,hsic_fg,hsic_bg");
  EXPECT_EQ(row.substr(0, 2), "0,");
  EXPECT_FALSE(std::getline(log, extra));
  EXPECT_TRUE(fs::exists(d.path() / "sib" / "model.sibp"));
  EXPECT_TRUE(fs::exists(d.path() / "sib" / "config.txt"));
}

TEST(Cli, FullPipelineIsReproducibleAndSchemasMatch) {
  TempDir d;
  const auto p = write_config(d, kTiny);
  const std::string out = d.path().string();
  ASSERT_EQ(run_cli({"gen", "--config", p.string(), "--out", out}), 0);
  EXPECT_TRUE(fs::exists(d.path() / "data" / "train" / "recipe.txt"));
  for (const char* mode : {"baseline", "sib"}) {
    ASSERT_EQ(run_cli({"train", "--config", p.string(), "--out", out, "--mode", mode}), 0);
    ASSERT_EQ(run_cli({"eval", "--config", p.string(), "--out", out, "--mode", mode}), 0);
  }
  ASSERT_EQ(run_cli({"explain", "--config", p.string(), "--out", out}), 0);
  EXPECT_TRUE(fs::exists(d.path() / "sib" / "explain" / "000000.gradcam.pgm"));
  EXPECT_TRUE(fs::exists(d.path() / "sib" / "explain" / "000000.gradcam.ppm"));
  ASSERT_EQ(run_cli({"report", "--config", p.string(), "--out", out}), 0);
  for (const char* f : {"mi_quadrants.csv", "info_differential.csv", "bound_check.txt", "comparison.csv"}) {
    EXPECT_TRUE(fs::exists(d.path() / "report" / f)) << f;
  }

  auto first_line = [](const fs::path& f) {
    std::ifstream in(f);
    std::string l;
    std::getline(in, l);
    return l;
  };
  for (const char* t : {"localization_summary.csv", "faithfulness_summary.csv"}) {
    EXPECT_EQ(first_line(d.path() / "baseline" / t), first_line(d.path() / "sib" / t));
  }
  const auto tables = eval::read_report_tables(read_text(d.path() / "sib" / "localization_summary.csv"),
                                               read_text(d.path() / "sib" / "faithfulness_summary.csv"));
  ASSERT_EQ(tables.size(), 3u);
  EXPECT_EQ(tables[1].method, "gradcam");

  // Re-running a command rewrites identical bytes.
  const std::string log = read_text(d.path() / "sib" / "train_log.csv");
  const std::string t3 = read_text(d.path() / "sib" / "localization_summary.csv");
  ASSERT_EQ(run_cli({"train", "--config", p.string(), "--out", out}), 0);
  ASSERT_EQ(run_cli({"eval", "--config", p.string(), "--out", out}), 0);
  EXPECT_EQ(read_text(d.path() / "sib" / "train_log.csv"), log);
  EXPECT_EQ(read_text(d.path() / "sib" / "localization_summary.csv"), t3);

  // The folder written by gen trains like the in-memory recipe.
  const auto q = write_config(d, std::string(kTiny) + "data = " + (d.path() / "data").string() + "\nout = " +
                                     (d.path() / "from_folder").string() + "\n");
  ASSERT_EQ(run_cli({"train", "--config", q.string()}), 0);
  EXPECT_EQ(read_text(d.path() / "from_folder" / "sib" / "train_log.csv"), log);
}

TEST(Cli, ErrorsAreOneLineAndNonzero) {
  TempDir d;
  const auto p = write_config(d, "bogus = 1\ngamma = -2\n");
  std::stringstream captured;
  auto* old = std::cerr.rdbuf(captured.rdbuf());
  const int rc = run_cli({"train", "--config", p.string()});
  const int rc_missing = run_cli({"eval", "--out", (d.path() / "nothing").string()});
  std::cerr.rdbuf(old);
  EXPECT_NE(rc, 0);
  EXPECT_NE(rc_missing, 0);
  std::string l1, l2, l3;
  std::getline(captured, l1);
  std::getline(captured, l2);
  EXPECT_FALSE(std::getline(captured, l3));
  EXPECT_EQ(l1.rfind("error: config: ", 0), 0u) << l1;
  EXPECT_NE(l1.find("bogus"), std::string::npos);
  EXPECT_NE(l1.find("gamma"), std::string::npos);
  EXPECT_EQ(l2.rfind("error: io: ", 0), 0u) << l2;
}

TEST(Cli, UnknownSampleIdIsConfigError) {
  TempDir d;
  const auto p = write_config(d, std::string(kTiny) + "samples = nope\n");
  ASSERT_EQ(run_cli({"train", "--config", p.string(), "--out", d.path().string()}), 0);
  EXPECT_THROW(cmd_explain(resolve(p, {.seed = {}, .out = d.path().string(), .mode = {}})), ConfigError);
}
