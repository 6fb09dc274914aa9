#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

int run(const std::string& args, std::string* out = nullptr) {
  const fs::path log = fs::temp_directory_path() / "streamtrack_cli_out.txt";
  const std::string cmd = std::string(STREAMTRACK_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  if (out) {
    std::ifstream is(log);
    std::ostringstream ss;
    ss << is.rdbuf();
    *out = ss.str();
  }
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir = fs::temp_directory_path() / "streamtrack_cli_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "tiny.json") << R"({
      "synth": {"frames": 6, "splits": [{"name": "train", "count": 4, "seed": 1},
                                        {"name": "test", "count": 2, "seed": 2}]},
      "train": {"epochs": 1, "batch_size": 2, "steps_per_epoch": 1}
    })";
  }
  static void TearDownTestSuite() { fs::remove_all(dir); }
  static std::string p(const std::string& name) { return (dir / name).string(); }
  static fs::path dir;
};

fs::path CliPipeline::dir;

}  // namespace

TEST(Cli, UnknownFlagFails) {
  EXPECT_NE(run("gradcheck --bogus"), 0);
  EXPECT_NE(run(""), 0);
  EXPECT_NE(run("train --profile kitti"), 0);
}

TEST(Cli, GradcheckFilter) {
  std::string out;
  EXPECT_EQ(run("gradcheck --instances 5 --filter sigmoid", &out), 0) << out;
  EXPECT_NE(out.find("log_sigmoid"), std::string::npos) << out;
  EXPECT_EQ(out.find("matmul"), std::string::npos) << out;
}

TEST_F(CliPipeline, EndToEnd) {
  std::string out;
  ASSERT_EQ(run("gen-synth --config " + p("tiny.json") + " --out " + p("data"), &out), 0) << out;
  ASSERT_TRUE(fs::exists(dir / "data" / "manifest.json"));
  ASSERT_EQ(run("train --config " + p("tiny.json") + " --data " + p("data") + " --frames 1 --out " + p("run"), &out), 0)
      << out;
  ASSERT_TRUE(fs::exists(dir / "run" / "checkpoint.json"));
  ASSERT_EQ(run("track --checkpoint " + p("run/checkpoint.json") + " --data " + p("data") + " --out " + p("run"), &out),
            0)
      << out;
  ASSERT_EQ(run("eval --trajectory " + p("run/trajectory.jsonl") + " --data " + p("data") + " --out " +
                    p("run/report.json"),
                &out),
            0)
      << out;
  EXPECT_NE(out.find("Success"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "run" / "report.json"));

  // Ground truth with a different number of tracks.
  EXPECT_NE(run("eval --trajectory " + p("run/trajectory.jsonl") + " --data " + p("data/train.jsonl"), &out), 0);
  EXPECT_NE(out.find("tracks"), std::string::npos) << out;
}
