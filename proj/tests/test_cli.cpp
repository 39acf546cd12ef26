#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "ccm/cli.hpp"
#include "ccm/dataset.hpp"
#include "ccm/image.hpp"

namespace ccm {
namespace {

namespace fs = std::filesystem;

struct CliResult {
  int code = 0;
  std::string out, err;
};

CliResult ccm_run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  CliResult r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("ccm_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) + "_" +
             std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  std::string path(const std::string& name) const { return (root_ / name).string(); }

  CliResult gen(const std::string& name, const std::vector<std::string>& extra = {}) {
    std::vector<std::string> args{"--seed", "3", "--out", path(name), "gen", "--side", "16", "--count", "20",
                                  "--diameter", "3", "--min-sep", "5", "--max-beads", "2"};
    args.insert(args.end(), extra.begin(), extra.end());
    return ccm_run(args);
  }

  fs::path root_;
};

TEST_F(CliTest, HelpSucceedsAndBadUsageExitsTwo) {
  EXPECT_EQ(ccm_run({"--help"}).code, 0);
  EXPECT_EQ(ccm_run({}).code, 2);
  EXPECT_EQ(ccm_run({"frobnicate"}).code, 2);
  EXPECT_EQ(ccm_run({"--threads", "0", "gen"}).code, 2);
  EXPECT_EQ(ccm_run({"gen", "--kind", "stars", "--out", path("x")}).code, 2);
}

TEST_F(CliTest, MissingInputsExitThree) {
  const CliResult r = ccm_run({"--out", path("s"), "solve", "--dataset", path("nowhere")});
  EXPECT_EQ(r.code, 3);
  EXPECT_FALSE(r.err.empty());
}

TEST_F(CliTest, GenIsDeterministicUnderTheSameSeed) {
  ASSERT_EQ(gen("a").code, 0);
  ASSERT_EQ(gen("b").code, 0);
  EXPECT_EQ(hash_directory(path("a")), hash_directory(path("b")));
  EXPECT_TRUE(fs::exists(root_ / "a" / "operator.ccmm"));
  const PairedDataset ds = load_dataset(path("a"));
  EXPECT_EQ(ds.entries.size(), 20u);
  EXPECT_EQ(ds.manifest.train_indices.size(), 18u);

  ASSERT_EQ(ccm_run({"--seed", "4", "--out", path("c"), "gen", "--side", "16", "--count", "20", "--diameter", "3",
                     "--min-sep", "5", "--max-beads", "2"})
                .code,
            0);
  EXPECT_NE(hash_directory(path("a")), hash_directory(path("c")));
}

TEST_F(CliTest, GlyphManifestRecordsTheKind) {
  ASSERT_EQ(ccm_run({"--out", path("g"), "gen", "--kind", "glyphs", "--side", "16", "--count", "4", "--grid", "4"})
                .code,
            0);
  const PairedDataset ds = load_dataset(path("g"));
  ASSERT_TRUE(ds.manifest.phantom.has_value());
  EXPECT_EQ(ds.manifest.phantom->kind(), PhantomKind::glyphs);
}

TEST_F(CliTest, EvalOfIdenticalImagesIsPerfect) {
  ImageGrid img(16, 16, 1.0);
  for (std::size_t i = 0; i < img.size(); ++i) img.data()[i] = static_cast<double>(i % 5) / 4.0;
  write_imgf(fs::path(path("a.imgf")), img);
  const CliResult r = ccm_run({"eval", "--recon", path("a.imgf"), "--reference", path("a.imgf")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("mean SSIM 1,"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("mean MAE 0"), std::string::npos) << r.out;
}

TEST_F(CliTest, CalibrateSolveAndEvalPipeline) {
  ASSERT_EQ(gen("d").code, 0);
  const CliResult cal = ccm_run({"--out", path("probed.ccmm"), "calibrate", "--dataset", path("d")});
  ASSERT_EQ(cal.code, 0) << cal.err;
  EXPECT_NE(cal.out.find("256 probes"), std::string::npos) << cal.out;

  const CliResult sol = ccm_run({"--out", path("lin"), "solve", "--operator", path("probed.ccmm"), "--dataset", path("d"),
                           "--sweep", "1e-6,1e-3,1e-1"});
  ASSERT_EQ(sol.code, 0) << sol.err;
  EXPECT_TRUE(fs::exists(root_ / "lin" / "sweep.csv"));
  EXPECT_TRUE(fs::exists(root_ / "lin" / "report.csv"));

  const CliResult ev = ccm_run({"--out", path("ev"), "eval", "--dataset", path("d"), "--recon", path("lin"),
                          "--triptychs", "1"});
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_TRUE(fs::exists(root_ / "ev" / "report.csv"));
  std::size_t pgms = 0;
  for (const auto& f : fs::directory_iterator(root_ / "ev")) pgms += f.path().extension() == ".pgm";
  EXPECT_EQ(pgms, 1u);
}

TEST_F(CliTest, TrainAndInferSmallNetwork) {
  ASSERT_EQ(gen("d").code, 0);
  const CliResult tr = ccm_run({"--out", path("m"), "train", "--dataset", path("d"), "--epochs", "1", "--batch", "6",
                          "--depth", "1", "--base", "4", "--growth", "4"});
  ASSERT_EQ(tr.code, 0) << tr.err;
  EXPECT_TRUE(fs::exists(root_ / "m" / "model.ccmw"));
  EXPECT_TRUE(fs::exists(root_ / "m" / "loss_curve.csv"));
  EXPECT_NE(tr.out.find("train: 1 epochs, 3 steps"), std::string::npos) << tr.out;

  const CliResult inf = ccm_run({"--out", path("r"), "infer", "--model", path("m/model.ccmw"), "--dataset", path("d")});
  ASSERT_EQ(inf.code, 0) << inf.err;
  EXPECT_NE(inf.out.find("infer: 2 images"), std::string::npos) << inf.out;
}

TEST_F(CliTest, BenchRejectsTooFewReps) {
  EXPECT_EQ(ccm_run({"--out", path("b.csv"), "bench", "--artifacts", path("art"), "--reps", "99"}).code, 2);
}

TEST_F(CliTest, BenchNamesAMissingArtifact) {
  const CliResult r = ccm_run({"--out", path("b.csv"), "bench", "--artifacts", path("art"), "--sides", "16"});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("side_16"), std::string::npos) << r.err;
}

}  // namespace
}  // namespace ccm
