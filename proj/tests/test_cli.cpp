#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dabdu_cli.hpp"

using namespace dabdu;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("dabdu_cli_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// A small but complete configuration: 16x16 images, two levels.
std::vector<std::string> small_flags(const fs::path& root) {
  return {"--data", (root / "data").string(), "--runs", (root / "runs").string(), "--n_train", "6", "--n_val", "3",
          "--size", "16", "--radius_min", "2", "--radius_max", "4", "--levels", "2", "--stem_channels", "4",
          "--growth_rate", "2", "--block_layers", "1", "--attention_dim", "2", "--epochs", "1", "--batch_size", "3"};
}

std::vector<std::string> with(std::vector<std::string> head, const std::vector<std::string>& tail) {
  head.insert(head.end(), tail.begin(), tail.end());
  return head;
}

}  // namespace

TEST(Cli, GenTrainEvalInfer) {
  const fs::path root = scratch("pipeline");
  const auto flags = small_flags(root);
  ASSERT_EQ(invoke(with({"gen", "--emit-pgm"}, flags)).code, 0);
  EXPECT_TRUE(fs::exists(root / "data/train/0.img.dtf"));
  EXPECT_TRUE(fs::exists(root / "data/val/2.mask.dtf"));
  EXPECT_TRUE(fs::exists(root / "data/val/2.img.pgm"));

  const auto tr = invoke(with({"train"}, flags));
  ASSERT_EQ(tr.code, 0) << tr.err;
  const fs::path run = root / "runs/DA-BDense-UNet";
  for (const char* f : {"weights.dtf", "report.json", "model.schema.json"}) EXPECT_TRUE(fs::exists(run / f)) << f;
  const auto report = nlohmann::json::parse(slurp(run / "report.json"));

  const auto ev = invoke(with({"eval"}, flags));
  ASSERT_EQ(ev.code, 0) << ev.err;
  const auto j = nlohmann::json::parse(ev.out);
  EXPECT_EQ(j["samples"], 3);
  EXPECT_NEAR(j["dc_mean"].get<double>(), report["final_val_dc_mean"].get<double>(), 1e-12);

  const auto inf = invoke(with({"infer", "--emit-pgm"}, flags));
  ASSERT_EQ(inf.code, 0) << inf.err;
  EXPECT_TRUE(fs::exists(run / "predictions/0.pred.dtf"));
  EXPECT_TRUE(fs::exists(run / "predictions/0.overlay.pgm"));
  const Tensor pred = dtf::read_tensor(run / "predictions/1.pred.dtf");
  EXPECT_EQ(pred.shape(), (Shape{1, 16, 16}));
  for (double v : pred.values()) EXPECT_TRUE(v == 0.0 || v == 1.0);
}

TEST(Cli, TrainAndAblateAreByteIdentical) {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  for (const auto& root : {a, b}) {
    ASSERT_EQ(invoke(with({"train"}, small_flags(root))).code, 0);
    ASSERT_EQ(invoke(with({"ablate", "--variants", "BDLSTM-DenseUNet,DA-BDense-UNet"}, small_flags(root))).code, 0);
  }
  EXPECT_EQ(slurp(a / "runs/DA-BDense-UNet/report.json"), slurp(b / "runs/DA-BDense-UNet/report.json"));
  EXPECT_EQ(slurp(a / "runs/ablation/ablation.json"), slurp(b / "runs/ablation/ablation.json"));
  EXPECT_EQ(slurp(a / "runs/DA-BDense-UNet/weights.dtf"), slurp(b / "runs/DA-BDense-UNet/weights.dtf"));
}

TEST(Cli, AblateAllGivesFiveRows) {
  const fs::path root = scratch("ablate");
  const auto r = invoke(with({"ablate", "--variants", "all"}, small_flags(root)));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(slurp(root / "runs/ablation/ablation.json"));
  ASSERT_EQ(j["rows"].size(), 5u);
  const std::vector<std::string> names{"UNet-skip-concat", "BDLSTM-DenseUNet", "BDense-UNet-1", "BDense-UNet-2",
                                       "DA-BDense-UNet"};
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(j["rows"][i]["variant"], names[i]);
    EXPECT_EQ(j["rows"][i]["reference_dc"]["reproducible"], false);
    EXPECT_NE(r.out.find(names[i]), std::string::npos);
  }
  EXPECT_TRUE(fs::exists(root / "runs/ablation/ablation.txt"));
}

TEST(Cli, ConfigFileAndOverrides) {
  const fs::path root = scratch("config");
  std::ofstream(root / "c.toml") << "size = 16\nn_train = 4\nn_val = 2\nradius_min = 2\nradius_max = 4\n"
                                  << "data = \"" << (root / "data").generic_string() << "\"\n";
  ASSERT_EQ(invoke({"gen", "--config", (root / "c.toml").string(), "--n_val", "5"}).code, 0);
  EXPECT_EQ(data::list_indices(root / "data/train").size(), 4u);
  EXPECT_EQ(data::list_indices(root / "data/val").size(), 5u);
}

TEST(Cli, GradcheckPasses) {
  const auto r = invoke({"gradcheck", "--seed", "7", "--seeds", "1"});
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(invoke({"train", "--no-such-flag"}).code, 1);
  EXPECT_EQ(invoke({}).code, 1);
  EXPECT_EQ(invoke({"--help"}).code, 0);
  EXPECT_EQ(invoke({"train", "--variant", "UNet"}).code, 1);
  EXPECT_EQ(invoke({"train", "--cell_output", "relu"}).code, 1);
  const fs::path root = scratch("codes");
  EXPECT_EQ(invoke({"eval", "--weights", (root / "missing.dtf").string()}).code, 2);
}
