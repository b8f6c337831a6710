#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "atcon_cli_test";

int run_cli(const std::string& args) {
  const std::string cmd = std::string(ATCON_CLI_PATH) + " " + args + " > " + (kWork / "last.log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// relative path -> bytes, for every regular file under `dir`
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_file(e.path());
  return out;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    ASSERT_EQ(run_cli("gen-data --classes 2 --per-class 4 --val-per-class 2 --test-per-class 2 --seed 7 --out-dir " +
                      (kWork / "data").string()),
              0);
  }
  static std::string data() { return "--dataset " + (kWork / "data").string(); }
};

}  // namespace

TEST_F(Cli, GenDataIsReproducible) {
  const std::string args = "gen-data --classes 4 --per-class 16 --seed 7 --out-dir ";
  ASSERT_EQ(run_cli(args + (kWork / "g1").string()), 0);
  ASSERT_EQ(run_cli(args + (kWork / "g2").string()), 0);
  const auto a = snapshot(kWork / "g1"), b = snapshot(kWork / "g2");
  EXPECT_GT(a.size(), 64u);
  EXPECT_EQ(a, b);
}

TEST_F(Cli, SmokePipeline) {
  const fs::path sup = kWork / "sup", ft = kWork / "ft", ev = kWork / "ev", attr = kWork / "attr";
  ASSERT_EQ(run_cli("train --strategy supervised --epochs 2 --channels 4,8 --seed 1 " + data() + " --out-dir " +
                    sup.string()),
            0)
      << read_file(kWork / "last.log");
  for (const char* f : {"model/manifest.json", "run_log.jsonl", "config.json"}) EXPECT_TRUE(fs::exists(sup / f)) << f;

  ASSERT_EQ(run_cli("finetune --epochs 2 --checkpoint " + (sup / "model").string() + " " + data() + " --out-dir " +
                    ft.string()),
            0)
      << read_file(kWork / "last.log");
  const std::string log = read_file(ft / "run_log.jsonl");
  EXPECT_NE(log.find("\"strategy\":\"finetune\""), std::string::npos);

  ASSERT_EQ(run_cli("eval --checkpoint " + (ft / "model").string() + " " + data() + " --out-dir " + ev.string()), 0)
      << read_file(kWork / "last.log");
  const auto metrics = nlohmann::json::parse(read_file(ev / "metrics.json"));
  for (const char* key : {"mean_f1", "map", "overlap_iou", "per_class_f1", "consistency"})
    EXPECT_TRUE(metrics.contains(key)) << key;
  EXPECT_TRUE(fs::exists(ev / "metrics.csv"));

  ASSERT_EQ(run_cli("attribute --limit 2 --checkpoint " + (ft / "model").string() + " " + data() + " --out-dir " +
                    attr.string()),
            0)
      << read_file(kWork / "last.log");
  const auto index = nlohmann::json::parse(read_file(attr / "attributions.json"));
  ASSERT_EQ(index.at("maps").size(), 6u);
  const std::string stem = index.at("maps")[0].at("stem");
  for (const char* ext : {".atct", ".pgm", "_overlay.ppm"}) EXPECT_TRUE(fs::exists(attr / (stem + ext))) << stem << ext;
}

TEST_F(Cli, AblateEmitsLabelledMatrix) {
  const fs::path out = kWork / "ablate";
  ASSERT_EQ(run_cli("ablate --epochs 3 --channels 4,8 --augment false " + data() + " --out-dir " + out.string()), 0)
      << read_file(kWork / "last.log");
  EXPECT_EQ(read_file(out / "ablation.csv").substr(0, 39), "matching,Pearson,Cross-correlation,SSIM");
  const auto j = nlohmann::json::parse(read_file(out / "ablation.json"));
  EXPECT_EQ(j.at("cells").size(), 12u);
  EXPECT_EQ(j.at("supervised_series").size(), 3u);
}

TEST_F(Cli, ConfigFileLayering) {
  const fs::path cfg = kWork / "train.cfg";
  std::ofstream(cfg) << "# comment\nepochs = 1\nchannels = 4,8\nlr = 0.01\n";
  const fs::path out = kWork / "layered";
  ASSERT_EQ(run_cli("train --config " + cfg.string() + " --lr 0.002 " + data() + " --out-dir " + out.string()), 0)
      << read_file(kWork / "last.log");
  const auto c = nlohmann::json::parse(read_file(out / "config.json"));
  EXPECT_EQ(c.at("train").at("epochs"), 1);
  EXPECT_DOUBLE_EQ(c.at("train").at("lr").get<double>(), 0.002);

  std::ofstream(cfg) << "epochs = 1\nwarmup = 3\n";
  EXPECT_EQ(run_cli("train --config " + cfg.string() + " " + data() + " --out-dir " + out.string()), 2);
  EXPECT_NE(read_file(kWork / "last.log").find("unknown key 'warmup'"), std::string::npos);
}

TEST_F(Cli, ErrorsGiveNonzeroExit) {
  EXPECT_NE(run_cli("eval --checkpoint " + (kWork / "missing").string() + " " + data() + " --out-dir " +
                    (kWork / "e").string()),
            0);
  EXPECT_NE(run_cli("train --dataset " + (kWork / "nowhere").string() + " --out-dir " + (kWork / "x").string()), 0);
  EXPECT_NE(run_cli("train --bogus 1 " + data() + " --out-dir " + (kWork / "x").string()), 0);
  EXPECT_NE(run_cli("gen-data --classes 12 --out-dir " + (kWork / "bad").string()), 0);
  EXPECT_FALSE(fs::exists(kWork / "bad" / "manifest.json"));
  EXPECT_NE(run_cli(""), 0);
}
