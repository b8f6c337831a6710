#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "atcon/data.hpp"
#include "atcon/errors.hpp"

using namespace atcon;
namespace fs = std::filesystem;

namespace {

SyntheticConfig small_config(std::uint64_t seed = 7, bool multilabel = false) {
  SyntheticConfig cfg;
  cfg.num_classes = 4;
  cfg.samples_per_class = 6;
  cfg.val_per_class = 2;
  cfg.test_per_class = 2;
  cfg.multilabel = multilabel;
  cfg.seed = seed;
  return cfg;
}

std::map<int, int> first_positive_counts(const Dataset& d, const std::vector<int>& ids) {
  std::map<int, int> counts;
  for (int id : ids) ++counts[d.at(id).first_positive()];
  return counts;
}

bool same_samples(const Dataset& a, const Dataset& b) {
  if (a.samples.size() != b.samples.size()) return false;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    const auto &s = a.samples[i], &t = b.samples[i];
    if (!(s.image == t.image) || s.labels != t.labels || s.boxes != t.boxes) return false;
  }
  return a.split.train == b.split.train && a.split.val == b.split.val && a.split.test == b.split.test;
}

}  // namespace

TEST(Synthetic, DeterministicPerSeed) {
  EXPECT_TRUE(same_samples(generate_synthetic(small_config(7)), generate_synthetic(small_config(7))));
  EXPECT_FALSE(same_samples(generate_synthetic(small_config(7)), generate_synthetic(small_config(8))));
}

TEST(Synthetic, InvariantsAndMarginals) {
  for (bool ml : {false, true}) {
    const Dataset d = generate_synthetic(small_config(3, ml));
    EXPECT_NO_THROW(d.validate());
    for (const auto& s : d.samples) {
      for (double v : s.image.data()) {
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
      }
      int positives = 0;
      for (int c = 0; c < d.num_classes; ++c) {
        if (!s.labels[c]) continue;
        ++positives;
        const bool has_box = std::any_of(s.boxes.begin(), s.boxes.end(), [&](const Box& b) { return b.cls == c; });
        EXPECT_TRUE(has_box) << "sample " << s.id << " class " << c;
      }
      EXPECT_GE(positives, 1);
      EXPECT_LE(positives, ml ? 3 : 1);
      for (const auto& b : s.boxes) {
        EXPECT_LT(b.x0, b.x1);
        EXPECT_LT(b.y0, b.y1);
        EXPECT_GE(b.x0, 0);
        EXPECT_LE(b.x1, d.image_size);
      }
    }
    for (const auto& [cls, n] : first_positive_counts(d, d.split.train)) EXPECT_EQ(n, 6) << cls;
    std::set<int> all(d.split.train.begin(), d.split.train.end());
    all.insert(d.split.val.begin(), d.split.val.end());
    all.insert(d.split.test.begin(), d.split.test.end());
    EXPECT_EQ(all.size(), d.split.train.size() + d.split.val.size() + d.split.test.size());
  }
}

TEST(Synthetic, BoxesContainTheShape) {
  // The generator draws shapes brighter than any background pixel can be.
  SyntheticConfig cfg = small_config(4);
  cfg.noise = 0.1;
  const Dataset d = generate_synthetic(cfg);
  for (const auto& s : d.samples) {
    const int h = d.image_size, w = d.image_size;
    long inside = 0, total = 0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double bright = 0;
        for (int c = 0; c < d.channels; ++c) bright = std::max<double>(bright, s.image.at(c, y, x));
        if (bright < 0.55) continue;
        ++total;
        for (const auto& b : s.boxes) {
          if (x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1) {
            ++inside;
            break;
          }
        }
      }
    }
    ASSERT_GT(total, 0);
    EXPECT_GE(static_cast<double>(inside) / static_cast<double>(total), 0.8) << "sample " << s.id;
  }
}

TEST(Synthetic, RejectsUnsupportedConfigs) {
  SyntheticConfig cfg = small_config();
  cfg.num_classes = 9;
  EXPECT_THROW(generate_synthetic(cfg), ConfigError);
  cfg.num_classes = 1;
  EXPECT_THROW(generate_synthetic(cfg), ConfigError);
  cfg.num_classes = 4;
  cfg.image_size = 16;
  EXPECT_THROW(generate_synthetic(cfg), ConfigError);
}

TEST(Subsample, CountsIdentityAndSeeds) {
  const Dataset d = generate_synthetic(small_config(2));
  const DatasetSplit full = subsample_per_class(d, 6, 1);
  std::vector<int> a = full.train, b = d.split.train;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);

  const DatasetSplit two = subsample_per_class(d, 2, 1);
  EXPECT_EQ(two.train.size(), 8u);
  EXPECT_EQ(two.samples_per_class, 2);
  EXPECT_EQ(two.val, d.split.val);
  EXPECT_EQ(two.test, d.split.test);
  for (const auto& [cls, n] : first_positive_counts(d, two.train)) EXPECT_EQ(n, 2) << cls;
  EXPECT_EQ(subsample_per_class(d, 2, 1).train, two.train);

  bool differs = false;
  for (std::uint64_t s = 2; s < 6 && !differs; ++s) {
    const DatasetSplit other = subsample_per_class(d, 2, s);
    EXPECT_EQ(first_positive_counts(d, other.train), first_positive_counts(d, two.train));
    std::vector<int> x = other.train, y = two.train;
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    differs = x != y;
  }
  EXPECT_TRUE(differs);
  EXPECT_THROW(subsample_per_class(d, 7, 1), ConfigError);
}

TEST(Augment, IdentitiesAndRange) {
  const Dataset d = generate_synthetic(small_config(5));
  const Tensor& img = d.samples[0].image;
  EXPECT_EQ(augment_with(img, {}), img);
  AugmentParams h;
  h.hflip = true;
  EXPECT_EQ(augment_with(augment_with(img, h), h), img);
  AugmentParams v;
  v.vflip = true;
  EXPECT_EQ(augment_with(augment_with(img, v), v), img);
  EXPECT_NE(augment_with(img, h), img);

  int flips_h = 0, flips_v = 0;
  for (int id = 0; id < 400; ++id) {
    const AugmentParams p = draw_augment(id, 3, 9);
    EXPECT_GE(p.angle_deg, -10.0);
    EXPECT_LE(p.angle_deg, 10.0);
    flips_h += p.hflip;
    flips_v += p.vflip;
    const AugmentParams q = draw_augment(id, 3, 9);
    EXPECT_EQ(p.angle_deg, q.angle_deg);
  }
  EXPECT_NEAR(flips_h / 400.0, 0.5, 0.1);
  EXPECT_NEAR(flips_v / 400.0, 0.5, 0.1);

  for (int id = 0; id < 10; ++id) {
    const Tensor out = augment(d.samples[id].image, id, 1, 4);
    EXPECT_EQ(out.shape(), d.samples[id].image.shape());
    EXPECT_EQ(out, augment(d.samples[id].image, id, 1, 4));
    for (double x : out.data()) {
      ASSERT_GE(x, 0.0);
      ASSERT_LE(x, 1.0);
    }
  }
}

TEST(DatasetIo, RoundTripAndIngestion) {
  const fs::path dir = fs::temp_directory_path() / "atcon_data_rt";
  fs::remove_all(dir);
  const Dataset d = generate_synthetic(small_config(6, true));
  save_dataset(d, dir);
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir / "images" / "000000.ppm"));
  const Dataset back = load_dataset(dir);
  EXPECT_TRUE(same_samples(d, back));
  EXPECT_EQ(back.multilabel, true);

  const Dataset big = load_dataset(dir, 64);
  EXPECT_EQ(big.image_size, 64);
  EXPECT_EQ(big.samples[0].image.shape(), (Shape{3, 64, 64}));
  EXPECT_NO_THROW(big.validate());
  EXPECT_EQ(big.samples[0].boxes[0].x0, 2 * d.samples[0].boxes[0].x0);

  // a manifest with an out-of-range box is rejected
  nlohmann::json manifest;
  std::ifstream(dir / "manifest.json") >> manifest;
  manifest["samples"][0]["boxes"][0][3] = 1000;  // x1
  std::ofstream(dir / "manifest.json") << manifest.dump();
  EXPECT_THROW(load_dataset(dir), DataError);
  fs::remove_all(dir);
  EXPECT_THROW(load_dataset(dir), IoError);
}
