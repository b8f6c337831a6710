#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "atcon/metrics.hpp"
#include "atcon/tensor.hpp"

namespace atcon {

struct LabeledSample {
  int id = 0;
  Tensor image;             // [C,H,W] in [0,1]
  std::vector<int> labels;  // multi-hot
  std::vector<Box> boxes;

  /// Lowest positive class, -1 when there is none.
  int first_positive() const;
};

struct DatasetSplit {
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;
  int samples_per_class = 0;  // train images per (first positive) class
};

struct Dataset {
  int num_classes = 0;
  int image_size = 0;
  int channels = 3;
  bool multilabel = false;
  std::vector<LabeledSample> samples;  // samples[i].id == i
  DatasetSplit split;

  const LabeledSample& at(int id) const;
  /// Checks labels, boxes and splits; throws DataError.
  void validate() const;
};

struct SyntheticConfig {
  int num_classes = 4;
  int samples_per_class = 16;  // train
  int val_per_class = 8;
  int test_per_class = 8;
  int image_size = 32;
  int channels = 3;
  bool multilabel = false;  // 1-3 shapes per image when set
  double noise = 0.15;      // amplitude of the uniform background noise
  std::uint64_t seed = 0;
};

/// Shape family drawn for each class index.
const std::vector<std::string>& shape_family_names();

/// Shapes on noise backgrounds with tight boxes. Pixel values are stored on the
/// 8-bit grid so a saved and reloaded dataset is bit-identical.
Dataset generate_synthetic(const SyntheticConfig& cfg);

/// Stratified subsample of the train split, grouping images by first positive
/// class. val and test are untouched.
DatasetSplit subsample_per_class(const Dataset& dataset, int n, std::uint64_t seed);

struct AugmentParams {
  double angle_deg = 0.0;
  bool hflip = false;
  bool vflip = false;
};

/// Parameters drawn for one (sample, epoch, seed) triple.
AugmentParams draw_augment(int sample_id, int epoch, std::uint64_t seed);
/// Rotation about the centre with reflected borders, then the flips.
Tensor augment_with(const Tensor& image, const AugmentParams& params);
Tensor augment(const Tensor& image, int sample_id, int epoch, std::uint64_t seed);

/// images/<id>.ppm plus manifest.json. Writes to a temporary sibling and renames.
/// `generator`, when given, is stored in the manifest as the producing config.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir, const nlohmann::json* generator = nullptr);
/// Loads a dataset directory; `image_size` > 0 resizes every image (and its
/// boxes) to that square resolution.
Dataset load_dataset(const std::filesystem::path& dir, int image_size = 0);

}  // namespace atcon
