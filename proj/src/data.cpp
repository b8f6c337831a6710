#include "atcon/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numbers>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "atcon/errors.hpp"
#include "atcon/image_io.hpp"

namespace atcon {

namespace fs = std::filesystem;
using nlohmann::json;

int LabeledSample::first_positive() const {
  for (std::size_t c = 0; c < labels.size(); ++c) {
    if (labels[c]) return static_cast<int>(c);
  }
  return -1;
}

const LabeledSample& Dataset::at(int id) const {
  if (id < 0 || id >= static_cast<int>(samples.size())) throw DataError("sample id " + std::to_string(id) + " out of range");
  return samples[static_cast<std::size_t>(id)];
}

void Dataset::validate() const {
  if (num_classes < 2) throw DataError("dataset needs at least two classes");
  if (channels != 1 && channels != 3) throw DataError("dataset channels must be 1 or 3");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const std::string tag = "sample " + std::to_string(s.id);
    if (s.id != static_cast<int>(i)) throw DataError(tag + ": ids must be 0..N-1 in order");
    if (s.image.shape() != Shape{channels, image_size, image_size}) {
      throw DataError(tag + ": image shape " + shape_string(s.image.shape()));
    }
    for (Real v : s.image.data()) {
      if (!(v >= 0.0f && v <= 1.0f)) throw DataError(tag + ": pixel outside [0,1]");
    }
    if (static_cast<int>(s.labels.size()) != num_classes) throw DataError(tag + ": label vector length");
    int positives = 0;
    for (int y : s.labels) {
      if (y != 0 && y != 1) throw DataError(tag + ": labels must be 0/1");
      positives += y;
    }
    if (positives == 0) throw DataError(tag + ": no positive label");
    if (!multilabel && positives != 1) throw DataError(tag + ": multiclass sample with several labels");
    for (const Box& b : s.boxes) {
      if (b.cls < 0 || b.cls >= num_classes || !s.labels[static_cast<std::size_t>(b.cls)]) {
        throw DataError(tag + ": box of a class the image is not labelled with");
      }
      if (!(0 <= b.x0 && b.x0 < b.x1 && b.x1 <= image_size && 0 <= b.y0 && b.y0 < b.y1 && b.y1 <= image_size)) {
        throw DataError(tag + ": box outside the image or empty");
      }
    }
    for (int c = 0; c < num_classes; ++c) {
      if (!s.labels[static_cast<std::size_t>(c)]) continue;
      if (std::none_of(s.boxes.begin(), s.boxes.end(), [c](const Box& b) { return b.cls == c; })) {
        throw DataError(tag + ": positive class " + std::to_string(c) + " without a box");
      }
    }
  }
  std::set<int> seen;
  for (const auto* part : {&split.train, &split.val, &split.test}) {
    for (int id : *part) {
      at(id);
      if (!seen.insert(id).second) throw DataError("sample " + std::to_string(id) + " is in more than one split");
    }
  }
}

// ---- synthetic generator -----------------------------------------------------------

namespace {

using ShapeTest = std::function<bool(double u, double v)>;

const std::vector<ShapeTest>& shape_tests() {
  static const std::vector<ShapeTest> tests{
      [](double u, double v) { return u * u + v * v <= 1.0; },  // circle
      [](double u, double v) { return std::abs(u) <= 0.8 && std::abs(v) <= 0.8; },
      [](double u, double v) { return v >= -0.9 && v <= 0.9 && std::abs(u) <= (v + 0.9) * 0.53; },
      [](double u, double v) {
        return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
      },
      [](double u, double v) {
        const double d = std::sqrt(u * u + v * v);
        return d >= 0.55 && d <= 1.0;
      },
      [](double u, double v) { return std::abs(u) + std::abs(v) <= 1.0; },
      [](double u, double v) {
        return std::abs(u) <= 0.9 && std::abs(v) <= 0.9 && (std::abs(u - v) <= 0.4 || std::abs(u + v) <= 0.4);
      },
      [](double u, double v) {
        const double m = std::max(std::abs(u), std::abs(v));
        return m >= 0.5 && m <= 0.9;
      },
  };
  return tests;
}

struct Placement {
  double cx, cy, r;
};

bool overlaps(const Placement& a, const Placement& b) {
  return std::abs(a.cx - b.cx) < a.r + b.r + 1.0 && std::abs(a.cy - b.cy) < a.r + b.r + 1.0;
}

LabeledSample render(int id, const std::vector<int>& classes, const SyntheticConfig& cfg, std::mt19937_64& rng) {
  const int s = cfg.image_size, ch = cfg.channels;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  LabeledSample sample;
  sample.id = id;
  sample.labels.assign(static_cast<std::size_t>(cfg.num_classes), 0);
  sample.image = Tensor(Shape{ch, s, s});

  const double base = 0.05 + 0.15 * unit(rng);
  for (Real& v : sample.image.data()) v = static_cast<Real>(base + cfg.noise * unit(rng));

  std::vector<Placement> placed;
  for (std::size_t n = 0; n < classes.size(); ++n) {
    const int cls = classes[n];
    Placement p{};
    bool ok = false;
    for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
      p.r = s * (0.18 + 0.12 * unit(rng));
      p.cx = p.r + (s - 2 * p.r) * unit(rng);
      p.cy = p.r + (s - 2 * p.r) * unit(rng);
      ok = std::none_of(placed.begin(), placed.end(), [&](const Placement& q) { return overlaps(p, q); });
    }
    if (!ok) {
      if (n == 0) throw InternalError("could not place the first shape");
      continue;  // extra shape dropped
    }
    placed.push_back(p);
    double color[3];
    for (double& c : color) c = 0.55 + 0.45 * unit(rng);
    const auto& inside = shape_tests()[static_cast<std::size_t>(cls)];
    Box box{cls, s, s, -1, -1};
    for (int i = 0; i < s; ++i) {
      for (int j = 0; j < s; ++j) {
        const double u = (j + 0.5 - p.cx) / p.r, v = (i + 0.5 - p.cy) / p.r;
        if (!inside(u, v)) continue;
        for (int k = 0; k < ch; ++k) {
          const double c = ch == 3 ? color[k] : (color[0] + color[1] + color[2]) / 3.0;
          sample.image.at(k, i, j) = static_cast<Real>(std::min(1.0, c + 0.05 * (unit(rng) - 0.5)));
        }
        box.x0 = std::min(box.x0, j);
        box.y0 = std::min(box.y0, i);
        box.x1 = std::max(box.x1, j + 1);
        box.y1 = std::max(box.y1, i + 1);
      }
    }
    if (box.x1 < 0) throw InternalError("shape rendered no pixels");
    sample.labels[static_cast<std::size_t>(cls)] = 1;
    sample.boxes.push_back(box);
  }
  for (Real& v : sample.image.data()) v = quantize8(v);
  return sample;
}

}  // namespace

const std::vector<std::string>& shape_family_names() {
  static const std::vector<std::string> names{"circle", "square", "triangle", "cross",
                                              "ring",   "diamond", "saltire", "frame"};
  return names;
}

Dataset generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.num_classes < 2 || cfg.num_classes > static_cast<int>(shape_tests().size())) {
    throw ConfigError("synthetic data supports 2 to 8 classes, got " + std::to_string(cfg.num_classes));
  }
  if (cfg.image_size < 32) throw ConfigError("synthetic image size must be at least 32");
  if (cfg.samples_per_class < 1 || cfg.val_per_class < 0 || cfg.test_per_class < 0) {
    throw ConfigError("per-class sample counts must be positive");
  }
  if (cfg.channels != 1 && cfg.channels != 3) throw ConfigError("channels must be 1 or 3");
  if (!(cfg.noise >= 0.0 && cfg.noise <= 0.4)) throw ConfigError("background noise must lie in [0, 0.4]");

  Dataset ds;
  ds.num_classes = cfg.num_classes;
  ds.image_size = cfg.image_size;
  ds.channels = cfg.channels;
  ds.multilabel = cfg.multilabel;
  ds.split.samples_per_class = cfg.samples_per_class;
  std::mt19937_64 rng(cfg.seed);

  auto make_split = [&](int per_class, std::vector<int>& ids) {
    for (int i = 0; i < per_class; ++i) {
      for (int c = 0; c < cfg.num_classes; ++c) {
        std::vector<int> classes{c};
        if (cfg.multilabel) {
          // extra shapes come from higher classes so c stays the first positive
          std::vector<int> higher;
          for (int h = c + 1; h < cfg.num_classes; ++h) higher.push_back(h);
          std::shuffle(higher.begin(), higher.end(), rng);
          const int extra = std::uniform_int_distribution<int>(0, 2)(rng);
          for (int e = 0; e < extra && e < static_cast<int>(higher.size()); ++e) classes.push_back(higher[static_cast<std::size_t>(e)]);
        }
        const int id = static_cast<int>(ds.samples.size());
        ds.samples.push_back(render(id, classes, cfg, rng));
        ids.push_back(id);
      }
    }
  };
  make_split(cfg.samples_per_class, ds.split.train);
  make_split(cfg.val_per_class, ds.split.val);
  make_split(cfg.test_per_class, ds.split.test);
  ds.validate();
  return ds;
}

DatasetSplit subsample_per_class(const Dataset& dataset, int n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("subsample size must be at least 1");
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(dataset.num_classes));
  for (int id : dataset.split.train) {
    const int c = dataset.at(id).first_positive();
    if (c < 0) throw DataError("train sample without a positive label");
    by_class[static_cast<std::size_t>(c)].push_back(id);
  }
  std::mt19937_64 rng(seed);
  DatasetSplit out = dataset.split;
  out.train.clear();
  out.samples_per_class = n;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& ids = by_class[c];
    if (static_cast<int>(ids.size()) < n) {
      throw ConfigError("class " + std::to_string(c) + " has " + std::to_string(ids.size()) + " train images, " +
                        std::to_string(n) + " requested");
    }
    std::shuffle(ids.begin(), ids.end(), rng);
    out.train.insert(out.train.end(), ids.begin(), ids.begin() + n);
  }
  std::sort(out.train.begin(), out.train.end());
  return out;
}

// ---- augmentation ------------------------------------------------------------------

AugmentParams draw_augment(int sample_id, int epoch, std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(sample_id), static_cast<std::uint32_t>(epoch), 0x61756775u};
  std::mt19937_64 rng(seq);
  AugmentParams p;
  p.angle_deg = std::uniform_real_distribution<double>(-10.0, 10.0)(rng);
  p.hflip = std::bernoulli_distribution(0.5)(rng);
  p.vflip = std::bernoulli_distribution(0.5)(rng);
  return p;
}

namespace {

// Mirror about the edge pixels (the edge itself is not repeated).
double reflect(double x, int n) {
  if (n == 1) return 0.0;
  const double period = 2.0 * (n - 1);
  x = std::fmod(std::abs(x), period);
  return x > n - 1 ? period - x : x;
}

}  // namespace

Tensor augment_with(const Tensor& image, const AugmentParams& params) {
  if (image.rank() != 3) throw DimensionError("augment expects a [C,H,W] image");
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  const double rad = params.angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      // inverse rotation of the output position
      const double dy = i - cy, dx = j - cx;
      const double sy = reflect(cy + cs * dy - sn * dx, h);
      const double sx = reflect(cx + sn * dy + cs * dx, w);
      const int y0 = std::min(static_cast<int>(sy), h - 1), x0 = std::min(static_cast<int>(sx), w - 1);
      const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double fy = sy - y0, fx = sx - x0;
      const int ti = params.vflip ? h - 1 - i : i, tj = params.hflip ? w - 1 - j : j;
      for (int k = 0; k < c; ++k) {
        const double v = (1 - fy) * ((1 - fx) * image.at(k, y0, x0) + fx * image.at(k, y0, x1)) +
                         fy * ((1 - fx) * image.at(k, y1, x0) + fx * image.at(k, y1, x1));
        out.at(k, ti, tj) = static_cast<Real>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

Tensor augment(const Tensor& image, int sample_id, int epoch, std::uint64_t seed) {
  return augment_with(image, draw_augment(sample_id, epoch, seed));
}

// ---- directory format ------------------------------------------------------------

namespace {

std::string image_file(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "images/%06d.ppm", id);
  return buf;
}

std::string split_of(const DatasetSplit& split, int id) {
  auto has = [id](const std::vector<int>& v) { return std::find(v.begin(), v.end(), id) != v.end(); };
  if (has(split.train)) return "train";
  if (has(split.val)) return "val";
  if (has(split.test)) return "test";
  return "none";
}

}  // namespace

void save_dataset(const Dataset& dataset, const fs::path& dir, const json* generator) {
  dataset.validate();
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp / "images");
  json samples = json::array();
  for (const auto& s : dataset.samples) {
    write_ppm(tmp / image_file(s.id), s.image);
    json boxes = json::array();
    for (const Box& b : s.boxes) boxes.push_back({b.cls, b.x0, b.y0, b.x1, b.y1});
    samples.push_back({{"id", s.id},
                       {"file", image_file(s.id)},
                       {"split", split_of(dataset.split, s.id)},
                       {"labels", s.labels},
                       {"boxes", boxes}});
  }
  json manifest{{"format", "atcon-dataset"},
                {"version", 1},
                {"num_classes", dataset.num_classes},
                {"image_size", dataset.image_size},
                {"channels", dataset.channels},
                {"multilabel", dataset.multilabel},
                {"samples_per_class", dataset.split.samples_per_class},
                {"box_convention", "half-open pixel ranges [x0,x1) x [y0,y1)"},
                {"samples", samples}};
  if (generator) manifest["generator"] = *generator;
  {
    std::ofstream out(tmp / "manifest.json");
    if (!out) throw IoError("cannot write dataset manifest in " + tmp.string());
    out << manifest.dump(1) << '\n';
    if (!out) throw IoError("failed writing dataset manifest");
  }
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

Dataset load_dataset(const fs::path& dir, int image_size) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("no manifest.json in " + dir.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed dataset manifest: ") + e.what());
  }
  try {
    Dataset ds;
    ds.num_classes = m.at("num_classes").get<int>();
    ds.channels = m.value("channels", 3);
    ds.multilabel = m.value("multilabel", false);
    ds.split.samples_per_class = m.value("samples_per_class", 0);
    const int declared = m.value("image_size", 0);
    ds.image_size = image_size > 0 ? image_size : declared;

    std::vector<json> entries(m.at("samples").begin(), m.at("samples").end());
    std::sort(entries.begin(), entries.end(),
              [](const json& a, const json& b) { return a.at("id").get<int>() < b.at("id").get<int>(); });
    for (const json& e : entries) {
      LabeledSample s;
      s.id = e.at("id").get<int>();
      Tensor img = read_pnm(dir / e.at("file").get<std::string>());
      if (ds.channels == 1 && img.dim(0) == 3) {
        Tensor gray(Shape{1, img.dim(1), img.dim(2)});
        for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = img[i];
        img = gray;
      } else if (ds.channels == 3 && img.dim(0) == 1) {
        Tensor rgb(Shape{3, img.dim(1), img.dim(2)});
        for (int k = 0; k < 3; ++k) {
          std::copy(img.data().begin(), img.data().end(), rgb.data().begin() + static_cast<long>(k * img.size()));
        }
        img = rgb;
      }
      const int h = img.dim(1), w = img.dim(2);
      if (ds.image_size <= 0) {
        if (h != w) throw DataError("image " + std::to_string(s.id) + " is not square; give a target size");
        ds.image_size = h;
      }
      const double sy = static_cast<double>(ds.image_size) / h, sx = static_cast<double>(ds.image_size) / w;
      s.image = resize_image(img, ds.image_size, ds.image_size);
      for (Real& v : s.image.data()) v = std::clamp<Real>(v, 0, 1);
      s.labels = e.at("labels").get<std::vector<int>>();
      for (const json& b : e.at("boxes")) {
        Box box{b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>(), b.at(4).get<int>()};
        if (h != ds.image_size || w != ds.image_size) {
          box.x0 = static_cast<int>(std::floor(box.x0 * sx));
          box.y0 = static_cast<int>(std::floor(box.y0 * sy));
          box.x1 = std::min(ds.image_size, static_cast<int>(std::ceil(box.x1 * sx)));
          box.y1 = std::min(ds.image_size, static_cast<int>(std::ceil(box.y1 * sy)));
        }
        s.boxes.push_back(box);
      }
      const std::string split = e.value("split", "train");
      if (split == "train") ds.split.train.push_back(s.id);
      else if (split == "val") ds.split.val.push_back(s.id);
      else if (split == "test") ds.split.test.push_back(s.id);
      else if (split != "none") throw DataError("unknown split '" + split + "'");
      ds.samples.push_back(std::move(s));
    }
    ds.validate();
    return ds;
  } catch (const json::exception& e) {
    throw DataError(std::string("bad dataset manifest: ") + e.what());
  }
}

}  // namespace atcon
