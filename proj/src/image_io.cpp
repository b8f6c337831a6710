#include "atcon/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "atcon/errors.hpp"

namespace atcon {

namespace {

unsigned char to_byte(Real v) {
  return static_cast<unsigned char>(std::lround(std::clamp<Real>(v, 0, 1) * 255.0f));
}

int read_header_int(std::istream& in) {
  int c = in.peek();
  while (c != EOF && (std::isspace(c) || c == '#')) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else {
      in.get();
    }
    c = in.peek();
  }
  int value = 0;
  if (!(in >> value)) throw IoError("malformed PNM header");
  return value;
}

}  // namespace

Real quantize8(Real v) { return static_cast<Real>(to_byte(v)) / 255.0f; }

void write_pgm(const std::filesystem::path& path, const Tensor& map) {
  if (map.rank() != 2) throw DimensionError("write_pgm expects an [H,W] map");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string());
  out << "P5\n" << map.dim(1) << ' ' << map.dim(0) << "\n255\n";
  std::vector<unsigned char> bytes(map.size());
  std::transform(map.data().begin(), map.data().end(), bytes.begin(), to_byte);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 1)) {
    throw DimensionError("write_ppm expects a [3,H,W] or [1,H,W] image");
  }
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string());
  out << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> bytes(static_cast<std::size_t>(h) * w * 3);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      for (int k = 0; k < 3; ++k) {
        bytes[(static_cast<std::size_t>(i) * w + j) * 3 + k] = to_byte(image.at(c == 3 ? k : 0, i, j));
      }
    }
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Tensor read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic != "P5" && magic != "P6") throw IoError(path.string() + ": only binary PGM/PPM supported");
  const int w = read_header_int(in);
  const int h = read_header_int(in);
  const int maxval = read_header_int(in);
  if (w <= 0 || h <= 0 || maxval != 255) throw IoError(path.string() + ": unsupported PNM geometry or depth");
  in.get();  // single whitespace before raster
  const int c = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> bytes(static_cast<std::size_t>(h) * w * c);
  if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
    throw IoError(path.string() + ": truncated raster");
  }
  Tensor img(Shape{c, h, w});
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      for (int k = 0; k < c; ++k) {
        img.at(k, i, j) = static_cast<Real>(bytes[(static_cast<std::size_t>(i) * w + j) * c + k]) / 255.0f;
      }
    }
  }
  return img;
}

Tensor resize_image(const Tensor& image, int height, int width) {
  if (image.rank() != 3) throw DimensionError("resize_image expects [C,H,W]");
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == height && w == width) return image;
  Tensor out(Shape{c, height, width});
  auto axis = [](int dst, int in, int outn, int& i0, int& i1, Real& frac) {
    Real src = (static_cast<Real>(dst) + 0.5f) * static_cast<Real>(in) / static_cast<Real>(outn) - 0.5f;
    if (src < 0) src = 0;
    i0 = std::min(static_cast<int>(src), in - 1);
    i1 = std::min(i0 + 1, in - 1);
    frac = src - static_cast<Real>(i0);
  };
  for (int i = 0; i < height; ++i) {
    int r0, r1;
    Real fr;
    axis(i, h, height, r0, r1, fr);
    for (int j = 0; j < width; ++j) {
      int c0, c1;
      Real fc;
      axis(j, w, width, c0, c1, fc);
      for (int k = 0; k < c; ++k) {
        out.at(k, i, j) = (1 - fr) * ((1 - fc) * image.at(k, r0, c0) + fc * image.at(k, r0, c1)) +
                          fr * ((1 - fc) * image.at(k, r1, c0) + fc * image.at(k, r1, c1));
      }
    }
  }
  return out;
}

}  // namespace atcon
