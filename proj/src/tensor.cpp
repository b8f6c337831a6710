#include "atcon/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "atcon/errors.hpp"

namespace atcon {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Real fill) : shape_(std::move(shape)) {
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_string(shape_));
  }
}

Tensor Tensor::from(std::initializer_list<Real> values) {
  return Tensor(Shape{static_cast<int>(values.size())}, std::vector<Real>(values));
}

int Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw DimensionError("axis out of range for " + shape_string(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

Real Tensor::at(int i, int j) const { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }
Real& Tensor::at(int i, int j) { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }
Real Tensor::at(int c, int i, int j) const {
  return data_[(static_cast<std::size_t>(c) * shape_[1] + i) * shape_[2] + j];
}
Real& Tensor::at(int c, int i, int j) {
  return data_[(static_cast<std::size_t>(c) * shape_[1] + i) * shape_[2] + j];
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
}

Real Tensor::item() const {
  if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

void require_finite(const Tensor& t, const std::string& what) {
  if (!t.all_finite()) throw NumericError("non-finite values in " + what);
}

namespace {

constexpr std::array<char, 4> kMagic{'A', 'T', 'C', 'T'};

void put_u32(std::ostream& out, std::uint32_t v) {
  std::array<unsigned char, 4> b{static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                 static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b.data()), 4);
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw IoError("truncated ATCT header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_atct(std::ostream& out, const Tensor& t) {
  out.write(kMagic.data(), 4);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (Real v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  if (!out) throw IoError("failed writing ATCT tensor");
}

Tensor read_atct(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kMagic) throw IoError("bad ATCT magic");
  const std::uint32_t rank = get_u32(in);
  if (rank == 0 || rank > 8) throw IoError("unsupported ATCT rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    const std::uint32_t v = get_u32(in);
    if (v == 0 || v > (1u << 28)) throw IoError("bad ATCT dimension");
    d = static_cast<int>(v);
  }
  std::vector<Real> data(shape_size(shape));
  for (auto& v : data) v = std::bit_cast<float>(get_u32(in));
  return Tensor(std::move(shape), std::move(data));
}

void save_atct(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_atct(out, t);
}

Tensor load_atct(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_atct(in);
}

}  // namespace atcon
