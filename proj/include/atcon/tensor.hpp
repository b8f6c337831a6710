#pragma once

#include <cstddef>
#include <filesystem>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace atcon {

using Shape = std::vector<int>;

// Element type. f32 normally; ATCON_REAL_DOUBLE builds the same code in f64,
// which the finite-difference gradient checks link against. ATCT files are
// always f32 on disk.
#ifdef ATCON_REAL_DOUBLE
using Real = double;
#else
using Real = float;
#endif

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of Real. Plain value type; gradient bookkeeping lives on
/// the Tape that records operations over it.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = 0.0f);
  Tensor(Shape shape, std::vector<Real> data);

  static Tensor scalar(Real value) { return Tensor(Shape{1}, std::vector<Real>{value}); }
  static Tensor from(std::initializer_list<Real> values);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const Real> data() const { return data_; }
  std::span<Real> data() { return data_; }
  const std::vector<Real>& vec() const { return data_; }

  Real operator[](std::size_t i) const { return data_[i]; }
  Real& operator[](std::size_t i) { return data_[i]; }

  Real at(int i, int j) const;
  Real at(int c, int i, int j) const;
  Real& at(int i, int j);
  Real& at(int c, int i, int j);

  /// Same data, new shape; sizes must agree.
  Tensor reshaped(Shape shape) const;

  bool all_finite() const;
  Real item() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<Real> data_;
};

/// Throws NumericError naming `what` if any value is NaN or Inf.
void require_finite(const Tensor& t, const std::string& what);

// "ATCT" container: magic, u32 LE rank, rank x u32 LE dims, f32 LE payload.
void write_atct(std::ostream& out, const Tensor& t);
Tensor read_atct(std::istream& in);
void save_atct(const std::filesystem::path& path, const Tensor& t);
Tensor load_atct(const std::filesystem::path& path);

}  // namespace atcon
