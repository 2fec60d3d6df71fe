#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace sib::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Dense row-major array of doubles. A rank-0 tensor holds one element.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }
  // User-facing constructor: rejects NaN/Inf.
  static Tensor checked(Shape shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  // Element access for rank-0/1 tensors of one element.
  double item() const;
  bool all_finite() const;

  Tensor reshaped(Shape shape) const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Flat binary format: "SIBT", u32 rank, u64 dims[rank], little-endian f64 payload.
void write_tensor(std::vector<std::uint8_t>& out, const Tensor& t);
// Reads one tensor block starting at `offset`, advancing it. Throws ParseError.
Tensor read_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset);

std::vector<std::uint8_t> serialize(const Tensor& t);
Tensor deserialize(std::span<const std::uint8_t> bytes);

}  // namespace sib::ad
