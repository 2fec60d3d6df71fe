#include "sib/autodiff/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <sstream>

#include "sib/errors.hpp"

namespace sib::ad {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + to_string(shape_));
  }
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + to_string(shape_));
  }
  if (data_.size() != numel(shape_)) {
    throw ShapeError("tensor: data length " + std::to_string(data_.size()) + " does not match shape " +
                     to_string(shape_));
  }
}

Tensor Tensor::checked(Shape shape, std::vector<double> data) {
  Tensor t(std::move(shape), std::move(data));
  if (!t.all_finite()) throw DomainError("tensor: non-finite element in input");
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) throw ContractError("tensor: item() on tensor of shape " + to_string(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (numel(shape) != data_.size()) {
    throw ShapeError("reshape: " + to_string(shape_) + " -> " + to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

namespace {

static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T take(std::span<const std::uint8_t> bytes, std::size_t& offset, const char* what) {
  if (bytes.size() < offset || bytes.size() - offset < sizeof(T)) {
    throw ParseError(std::string("tensor: truncated ") + what, offset);
  }
  T v;
  std::memcpy(&v, bytes.data() + offset, sizeof(T));
  offset += sizeof(T);
  return v;
}

constexpr char kMagic[4] = {'S', 'I', 'B', 'T'};
constexpr std::uint32_t kMaxRank = 16;

}  // namespace

void write_tensor(std::vector<std::uint8_t>& out, const Tensor& t) {
  out.insert(out.end(), kMagic, kMagic + 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put<std::uint64_t>(out, d);
  for (double v : t.data()) put<double>(out, v);
}

Tensor read_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  const std::size_t start = offset;
  if (bytes.size() < offset + 4 || std::memcmp(bytes.data() + offset, kMagic, 4) != 0) {
    throw ParseError("tensor: missing SIBT magic", start);
  }
  offset += 4;
  const auto rank = take<std::uint32_t>(bytes, offset, "rank");
  if (rank > kMaxRank) throw ParseError("tensor: implausible rank " + std::to_string(rank), offset - 4);
  Shape shape(rank);
  for (auto& d : shape) {
    const auto v = take<std::uint64_t>(bytes, offset, "dims");
    if (v == 0) throw ParseError("tensor: zero dimension", offset - 8);
    d = static_cast<std::size_t>(v);
  }
  const std::size_t n = numel(shape);
  if ((bytes.size() - offset) / sizeof(double) < n) throw ParseError("tensor: truncated payload", offset);
  std::vector<double> data(n);
  std::memcpy(data.data(), bytes.data() + offset, n * sizeof(double));
  offset += n * sizeof(double);
  return Tensor(std::move(shape), std::move(data));
}

std::vector<std::uint8_t> serialize(const Tensor& t) {
  std::vector<std::uint8_t> out;
  write_tensor(out, t);
  return out;
}

Tensor deserialize(std::span<const std::uint8_t> bytes) {
  std::size_t offset = 0;
  Tensor t = read_tensor(bytes, offset);
  if (offset != bytes.size()) throw ParseError("tensor: trailing bytes", offset);
  return t;
}

}  // namespace sib::ad
