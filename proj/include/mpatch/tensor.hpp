#pragma once

// Dense row-major float32 tensor and the shared error type.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mpatch {

enum class ErrorKind {
  ShapeMismatch,
  InvalidArgument,
  NonFinite,
  Io,
  BadMagic,
  VersionMismatch,
  Truncated,
  OverlappingExtents,
  MalformedHeader,
  Incompatible,
  ArchitectureMismatch,
  DegenerateEmbedding,
  StageOrder,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "shape_mismatch";
    case ErrorKind::InvalidArgument: return "invalid_argument";
    case ErrorKind::NonFinite: return "non_finite";
    case ErrorKind::Io: return "io";
    case ErrorKind::BadMagic: return "bad_magic";
    case ErrorKind::VersionMismatch: return "version_mismatch";
    case ErrorKind::Truncated: return "truncated";
    case ErrorKind::OverlappingExtents: return "overlapping_extents";
    case ErrorKind::MalformedHeader: return "malformed_header";
    case ErrorKind::Incompatible: return "incompatible";
    case ErrorKind::ArchitectureMismatch: return "architecture_mismatch";
    case ErrorKind::DegenerateEmbedding: return "degenerate_embedding";
    case ErrorKind::StageOrder: return "stage_order";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f)
      : shape_(std::move(shape)), data_(numel(shape_), fill) {
    validate_shape();
  }

  Tensor(Shape shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != numel(shape_)) {
      throw Error(ErrorKind::ShapeMismatch,
                  "tensor data length " + std::to_string(data_.size()) +
                      " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(float v) { return Tensor({1}, std::vector<float>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  std::vector<float>& vec() noexcept { return data_; }
  const std::vector<float>& vec() const noexcept { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // 2-D access; rank is not rechecked.
  float& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  float at(std::size_t r, std::size_t c) const {
    return data_[r * shape_.back() + c];
  }

  std::span<const float> row(std::size_t r) const {
    const std::size_t cols = shape_.back();
    return std::span<const float>(data_).subspan(r * cols, cols);
  }
  std::span<float> row(std::size_t r) {
    const std::size_t cols = shape_.back();
    return std::span<float>(data_).subspan(r * cols, cols);
  }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
      throw Error(ErrorKind::ShapeMismatch, "cannot reshape " +
                                                shape_str(shape_) + " to " +
                                                shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const {
    for (float v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    for (std::size_t d : shape_) {
      if (d == 0) {
        throw Error(ErrorKind::ShapeMismatch,
                    "tensor dimensions must be positive, got " +
                        shape_str(shape_));
      }
    }
  }

  Shape shape_;
  std::vector<float> data_;
};

// Byte-level equality, distinguishes -0.0 from 0.0 and NaN payloads.
inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::uint32_t u, v;
    std::memcpy(&u, &x[i], 4);
    std::memcpy(&v, &y[i], 4);
    if (u != v) return false;
  }
  return true;
}

// Gathers the listed rows of a rank>=2 tensor, keeping trailing dimensions.
inline Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows) {
  Shape shape = t.shape();
  const std::size_t stride = t.size() / shape[0];
  shape[0] = rows.size();
  std::vector<float> out;
  out.reserve(rows.size() * stride);
  for (std::size_t r : rows) {
    if (r >= t.dim(0)) {
      throw Error(ErrorKind::InvalidArgument, "row index out of range");
    }
    auto first = t.data().begin() + static_cast<std::ptrdiff_t>(r * stride);
    out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(stride));
  }
  return Tensor(std::move(shape), std::move(out));
}

}  // namespace mpatch
