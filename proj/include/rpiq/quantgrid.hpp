#pragma once

// Uniform asymmetric group quantization. Each output row is split into
// groups of `group_size` consecutive input columns; every group owns a
// (scale, zero_point) pair. Scales are kept f32-representable so that the
// packed artifact dequantizes to exactly the values the engine optimized.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "rpiq/error.hpp"
#include "rpiq/numerics.hpp"

namespace rpiq {

inline constexpr int kMinBits = 2;
inline constexpr int kMaxBits = 8;
inline constexpr double kScaleFloor = 1e-12;

struct GroupParams {
  double scale = 1.0;
  int zero_point = 0;
  int bits = 4;

  int max_code() const noexcept { return (1 << bits) - 1; }
  bool operator==(const GroupParams&) const = default;
};

inline void validate_bits(int bits) {
  if (bits < kMinBits || bits > kMaxBits) {
    throw ArgumentError("bits must be in [2, 8], got " + std::to_string(bits));
  }
}

// Smallest f32 value >= v, returned as double.
inline double round_up_to_f32(double v) {
  float f = static_cast<float>(v);
  if (static_cast<double>(f) < v) f = std::nextafter(f, std::numeric_limits<float>::infinity());
  return static_cast<double>(f);
}

// Min/max grid over the values, with the range widened to contain zero so the
// zero point never saturates and 0.0 is always exactly representable.
inline GroupParams fit_grid(std::span<const double> values, int bits) {
  validate_bits(bits);
  if (values.empty()) throw ArgumentError("fit_grid: empty value range");
  double lo = 0.0;
  double hi = 0.0;
  for (double v : values) {
    if (!std::isfinite(v)) throw ArgumentError("fit_grid: non-finite value");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const int max_code = (1 << bits) - 1;
  const double step = std::max((hi - lo) / max_code, kScaleFloor);
  if (!(step < std::numeric_limits<float>::max())) throw ArgumentError("fit_grid: value range exceeds f32");
  const double scale = round_up_to_f32(step);
  const double zp = std::nearbyint(-lo / scale);
  GroupParams p;
  p.scale = scale;
  p.zero_point = static_cast<int>(std::clamp(zp, 0.0, static_cast<double>(max_code)));
  p.bits = bits;
  return p;
}

// Half-to-even rounding (default FE_TONEAREST) with saturation.
inline int quantize(double x, const GroupParams& p) {
  const double q = std::nearbyint(x / p.scale) + p.zero_point;
  return static_cast<int>(std::clamp(q, 0.0, static_cast<double>(p.max_code())));
}

inline double dequantize(int code, const GroupParams& p) {
  if (code < 0 || code > p.max_code()) {
    throw ArgumentError("dequantize: code " + std::to_string(code) + " outside [0, " +
                        std::to_string(p.max_code()) + "]");
  }
  return p.scale * static_cast<double>(code - p.zero_point);
}

inline double project(double x, const GroupParams& p) { return dequantize(quantize(x, p), p); }

// Per-group parameters for a rows x cols weight matrix, stored row-major over
// (row, group).
class QuantGrid {
 public:
  QuantGrid() = default;

  QuantGrid(std::size_t rows, std::size_t cols, int bits, std::size_t group_size,
            std::vector<GroupParams> params)
      : rows_(rows), cols_(cols), bits_(bits), group_size_(group_size), params_(std::move(params)) {
    validate_bits(bits_);
    if (group_size_ == 0) throw ArgumentError("group_size must be positive");
    if (params_.size() != rows_ * groups_per_row()) {
      throw ShapeError("QuantGrid: expected " + std::to_string(rows_ * groups_per_row()) +
                       " groups, got " + std::to_string(params_.size()));
    }
    for (const auto& p : params_) {
      if (!(p.scale > 0.0) || p.zero_point < 0 || p.zero_point > p.max_code() || p.bits != bits_) {
        throw ArgumentError("QuantGrid: invalid group parameters");
      }
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  int bits() const noexcept { return bits_; }
  std::size_t group_size() const noexcept { return group_size_; }
  std::size_t groups_per_row() const noexcept {
    return cols_ == 0 ? 0 : (cols_ + group_size_ - 1) / group_size_;
  }

  const GroupParams& at(std::size_t row, std::size_t col) const {
    return params_[row * groups_per_row() + col / group_size_];
  }
  GroupParams& group(std::size_t row, std::size_t g) { return params_[row * groups_per_row() + g]; }
  const GroupParams& group(std::size_t row, std::size_t g) const {
    return params_[row * groups_per_row() + g];
  }

  std::span<const GroupParams> params() const noexcept { return params_; }

  bool operator==(const QuantGrid&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  int bits_ = 4;
  std::size_t group_size_ = 128;
  std::vector<GroupParams> params_;
};

inline QuantGrid fit_grids(const Matrix& w, int bits, std::size_t group_size) {
  validate_bits(bits);
  if (group_size == 0) throw ArgumentError("group_size must be positive");
  const std::size_t groups = w.cols() == 0 ? 0 : (w.cols() + group_size - 1) / group_size;
  std::vector<GroupParams> params;
  params.reserve(w.rows() * groups);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    auto row = w.row(r);
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t c1 = g * group_size;
      const std::size_t c2 = std::min(c1 + group_size, w.cols());
      params.push_back(fit_grid(row.subspan(c1, c2 - c1), bits));
    }
  }
  return QuantGrid(w.rows(), w.cols(), bits, group_size, std::move(params));
}

namespace detail {
inline void require_grid_covers(const Matrix& b, const QuantGrid& grid, std::size_t col_offset,
                                const char* op) {
  if (b.rows() != grid.rows() || col_offset + b.cols() > grid.cols()) {
    throw ShapeError(std::string(op) + ": block " + shape_str(b) + " at column " +
                     std::to_string(col_offset) + " not covered by grid " +
                     std::to_string(grid.rows()) + "x" + std::to_string(grid.cols()));
  }
}
}  // namespace detail

// Q(b): quantize-then-dequantize every entry. `col_offset` is the absolute
// column of b's first column within the layer, which selects the groups.
inline Matrix project_matrix(const Matrix& b, const QuantGrid& grid, std::size_t col_offset = 0) {
  detail::require_grid_covers(b, grid, col_offset, "project_matrix");
  Matrix out(b.rows(), b.cols());
  for (std::size_t r = 0; r < b.rows(); ++r) {
    for (std::size_t c = 0; c < b.cols(); ++c) out(r, c) = project(b(r, c), grid.at(r, col_offset + c));
  }
  return out;
}

inline bool on_grid(const Matrix& b, const QuantGrid& grid, std::size_t col_offset = 0) {
  return project_matrix(b, grid, col_offset) == b;
}

// Row-major code matrix for w.
inline std::vector<std::uint8_t> encode(const Matrix& w, const QuantGrid& grid) {
  detail::require_grid_covers(w, grid, 0, "encode");
  std::vector<std::uint8_t> codes;
  codes.reserve(w.size());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t c = 0; c < w.cols(); ++c) {
      codes.push_back(static_cast<std::uint8_t>(quantize(w(r, c), grid.at(r, c))));
    }
  }
  return codes;
}

inline Matrix decode(std::span<const std::uint8_t> codes, const QuantGrid& grid) {
  if (codes.size() != grid.rows() * grid.cols()) {
    throw ShapeError("decode: " + std::to_string(codes.size()) + " codes for a " +
                     std::to_string(grid.rows()) + "x" + std::to_string(grid.cols()) + " grid");
  }
  Matrix w(grid.rows(), grid.cols());
  for (std::size_t r = 0; r < grid.rows(); ++r) {
    for (std::size_t c = 0; c < grid.cols(); ++c) {
      w(r, c) = dequantize(codes[r * grid.cols() + c], grid.at(r, c));
    }
  }
  return w;
}

// Codes packed LSB-first into a byte stream; for 4-bit codes the even index
// lands in the low nibble.
struct PackedBlock {
  int bits = 4;
  std::size_t count = 0;
  std::vector<std::uint8_t> bytes;

  bool operator==(const PackedBlock&) const = default;
};

inline std::size_t packed_size(std::size_t count, int bits) {
  return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

inline PackedBlock pack(std::span<const std::uint8_t> codes, int bits) {
  validate_bits(bits);
  PackedBlock out;
  out.bits = bits;
  out.count = codes.size();
  out.bytes.assign(packed_size(codes.size(), bits), 0);
  const unsigned limit = 1u << bits;
  std::size_t bit = 0;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] >= limit) {
      throw ArgumentError("pack: code " + std::to_string(codes[i]) + " at index " +
                          std::to_string(i) + " does not fit in " + std::to_string(bits) + " bits");
    }
    for (int b = 0; b < bits; ++b, ++bit) {
      if ((codes[i] >> b) & 1u) out.bytes[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
    }
  }
  return out;
}

inline std::vector<std::uint8_t> unpack(const PackedBlock& p) {
  validate_bits(p.bits);
  if (p.bytes.size() != packed_size(p.count, p.bits)) {
    throw ArgumentError("unpack: byte count does not match code count");
  }
  std::vector<std::uint8_t> codes(p.count, 0);
  std::size_t bit = 0;
  for (std::size_t i = 0; i < p.count; ++i) {
    unsigned v = 0;
    for (int b = 0; b < p.bits; ++b, ++bit) {
      v |= ((p.bytes[bit / 8] >> (bit % 8)) & 1u) << b;
    }
    codes[i] = static_cast<std::uint8_t>(v);
  }
  return codes;
}

}  // namespace rpiq
