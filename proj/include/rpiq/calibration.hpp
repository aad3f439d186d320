#pragma once

// Streaming Hessian accumulation and the single-instance calibration
// snapshot. Batches are consumed one at a time; only the running Gram sum
// and the most recent batch are ever held, so retained memory does not
// depend on the number of calibration batches.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rpiq/error.hpp"
#include "rpiq/numerics.hpp"

namespace rpiq {

inline constexpr double kDefaultPercdamp = 0.01;

class HessianAccumulator {
 public:
  explicit HessianAccumulator(std::size_t dim) : h_(dim, dim) {}

  // H += x^T x
  void accumulate(const Matrix& x_batch) {
    if (x_batch.cols() != dim()) {
      throw ShapeError("accumulate: batch has " + std::to_string(x_batch.cols()) +
                       " columns, accumulator dim is " + std::to_string(dim()));
    }
    const std::size_t n = dim();
    for (std::size_t k = 0; k < x_batch.rows(); ++k) {
      auto x_row = x_batch.row(k);
      for (std::size_t i = 0; i < n; ++i) {
        const double xi = x_row[i];
        if (xi == 0.0) continue;
        auto h_row = h_.row(i);
        for (std::size_t j = i; j < n; ++j) h_row[j] += xi * x_row[j];
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < i; ++j) h_(i, j) = h_(j, i);
    }
    detail::require_finite(h_, "accumulate");
    ++batches_seen_;
    rows_seen_ += x_batch.rows();
  }

  std::size_t dim() const noexcept { return h_.rows(); }
  const Matrix& hessian() const noexcept { return h_; }
  std::size_t batches_seen() const noexcept { return batches_seen_; }
  std::size_t rows_seen() const noexcept { return rows_seen_; }
  std::size_t retained_bytes() const noexcept { return h_.bytes(); }

 private:
  Matrix h_;
  std::size_t batches_seen_ = 0;
  std::size_t rows_seen_ = 0;
};

struct DampedHessian {
  Matrix h_damped;
  double lambda = 0.0;
  double percdamp = kDefaultPercdamp;
};

// H + lambda I with lambda = percdamp * mean(diag(H)).
inline DampedHessian damp(const Matrix& h, double percdamp) {
  if (!(percdamp > 0.0)) throw ArgumentError("percdamp must be positive");
  if (h.rows() != h.cols()) throw ShapeError("damp: Hessian is not square");
  if (h.rows() == 0) throw CalibrationError("damp: empty Hessian");
  double trace = 0.0;
  for (std::size_t i = 0; i < h.rows(); ++i) trace += h(i, i);
  const double mean_diag = trace / static_cast<double>(h.rows());
  if (!(mean_diag > 0.0)) {
    throw CalibrationError("damp: Hessian has zero diagonal (no calibration data?)");
  }
  DampedHessian out{h, percdamp * mean_diag, percdamp};
  for (std::size_t i = 0; i < h.rows(); ++i) out.h_damped(i, i) += out.lambda;
  return out;
}

inline DampedHessian damp(const HessianAccumulator& acc, double percdamp) {
  return damp(acc.hessian(), percdamp);
}

// Everything stage 2 is allowed to see: the damped global Hessian and one
// retained calibration instance (X_orig, Y_orig = X_orig W_fp^T).
struct CalibrationSnapshot {
  Matrix h_damped;
  double lambda = 0.0;
  double percdamp = kDefaultPercdamp;
  Matrix x_orig;
  Matrix y_orig;
  // Total rows folded into h_damped; relates the global Hessian to the
  // scale of a single instance's Gram matrix.
  std::size_t calibration_rows = 0;

  std::size_t dim() const noexcept { return h_damped.rows(); }

  std::size_t retained_bytes() const noexcept {
    return h_damped.bytes() + x_orig.bytes() + y_orig.bytes();
  }
};

inline CalibrationSnapshot capture_snapshot(Matrix x_last, const Matrix& w_fp, DampedHessian damped,
                                            std::size_t calibration_rows) {
  if (x_last.cols() != w_fp.cols()) {
    throw ShapeError("capture_snapshot: instance has " + std::to_string(x_last.cols()) +
                     " columns, weights have " + std::to_string(w_fp.cols()));
  }
  if (damped.h_damped.rows() != w_fp.cols()) {
    throw ShapeError("capture_snapshot: Hessian dim does not match weight columns");
  }
  CalibrationSnapshot s;
  s.y_orig = matmul_transposed(x_last, w_fp);
  s.x_orig = std::move(x_last);
  s.h_damped = std::move(damped.h_damped);
  s.lambda = damped.lambda;
  s.percdamp = damped.percdamp;
  s.calibration_rows = std::max(calibration_rows, s.x_orig.rows());
  return s;
}

// Produces calibration batch `index` in [0, count). Implementations are free
// to load from disk or forward-propagate on demand.
struct BatchStream {
  std::size_t count = 0;
  std::function<Matrix(std::size_t)> fetch;
};

struct CalibrationStats {
  std::size_t peak_bytes = 0;  // accumulator + live batch + retained instance
};

// Streams every batch once through the accumulator, keeping only the last
// one as the instance.
inline CalibrationSnapshot calibrate(const BatchStream& batches, const Matrix& w_fp, double percdamp,
                                     CalibrationStats* stats = nullptr) {
  if (batches.count == 0) throw CalibrationError("calibrate: no calibration batches");
  HessianAccumulator acc(w_fp.cols());
  std::optional<Matrix> last;
  std::size_t peak = 0;
  for (std::size_t b = 0; b < batches.count; ++b) {
    Matrix x = batches.fetch(b);
    acc.accumulate(x);
    peak = std::max(peak, acc.retained_bytes() + x.bytes() + (last ? last->bytes() : 0));
    last = std::move(x);  // the previous instance is released here
  }
  auto snapshot = capture_snapshot(std::move(*last), w_fp, damp(acc, percdamp), acc.rows_seen());
  peak = std::max(peak, acc.retained_bytes() + snapshot.retained_bytes());
  if (stats) stats->peak_bytes = peak;
  return snapshot;
}

enum class CurvatureSource {
  // Gram matrix of the retained instance block, optionally damped. Consistent
  // with the instance right-hand side, so B* is the true local optimum.
  instance,
  // Damped global Hessian block rescaled to the instance's row count. Mixes
  // population curvature with an instance right-hand side; kept for ablation.
  global,
};

inline std::string to_string(CurvatureSource c) {
  return c == CurvatureSource::global ? "global" : "instance";
}

inline constexpr std::size_t kDefaultBlockSize = 128;

struct PartitionOptions {
  std::size_t block_size = kDefaultBlockSize;
  CurvatureSource curvature = CurvatureSource::instance;
  // Relative damping of the instance Gram (instance curvature only); 0 means
  // the exact normal equations.
  double instance_percdamp = 0.0;
};

struct BlockRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t width() const noexcept { return end - begin; }
  bool operator==(const BlockRange&) const = default;
};

inline std::vector<BlockRange> block_ranges(std::size_t cols, std::size_t block_size) {
  if (block_size == 0) throw ArgumentError("block_size must be at least 1");
  std::vector<BlockRange> ranges;
  for (std::size_t c = 0; c < cols; c += block_size) {
    ranges.push_back({c, std::min(c + block_size, cols)});
  }
  return ranges;
}

struct BlockPartition {
  std::vector<BlockRange> ranges;
  std::vector<Matrix> x_blocks;            // X_orig[:, c1:c2]
  std::vector<Matrix> curvature;           // normal-equations matrix per block
  std::vector<CholeskyFactor> factors;     // its Cholesky factor

  std::size_t size() const noexcept { return ranges.size(); }

  std::size_t retained_bytes() const noexcept {
    std::size_t total = 0;
    for (const auto& x : x_blocks) total += x.bytes();
    for (const auto& c : curvature) total += c.bytes();
    for (const auto& f : factors) total += f.lower.bytes();
    return total;
  }
};

inline BlockPartition partition(const CalibrationSnapshot& snapshot, const PartitionOptions& opts) {
  BlockPartition p;
  p.ranges = block_ranges(snapshot.dim(), opts.block_size);
  const double instance_scale =
      static_cast<double>(snapshot.x_orig.rows()) / static_cast<double>(snapshot.calibration_rows);
  for (std::size_t i = 0; i < p.ranges.size(); ++i) {
    const auto [c1, c2] = p.ranges[i];
    Matrix x_i = column_slice(snapshot.x_orig, c1, c2);
    Matrix h_i;
    if (opts.curvature == CurvatureSource::global) {
      h_i = scaled(principal_submatrix(snapshot.h_damped, c1, c2), instance_scale);
    } else {
      h_i = gram(x_i);
      if (opts.instance_percdamp > 0.0) h_i = damp(h_i, opts.instance_percdamp).h_damped;
    }
    try {
      p.factors.push_back(cholesky(h_i));
    } catch (const FactorizationError& e) {
      throw CalibrationError("partition: block " + std::to_string(i) + " [" + std::to_string(c1) +
                             "," + std::to_string(c2) + ") curvature is not positive definite (pivot " +
                             std::to_string(e.pivot()) + "); increase percdamp");
    }
    p.x_blocks.push_back(std::move(x_i));
    p.curvature.push_back(std::move(h_i));
  }
  return p;
}

}  // namespace rpiq
