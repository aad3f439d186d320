#pragma once

// Stage 1: Hessian-guided greedy column quantization with error feedback
// into the not-yet-quantized columns (the GPTQ update, applied eagerly).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "rpiq/calibration.hpp"
#include "rpiq/error.hpp"
#include "rpiq/numerics.hpp"
#include "rpiq/quantgrid.hpp"

namespace rpiq {

inline constexpr std::size_t kDefaultGroupSize = 128;
inline constexpr int kDefaultBits = 4;

struct Stage1Result {
  Matrix w_init;                     // dequantized, on-grid
  std::vector<std::uint8_t> codes;   // row-major
  QuantGrid grid;
  double reconstruction_error = 0.0; // ||Y_orig - X_orig W_init^T||_F^2
};

// Gamma: squared Frobenius norm of the instance output residual.
inline double output_loss(const CalibrationSnapshot& snapshot, const Matrix& w) {
  return frobenius_sq(subtract(snapshot.y_orig, matmul_transposed(snapshot.x_orig, w)));
}

inline Matrix rtn_baseline(const Matrix& w_fp, const QuantGrid& grid) {
  return project_matrix(w_fp, grid);
}

// Upper-triangular U with U^T U = H^{-1}.
inline Matrix inverse_hessian_upper(const Matrix& h_damped) {
  try {
    const Matrix h_inv = spd_inverse(cholesky(h_damped));
    return transpose(cholesky(h_inv).lower);
  } catch (const FactorizationError& e) {
    throw CalibrationError("stage 1: damped Hessian is not positive definite (pivot " +
                           std::to_string(e.pivot()) + "); increase percdamp");
  }
}

inline Stage1Result quantize_layer_stage1(const Matrix& w_fp, const CalibrationSnapshot& snapshot,
                                          const QuantGrid& grid) {
  if (w_fp.cols() != snapshot.dim()) {
    throw ShapeError("stage 1: weights have " + std::to_string(w_fp.cols()) +
                     " columns, Hessian dim is " + std::to_string(snapshot.dim()));
  }
  if (grid.rows() != w_fp.rows() || grid.cols() != w_fp.cols()) {
    throw ShapeError("stage 1: grid does not match weight shape");
  }
  const Matrix u = inverse_hessian_upper(snapshot.h_damped);
  const std::size_t cols = w_fp.cols();

  Stage1Result out;
  out.grid = grid;
  out.w_init = Matrix(w_fp.rows(), cols);
  out.codes.resize(w_fp.size());

  // Rows share H and are independent; each row is swept left to right.
  std::vector<double> work(cols);
  for (std::size_t r = 0; r < w_fp.rows(); ++r) {
    auto src = w_fp.row(r);
    work.assign(src.begin(), src.end());
    for (std::size_t j = 0; j < cols; ++j) {
      if (!std::isfinite(work[j])) {
        throw NumericError("stage 1: non-finite weight at column " + std::to_string(j));
      }
      const GroupParams& p = grid.at(r, j);
      const int code = quantize(work[j], p);
      const double q = dequantize(code, p);
      const double err = (work[j] - q) / u(j, j);
      if (!std::isfinite(err)) {
        throw NumericError("stage 1: non-finite error at column " + std::to_string(j));
      }
      auto u_row = u.row(j);
      for (std::size_t k = j + 1; k < cols; ++k) work[k] -= err * u_row[k];
      out.w_init(r, j) = q;
      out.codes[r * cols + j] = static_cast<std::uint8_t>(code);
    }
  }
  out.reconstruction_error = output_loss(snapshot, out.w_init);
  return out;
}

inline Stage1Result quantize_layer_stage1(const Matrix& w_fp, const CalibrationSnapshot& snapshot,
                                          int bits = kDefaultBits,
                                          std::size_t group_size = kDefaultGroupSize) {
  return quantize_layer_stage1(w_fp, snapshot, fit_grids(w_fp, bits, group_size));
}

}  // namespace rpiq
