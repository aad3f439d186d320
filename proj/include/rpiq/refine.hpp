#pragma once

// Stage 2: residual-projected block refinement.
//
// Each sweep visits the column blocks in ascending order. For block i the
// target is the directed residual D_i = Y_orig - (Y_q - Y_q,i), i.e. the
// global output residual with block i's own contribution added back. The
// block is refit by least squares against that target, projected onto the
// quantization grid, and moved a fraction alpha of the way there. Y_q is
// patched in place after every block so later blocks see the update
// (Gauss-Seidel). After every sweep the output is recomputed from scratch and
// the instance loss Gamma = ||Y_orig - Y_q||_F^2 decides whether to go on.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "rpiq/calibration.hpp"
#include "rpiq/error.hpp"
#include "rpiq/gptq.hpp"
#include "rpiq/metrics.hpp"
#include "rpiq/numerics.hpp"
#include "rpiq/quantgrid.hpp"

namespace rpiq {

inline constexpr double kDefaultAlpha = 0.01;
inline constexpr std::size_t kDefaultIters = 5;
inline constexpr double kDefaultEarlyStopTol = 1e-6;

struct RefineConfig {
  double alpha = kDefaultAlpha;
  std::size_t t_max = kDefaultIters;
  double early_stop_tol = kDefaultEarlyStopTol;
  bool early_stop = true;
  // Refit the grids of every group a block touches before projecting it.
  bool refit_grids = false;
  // Test hook: when false Q() is the identity and no final projection runs.
  bool project = true;
};

inline void validate_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw ArgumentError("alpha must lie in (0, 1], got " + std::to_string(alpha));
  }
}

class RefinementState {
 public:
  RefinementState(const Matrix& w, const BlockPartition& partition, double alpha, std::size_t t_max)
      : alpha_(alpha), t_max_(t_max) {
    validate_alpha(alpha);
    if (partition.size() == 0 && w.cols() != 0) throw ArgumentError("empty block partition");
    const std::size_t rows = partition.size() ? partition.x_blocks.front().rows() : 0;
    y_q_ = Matrix(rows, w.rows());
    for (std::size_t i = 0; i < partition.size(); ++i) {
      const auto& r = partition.ranges[i];
      blocks_.push_back(column_slice(w, r.begin, r.end));
      contributions_.push_back(matmul_transposed(partition.x_blocks[i], blocks_.back()));
      y_q_ = add(y_q_, contributions_.back());
    }
  }

  std::size_t block_count() const noexcept { return blocks_.size(); }
  const Matrix& block(std::size_t i) const { return blocks_.at(i); }
  const Matrix& contribution(std::size_t i) const { return contributions_.at(i); }
  const Matrix& output() const noexcept { return y_q_; }
  double alpha() const noexcept { return alpha_; }
  std::size_t t_max() const noexcept { return t_max_; }
  std::size_t iteration() const noexcept { return t_; }
  void advance() {
    if (t_ >= t_max_) throw ArgumentError("refinement already at t_max");
    ++t_;
  }

  // Y_q <- Y_q - Y_q,i + X_i b_new^T
  void apply_block_update(const BlockPartition& partition, std::size_t i, Matrix b_new) {
    check_index(i);
    if (b_new.rows() != blocks_[i].rows() || b_new.cols() != blocks_[i].cols()) {
      throw ShapeError("apply_block_update: new block " + detail::shape_str(b_new) + " vs " +
                       detail::shape_str(blocks_[i]));
    }
    Matrix contrib = matmul_transposed(partition.x_blocks[i], b_new);
    auto y = y_q_.values();
    auto old_c = contributions_[i].values();
    auto new_c = contrib.values();
    for (std::size_t k = 0; k < y.size(); ++k) y[k] += new_c[k] - old_c[k];
    contributions_[i] = std::move(contrib);
    blocks_[i] = std::move(b_new);
  }

  // Rebuilds every contribution and Y_q from the current blocks.
  void recompute_output(const BlockPartition& partition) {
    y_q_ = Matrix(y_q_.rows(), y_q_.cols());
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      contributions_[i] = matmul_transposed(partition.x_blocks[i], blocks_[i]);
      y_q_ = add(y_q_, contributions_[i]);
    }
  }

  Matrix assemble(const BlockPartition& partition) const {
    const std::size_t rows = blocks_.empty() ? 0 : blocks_.front().rows();
    const std::size_t cols = partition.ranges.empty() ? 0 : partition.ranges.back().end;
    Matrix w(rows, cols);
    for (std::size_t i = 0; i < blocks_.size(); ++i) assign_columns(w, partition.ranges[i].begin, blocks_[i]);
    return w;
  }

  std::size_t retained_bytes() const noexcept {
    std::size_t total = y_q_.bytes();
    for (const auto& b : blocks_) total += b.bytes();
    for (const auto& c : contributions_) total += c.bytes();
    return total;
  }

  void check_index(std::size_t i) const {
    if (i >= blocks_.size()) {
      throw ArgumentError("block index " + std::to_string(i) + " out of range (M = " +
                          std::to_string(blocks_.size()) + ")");
    }
  }

 private:
  std::vector<Matrix> blocks_;
  std::vector<Matrix> contributions_;
  Matrix y_q_;
  double alpha_ = kDefaultAlpha;
  std::size_t t_max_ = kDefaultIters;
  std::size_t t_ = 0;
};

inline Matrix global_residual(const Matrix& y_orig, const Matrix& y_q_init) {
  return subtract(y_orig, y_q_init);
}

// D_i = Y_orig - (Y_q - Y_q,i)
inline Matrix directed_residual(const RefinementState& state, const Matrix& y_orig, std::size_t i) {
  state.check_index(i);
  detail::require_same_shape(y_orig, state.output(), "directed_residual");
  Matrix d = y_orig;
  auto dv = d.values();
  auto yq = state.output().values();
  auto ci = state.contribution(i).values();
  for (std::size_t k = 0; k < dv.size(); ++k) dv[k] -= yq[k] - ci[k];
  return d;
}

// B_i* = (H_i^{-1} X_i^T D_i)^T, laid out like the weight block (C_out x width).
inline Matrix solve_block(const BlockPartition& partition, std::size_t i, const Matrix& d_i) {
  if (i >= partition.size()) throw ArgumentError("solve_block: block index out of range");
  return transpose(spd_solve(partition.factors[i], transposed_matmul(partition.x_blocks[i], d_i)));
}

// B_old + alpha (Q(B*) - B_old); alpha == 1 returns Q(B*) exactly.
inline Matrix update_block(const Matrix& b_old, const Matrix& b_star, const QuantGrid& grid,
                           std::size_t col_offset, double alpha, bool project = true) {
  validate_alpha(alpha);
  detail::require_same_shape(b_old, b_star, "update_block");
  Matrix target = project ? project_matrix(b_star, grid, col_offset) : b_star;
  if (alpha == 1.0) return target;
  auto tv = target.values();
  auto ov = b_old.values();
  for (std::size_t k = 0; k < tv.size(); ++k) tv[k] = ov[k] + alpha * (tv[k] - ov[k]);
  return target;
}

struct RefinementTrace {
  // gamma[0] is the stage-1 loss; gamma[t] the loss after sweep t, before
  // any final projection.
  std::vector<double> gamma;
  double gamma_projected = 0.0;  // best state after the final projection
  double gamma_final = 0.0;      // weights actually returned
  std::size_t iterations = 0;
  bool stopped_early = false;
  double total_reduction_pct = 0.0;
};

struct RefineResult {
  Matrix w_refined;
  std::vector<std::uint8_t> codes;
  QuantGrid grid;
  RefinementTrace trace;
};

namespace detail {

// Refit the groups overlapping [c1, c2) against the row values the layer
// would have if block i became b_star.
inline void refit_block_groups(QuantGrid& grid, const RefinementState& state,
                               const BlockPartition& partition, std::size_t i, const Matrix& b_star) {
  const auto range = partition.ranges[i];
  const std::size_t gs = grid.group_size();
  const std::size_t g1 = range.begin / gs;
  const std::size_t g2 = (range.end + gs - 1) / gs;
  std::vector<double> values;
  for (std::size_t r = 0; r < grid.rows(); ++r) {
    for (std::size_t g = g1; g < g2; ++g) {
      const std::size_t c1 = g * gs;
      const std::size_t c2 = std::min(c1 + gs, grid.cols());
      values.clear();
      for (std::size_t c = c1; c < c2; ++c) {
        if (c >= range.begin && c < range.end) {
          values.push_back(b_star(r, c - range.begin));
        } else {
          // Column owned by another block.
          std::size_t j = c / (partition.ranges[0].width());
          values.push_back(state.block(j)(r, c - partition.ranges[j].begin));
        }
      }
      grid.group(r, g) = fit_grid(values, grid.bits());
    }
  }
}

}  // namespace detail

inline RefineResult refine_layer(const Stage1Result& stage1, const CalibrationSnapshot& snapshot,
                                 const BlockPartition& partition, const RefineConfig& cfg,
                                 std::size_t* peak_bytes = nullptr) {
  validate_alpha(cfg.alpha);
  if (stage1.w_init.cols() != snapshot.dim() ||
      (partition.size() && partition.ranges.back().end != snapshot.dim())) {
    throw ShapeError("refine_layer: stage-1 result, snapshot and partition disagree on C_in");
  }

  RefineResult out;
  out.trace.gamma.push_back(stage1.reconstruction_error);
  const double gamma0 = stage1.reconstruction_error;

  if (cfg.t_max == 0 || gamma0 == 0.0) {
    out.w_refined = stage1.w_init;
    out.codes = stage1.codes;
    out.grid = stage1.grid;
    out.trace.gamma_projected = gamma0;
    out.trace.gamma_final = gamma0;
    out.trace.stopped_early = cfg.t_max > 0;
    return out;
  }

  RefinementState state(stage1.w_init, partition, cfg.alpha, cfg.t_max);
  QuantGrid grid = stage1.grid;

  Matrix best_w = stage1.w_init;
  QuantGrid best_grid = grid;
  double best_gamma = gamma0;
  Matrix best_on_grid_w = stage1.w_init;
  QuantGrid best_on_grid_grid = grid;
  double best_on_grid_gamma = gamma0;

  std::size_t peak = state.retained_bytes() + 3 * stage1.w_init.bytes();
  double prev = gamma0;
  for (std::size_t t = 1; t <= cfg.t_max; ++t) {
    for (std::size_t i = 0; i < partition.size(); ++i) {
      const Matrix d_i = directed_residual(state, snapshot.y_orig, i);
      const Matrix b_star = solve_block(partition, i, d_i);
      if (cfg.project && cfg.refit_grids) detail::refit_block_groups(grid, state, partition, i, b_star);
      state.apply_block_update(
          partition, i,
          update_block(state.block(i), b_star, grid, partition.ranges[i].begin, cfg.alpha, cfg.project));
    }
    state.advance();
    state.recompute_output(partition);
    const Matrix w = state.assemble(partition);
    const double gamma = frobenius_sq(subtract(snapshot.y_orig, state.output()));
    out.trace.gamma.push_back(gamma);
    out.trace.iterations = t;

    if (gamma < best_gamma) {
      best_gamma = gamma;
      best_w = w;
      best_grid = grid;
    }
    if (cfg.project && gamma < best_on_grid_gamma && on_grid(w, grid)) {
      // Re-evaluated on the full product so the reported loss is exactly what
      // a reader recomputes from the stored weights.
      const double exact = output_loss(snapshot, w);
      if (exact < best_on_grid_gamma) {
        best_on_grid_gamma = exact;
        best_on_grid_w = w;
        best_on_grid_grid = grid;
      }
    }
    if (cfg.early_stop && !(prev - gamma > cfg.early_stop_tol * prev)) {
      out.trace.stopped_early = t < cfg.t_max;
      break;
    }
    prev = gamma;
  }

  if (!cfg.project) {
    out.w_refined = std::move(best_w);
    out.grid = std::move(best_grid);
    out.trace.gamma_projected = best_gamma;
    out.trace.gamma_final = best_gamma;
  } else {
    Matrix projected = project_matrix(best_w, best_grid);
    const double gamma_projected = output_loss(snapshot, projected);
    out.trace.gamma_projected = gamma_projected;
    if (gamma_projected <= best_on_grid_gamma) {
      out.w_refined = std::move(projected);
      out.grid = std::move(best_grid);
      out.trace.gamma_final = gamma_projected;
    } else {
      out.w_refined = std::move(best_on_grid_w);
      out.grid = std::move(best_on_grid_grid);
      out.trace.gamma_final = best_on_grid_gamma;
    }
    out.codes = encode(out.w_refined, out.grid);
  }
  out.trace.total_reduction_pct = reduction_pct(gamma0, out.trace.gamma_final);
  if (peak_bytes) *peak_bytes = peak;
  return out;
}

}  // namespace rpiq
