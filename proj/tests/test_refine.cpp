#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "rpiq/gptq.hpp"
#include "rpiq/refine.hpp"

using namespace rpiq;

namespace {

struct Layer {
  Matrix w;
  CalibrationSnapshot snapshot;
};

Layer make_layer(std::uint64_t seed, std::size_t cout, std::size_t cin, std::size_t n, std::size_t k = 4) {
  std::mt19937_64 rng(seed);
  Layer l{oracle::random_matrix(rng, cout, cin), {}};
  HessianAccumulator acc(cin);
  Matrix last;
  for (std::size_t b = 0; b < k; ++b) {
    last = oracle::random_matrix(rng, n, cin);
    acc.accumulate(last);
  }
  l.snapshot = capture_snapshot(last, l.w, damp(acc, 0.01), acc.rows_seen());
  return l;
}

BlockPartition exact_partition(const CalibrationSnapshot& s, std::size_t bs) {
  return partition(s, PartitionOptions{bs, CurvatureSource::instance, 0.0});
}

Matrix full_output(const RefinementState& st, const BlockPartition& p) {
  Matrix y(st.output().rows(), st.output().cols());
  for (std::size_t j = 0; j < p.size(); ++j) y = add(y, oracle::matmul(p.x_blocks[j], oracle::transpose(st.block(j))));
  return y;
}

}  // namespace

TEST(GlobalResidual, Cases) {
  std::mt19937_64 rng(1);
  const Matrix y = oracle::random_matrix(rng, 4, 3);
  const Matrix q = oracle::random_matrix(rng, 4, 3);
  EXPECT_EQ(global_residual(y, y), Matrix(4, 3));
  EXPECT_EQ(global_residual(y, Matrix(4, 3)), y);
  const Matrix d = global_residual(y, q);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(d(r, c), y(r, c) - q(r, c));
  EXPECT_THROW(global_residual(y, Matrix(3, 3)), ShapeError);
}

TEST(DirectedResidual, SingleBlockAndZeroNetwork) {
  const auto l = make_layer(2, 5, 8, 20);
  const auto p1 = exact_partition(l.snapshot, 8);
  RefinementState one(l.w, p1, 1.0, 5);
  EXPECT_LT(max_abs_diff(directed_residual(one, l.snapshot.y_orig, 0), l.snapshot.y_orig), 1e-12);

  const auto p4 = exact_partition(l.snapshot, 2);
  RefinementState zero(Matrix(5, 8), p4, 1.0, 5);
  for (std::size_t i = 0; i < p4.size(); ++i) EXPECT_EQ(directed_residual(zero, l.snapshot.y_orig, i), l.snapshot.y_orig);
  EXPECT_THROW(directed_residual(zero, l.snapshot.y_orig, 4), ArgumentError);
}

TEST(DirectedResidual, MatchesFromScratchSum) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t m = oracle::uniform_int(rng, 1, 8);
    const std::size_t bs = oracle::uniform_int(rng, 1, 4);
    const std::size_t cin = (m - 1) * bs + oracle::uniform_int(rng, 1, bs);
    const auto l = make_layer(500 + seed, oracle::uniform_int(rng, 1, 6), cin, cin + 4, 2);
    const auto p = exact_partition(l.snapshot, bs);
    ASSERT_EQ(p.size(), m);
    RefinementState st(l.w, p, 1.0, 5);
    // scramble the state with a few incremental updates
    for (int u = 0; u < 3; ++u) {
      const std::size_t i = oracle::uniform_int(rng, 0, m - 1);
      st.apply_block_update(p, i, oracle::random_matrix(rng, l.w.rows(), p.ranges[i].width()));
    }
    std::vector<Matrix> blocks;
    for (std::size_t j = 0; j < m; ++j) blocks.push_back(st.block(j));
    for (std::size_t i = 0; i < m; ++i) {
      const Matrix expect = oracle::directed_residual(l.snapshot.y_orig, p.x_blocks, blocks, i);
      EXPECT_LT(oracle::rel_frob(directed_residual(st, l.snapshot.y_orig, i), expect), 1e-8);
    }
  }
}

TEST(SolveBlock, IdentityDesignAndZeroTarget) {
  std::mt19937_64 rng(3);
  const Matrix w = oracle::random_matrix(rng, 3, 4);
  const auto s = capture_snapshot(Matrix::identity(4), w, damp(Matrix::identity(4), 0.01), 4);
  const auto p = exact_partition(s, 4);
  const Matrix d = oracle::random_matrix(rng, 4, 3);
  EXPECT_LT(max_abs_diff(solve_block(p, 0, d), oracle::transpose(d)), 1e-12);
  EXPECT_EQ(solve_block(p, 0, Matrix(4, 3)), Matrix(3, 4));
  EXPECT_THROW(solve_block(p, 1, d), ArgumentError);
}

TEST(SolveBlock, MatchesLeastSquaresOracles) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t n = oracle::uniform_int(rng, 8, 64);
    const std::size_t width = oracle::uniform_int(rng, 1, std::min<std::size_t>(16, n));
    const auto l = make_layer(900 + seed, 5, width, n, 1);
    const auto p = exact_partition(l.snapshot, width);
    const Matrix d = oracle::random_matrix(rng, n, 5);
    const Matrix b = solve_block(p, 0, d);
    EXPECT_LT(oracle::rel_frob(b, least_squares(l.snapshot.x_orig, d)), 1e-8);
    EXPECT_LT(oracle::rel_frob(b, oracle::qr_least_squares(l.snapshot.x_orig, d)), 1e-8);
  }
}

TEST(UpdateBlock, Cases) {
  const QuantGrid g(1, 1, 4, 1, {GroupParams{1.0, 0, 4}});
  const Matrix zero(1, 1);
  const Matrix two(1, 1, 2.0);
  EXPECT_EQ(update_block(zero, two, g, 0, 0.5)(0, 0), 1.0);
  EXPECT_EQ(update_block(zero, Matrix(1, 1, 2.3), g, 0, 1.0)(0, 0), 2.0);
  for (double a : {0.01, 0.3, 1.0}) EXPECT_EQ(update_block(two, two, g, 0, a), two);
  EXPECT_THROW(update_block(zero, two, g, 0, 0.0), ArgumentError);
  EXPECT_THROW(update_block(zero, two, g, 0, 1.5), ArgumentError);
  EXPECT_THROW(update_block(zero, Matrix(1, 2), g, 0, 0.5), ShapeError);
  // no projection: plain interpolation toward B*
  EXPECT_DOUBLE_EQ(update_block(zero, Matrix(1, 1, 2.3), g, 0, 0.5, false)(0, 0), 1.15);
}

TEST(UpdateBlock, FullStepIsProjection) {
  std::mt19937_64 rng(4);
  const Matrix w = oracle::random_matrix(rng, 4, 12);
  const QuantGrid g = fit_grids(w, 4, 4);
  const Matrix bstar = oracle::random_matrix(rng, 4, 5);
  EXPECT_EQ(update_block(column_slice(w, 3, 8), bstar, g, 3, 1.0), project_matrix(bstar, g, 3));
}

TEST(ApplyBlockUpdate, NoOpAndRecompute) {
  const auto l = make_layer(5, 6, 10, 24);
  const auto p = exact_partition(l.snapshot, 3);
  RefinementState st(l.w, p, 0.5, 5);
  const Matrix before = st.output();
  st.apply_block_update(p, 1, st.block(1));
  EXPECT_LT(max_abs_diff(st.output(), before), 1e-9);
  EXPECT_THROW(st.apply_block_update(p, 1, Matrix(6, 4)), ShapeError);

  std::mt19937_64 rng(6);
  for (int u = 0; u < 40; ++u) {
    const std::size_t i = oracle::uniform_int(rng, 0, p.size() - 1);
    st.apply_block_update(p, i, oracle::random_matrix(rng, 6, p.ranges[i].width()));
    EXPECT_LT(oracle::rel_frob(st.output(), full_output(st, p)), 1e-8);
  }
  Matrix incremental = st.output();
  st.recompute_output(p);
  EXPECT_LT(oracle::rel_frob(incremental, st.output()), 1e-8);
}

TEST(ApplyBlockUpdate, SingleBlockExactFit) {
  const auto l = make_layer(7, 4, 6, 30);
  const auto p = exact_partition(l.snapshot, 6);
  RefinementState st(Matrix(4, 6), p, 1.0, 1);
  const Matrix b = solve_block(p, 0, directed_residual(st, l.snapshot.y_orig, 0));
  st.apply_block_update(p, 0, b);
  EXPECT_LT(oracle::rel_frob(st.output(), l.snapshot.y_orig), 1e-9);
}

TEST(RefinementState, Bookkeeping) {
  const auto l = make_layer(8, 3, 5, 12);
  const auto p = exact_partition(l.snapshot, 2);
  RefinementState st(l.w, p, 0.1, 2);
  EXPECT_EQ(st.block_count(), 3u);
  EXPECT_EQ(st.assemble(p), l.w);
  st.advance();
  st.advance();
  EXPECT_THROW(st.advance(), ArgumentError);
  EXPECT_THROW(RefinementState(l.w, p, 0.0, 2), ArgumentError);
}

namespace {

struct Refined {
  Stage1Result s1;
  BlockPartition part;
  RefineResult out;
};

Refined run(const Layer& l, std::size_t bs, RefineConfig cfg, int bits = 4, std::size_t gs = 16) {
  Refined r;
  r.s1 = quantize_layer_stage1(l.w, l.snapshot, bits, gs);
  r.part = exact_partition(l.snapshot, bs);
  r.out = refine_layer(r.s1, l.snapshot, r.part, cfg);
  return r;
}

}  // namespace

TEST(RefineLayer, OnGridWeightsStopImmediately) {
  auto l = make_layer(9, 6, 16, 32);
  l.w = project_matrix(l.w, fit_grids(l.w, 4, 16));
  l.snapshot = capture_snapshot(l.snapshot.x_orig, l.w,
                                DampedHessian{l.snapshot.h_damped, l.snapshot.lambda, l.snapshot.percdamp},
                                l.snapshot.calibration_rows);
  const auto r = run(l, 4, RefineConfig{});
  EXPECT_EQ(r.out.trace.gamma.front(), 0.0);
  EXPECT_TRUE(r.out.trace.stopped_early);
  EXPECT_EQ(r.out.trace.iterations, 0u);
  EXPECT_EQ(r.out.w_refined, l.w);
}

TEST(RefineLayer, ZeroIterationsReturnsStage1) {
  const auto l = make_layer(10, 6, 16, 32);
  RefineConfig cfg;
  cfg.t_max = 0;
  const auto r = run(l, 4, cfg);
  EXPECT_EQ(r.out.w_refined, r.s1.w_init);
  EXPECT_EQ(r.out.codes, r.s1.codes);
  EXPECT_EQ(r.out.trace.gamma.size(), 1u);
  EXPECT_FALSE(r.out.trace.stopped_early);
}

TEST(RefineLayer, DefaultsRunAtMostFiveSweeps) {
  const auto l = make_layer(11, 16, 32, 64);
  RefineConfig cfg;
  cfg.early_stop = false;
  const auto r = run(l, 8, cfg);
  EXPECT_EQ(r.out.trace.iterations, 5u);
  EXPECT_EQ(r.out.trace.gamma.size(), 6u);
  EXPECT_LE(run(l, 8, RefineConfig{}).out.trace.iterations, 5u);
}

TEST(RefineLayer, FullStepNeverWorseAndConsistent) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto l = make_layer(20 + seed, 64, 64, 128, 8);
    RefineConfig cfg;
    cfg.alpha = 1.0;
    const auto r = run(l, 4, cfg, 4, 128);
    const auto& tr = r.out.trace;
    EXPECT_LE(tr.gamma_final, tr.gamma.front());
    EXPECT_DOUBLE_EQ(tr.total_reduction_pct, reduction_pct(tr.gamma.front(), tr.gamma_final));
    EXPECT_DOUBLE_EQ(tr.gamma_final, output_loss(l.snapshot, r.out.w_refined));
    EXPECT_TRUE(on_grid(r.out.w_refined, r.out.grid));
    EXPECT_EQ(decode(r.out.codes, r.out.grid), r.out.w_refined);
    // every accepted sweep decreased the loss; only the sweep that triggered
    // the stop may fail to
    for (std::size_t t = 1; t + 1 < tr.gamma.size(); ++t) EXPECT_LT(tr.gamma[t], tr.gamma[t - 1]);
  }
}

TEST(RefineLayer, AnyConfigNeverWorseThanStage1) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    const auto l = make_layer(300 + trial, oracle::uniform_int(rng, 1, 12), oracle::uniform_int(rng, 4, 24), 40);
    RefineConfig cfg;
    cfg.alpha = std::uniform_real_distribution<double>(0.01, 1.0)(rng);
    cfg.t_max = oracle::uniform_int(rng, 1, 6);
    cfg.refit_grids = trial % 3 == 0;
    const auto r = run(l, oracle::uniform_int(rng, 1, 8), cfg, static_cast<int>(oracle::uniform_int(rng, 2, 8)),
                       oracle::uniform_int(rng, 1, 16));
    EXPECT_LE(r.out.trace.gamma_final, r.out.trace.gamma.front());
    EXPECT_TRUE(on_grid(r.out.w_refined, r.out.grid));
  }
}

TEST(RefineLayer, Deterministic) {
  const auto l = make_layer(13, 16, 32, 64);
  RefineConfig cfg;
  cfg.alpha = 0.5;
  const auto a = run(l, 4, cfg);
  const auto b = run(l, 4, cfg);
  EXPECT_EQ(a.out.codes, b.out.codes);
  EXPECT_EQ(a.out.trace.gamma, b.out.trace.gamma);
}

TEST(RefineLayer, UnquantizedSingleBlockSolvesExactly) {
  const auto l = make_layer(14, 8, 12, 40);
  RefineConfig cfg;
  cfg.alpha = 1.0;
  cfg.t_max = 1;
  cfg.project = false;
  const auto r = run(l, 12, cfg);
  EXPECT_LT(r.out.trace.gamma[1], 1e-10 * r.out.trace.gamma[0]);
}

TEST(RefineLayer, UnquantizedBlocksDecreaseEverySweep) {
  const auto l = make_layer(15, 8, 12, 40);
  RefineConfig cfg;
  cfg.alpha = 1.0;
  cfg.t_max = 8;
  cfg.project = false;
  cfg.early_stop = false;
  const auto r = run(l, 3, cfg);
  const auto& g = r.out.trace.gamma;
  for (std::size_t t = 1; t < g.size(); ++t) {
    if (g[t - 1] < 1e-20 * g[0]) break;
    EXPECT_LT(g[t], g[t - 1]) << t;
  }
}

TEST(RefineLayer, RejectsMismatchedInputs) {
  const auto l = make_layer(16, 4, 8, 16);
  const auto other = make_layer(17, 4, 6, 16);
  const auto s1 = quantize_layer_stage1(l.w, l.snapshot, 4, 8);
  EXPECT_THROW(refine_layer(s1, other.snapshot, exact_partition(other.snapshot, 2), RefineConfig{}), ShapeError);
  RefineConfig bad;
  bad.alpha = 2.0;
  EXPECT_THROW(refine_layer(s1, l.snapshot, exact_partition(l.snapshot, 2), bad), ArgumentError);
}
