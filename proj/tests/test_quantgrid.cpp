#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "rpiq/quantgrid.hpp"

using namespace rpiq;

namespace {

GroupParams params(double scale, int zero, int bits) { return GroupParams{scale, zero, bits}; }

}  // namespace

TEST(FitGrid, DirectArithmetic) {
  const std::vector<double> v{-1.0, 0.5, 2.0};
  const auto p = fit_grid(v, 4);
  EXPECT_NEAR(p.scale, 0.2, 1e-7);
  EXPECT_GE(p.scale, 0.2);
  EXPECT_EQ(p.zero_point, 5);
  EXPECT_EQ(p.bits, 4);
}

TEST(FitGrid, ScaleIsFloatRepresentable) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 200; ++t) {
    const Matrix m = oracle::random_matrix(rng, 1, 16, 3.0);
    const auto p = fit_grid(m.values(), 4);
    EXPECT_EQ(static_cast<double>(static_cast<float>(p.scale)), p.scale);
  }
}

TEST(FitGrid, DegenerateRanges) {
  const std::vector<double> zeros{0.0, 0.0};
  const auto z = fit_grid(zeros, 4);
  EXPECT_NEAR(z.scale, 1e-12, 1e-18);
  EXPECT_EQ(z.zero_point, 0);
  EXPECT_EQ(project(0.0, z), 0.0);

  // Constant groups keep zero in range, so c lands on the top (or bottom) level.
  const std::vector<double> c{1.875, 1.875};
  EXPECT_NEAR(project(1.875, fit_grid(c, 4)), 1.875, 1e-9);
  const std::vector<double> n{-0.3, -0.3};
  const auto pn = fit_grid(n, 4);
  EXPECT_NEAR(project(-0.3, pn), -0.3, pn.scale / 2);
  EXPECT_EQ(pn.zero_point, 15);
}

TEST(FitGrid, Errors) {
  const std::vector<double> empty;
  EXPECT_THROW(fit_grid(empty, 4), ArgumentError);
  const std::vector<double> v{1.0};
  EXPECT_THROW(fit_grid(v, 1), ArgumentError);
  EXPECT_THROW(fit_grid(v, 9), ArgumentError);
}

TEST(FitGrid, RandomGroupErrorWithinHalfStep) {
  std::mt19937_64 rng(2);
  for (int bits : {2, 3, 4, 8}) {
    const Matrix m = oracle::random_matrix(rng, 1, 128);
    const auto p = fit_grid(m.values(), bits);
    for (double x : m.values()) EXPECT_LE(std::abs(x - project(x, p)), p.scale / 2 + 1e-9);
  }
}

TEST(Quantize, DirectArithmetic) {
  EXPECT_EQ(quantize(3.2, params(1.0, 0, 4)), 3);
  EXPECT_EQ(quantize(100.0, params(1.0, 0, 4)), 15);
  EXPECT_EQ(quantize(-100.0, params(1.0, 3, 4)), 0);
  // half-to-even
  EXPECT_EQ(quantize(2.5, params(1.0, 0, 4)), 2);
  EXPECT_EQ(quantize(3.5, params(1.0, 0, 4)), 4);
}

TEST(Quantize, OnGridFixedPoint) {
  const auto p = params(0.25, 6, 4);
  for (int q = 0; q <= 15; ++q) {
    const double x = 0.25 * (q - 6);
    EXPECT_EQ(quantize(x, p), q);
    EXPECT_EQ(dequantize(q, p), x);
  }
}

TEST(Quantize, NearestLevelByBruteForce) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 2.0);
  const std::vector<double> range{-1.0, 2.0};
  const auto p = fit_grid(range, 4);
  for (int t = 0; t < 10000; ++t) {
    const double x = u(rng);
    EXPECT_EQ(project(x, p), oracle::nearest_level(x, p)) << x;
  }
  // exact ties between levels
  const auto q = params(1.0, 0, 4);
  for (int k = 0; k < 15; ++k) EXPECT_EQ(project(k + 0.5, q), oracle::nearest_level(k + 0.5, q));
}

TEST(Dequantize, Arithmetic) {
  EXPECT_EQ(dequantize(5, params(0.2, 5, 4)), 0.0);
  EXPECT_NEAR(dequantize(15, params(0.2, 5, 4)), 2.0, 1e-12);
  EXPECT_THROW(dequantize(16, params(0.2, 5, 4)), ArgumentError);
  EXPECT_THROW(dequantize(-1, params(0.2, 5, 4)), ArgumentError);
  const auto p = params(0.125, 3, 4);
  for (int q = 0; q <= 15; ++q) EXPECT_EQ(quantize(dequantize(q, p), p), q);
}

TEST(ProjectMatrix, IdempotentAndScalarOracle) {
  std::mt19937_64 rng(4);
  const Matrix w = oracle::random_matrix(rng, 6, 40);
  const QuantGrid g = fit_grids(w, 4, 16);
  ASSERT_EQ(g.groups_per_row(), 3u);
  const Matrix p = project_matrix(w, g);
  EXPECT_TRUE(on_grid(p, g));
  EXPECT_FALSE(on_grid(w, g));
  EXPECT_EQ(project_matrix(p, g), p);
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) EXPECT_EQ(p(r, c), project(w(r, c), g.at(r, c)));
  EXPECT_EQ(project_matrix(Matrix(6, 40), g), Matrix(6, 40));

  // a block at a column offset uses the groups it overlaps
  const Matrix blk = column_slice(w, 10, 20);
  EXPECT_EQ(project_matrix(blk, g, 10), column_slice(p, 10, 20));
  EXPECT_THROW(project_matrix(blk, g, 35), ShapeError);
}

TEST(EncodeDecode, Roundtrip) {
  std::mt19937_64 rng(5);
  const Matrix w = oracle::random_matrix(rng, 4, 30);
  const QuantGrid g = fit_grids(w, 3, 8);
  const Matrix p = project_matrix(w, g);
  const auto codes = encode(p, g);
  for (auto c : codes) EXPECT_LE(c, 7);
  EXPECT_EQ(decode(codes, g), p);
  EXPECT_THROW(decode(std::vector<std::uint8_t>(3), g), ShapeError);
}

TEST(Pack, BitLayout) {
  const std::vector<std::uint8_t> codes{3, 12};
  const auto p = pack(codes, 4);
  ASSERT_EQ(p.bytes.size(), 1u);
  EXPECT_EQ(p.bytes[0], 0xC3);
  EXPECT_TRUE(pack(std::vector<std::uint8_t>{}, 4).bytes.empty());
  const std::vector<std::uint8_t> bad{16};
  EXPECT_THROW(pack(bad, 4), ArgumentError);
}

TEST(Pack, RoundtripAllWidths) {
  std::mt19937_64 rng(6);
  for (int bits = 2; bits <= 8; ++bits) {
    std::uniform_int_distribution<int> d(0, (1 << bits) - 1);
    for (std::size_t n : {0u, 1u, 7u, 1000u}) {
      std::vector<std::uint8_t> codes(n);
      for (auto& c : codes) c = static_cast<std::uint8_t>(d(rng));
      const auto p = pack(codes, bits);
      EXPECT_EQ(p.bytes.size(), (n * bits + 7) / 8);
      EXPECT_EQ(unpack(p), codes);
    }
  }
}

TEST(Pack, UnpackRejectsWrongLength) {
  PackedBlock p{4, 3, {0x00}};
  EXPECT_THROW(unpack(p), ArgumentError);
}

TEST(QuantGrid, RejectsInvalidParams) {
  EXPECT_THROW(QuantGrid(1, 4, 4, 4, {params(0.0, 0, 4)}), ArgumentError);
  EXPECT_THROW(QuantGrid(1, 4, 4, 4, {params(1.0, 16, 4)}), ArgumentError);
  EXPECT_THROW(QuantGrid(1, 8, 4, 4, {params(1.0, 0, 4)}), ShapeError);
}
