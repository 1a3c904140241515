#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "oplab/grid.hpp"
#include "support.hpp"

using namespace oplab;
using oplab::testing::max_abs_diff;
using oplab::testing::white_field;

namespace {

constexpr double kPi = std::numbers::pi;

}  // namespace

TEST(GridSpecTest, RejectsOddAndTinyGrids) {
  EXPECT_THROW(GridSpec(7), ShapeError);
  EXPECT_THROW(GridSpec(2), ShapeError);
  EXPECT_NO_THROW(GridSpec(4));
}

TEST(GridSpecTest, FrequencyLayoutFollowsFftOrder) {
  const GridSpec g(8);
  EXPECT_EQ(g.frequency(0), 0);
  EXPECT_EQ(g.frequency(3), 3);
  EXPECT_EQ(g.frequency(4), 4);
  EXPECT_EQ(g.frequency(5), -3);
  EXPECT_EQ(g.magnitude(7), 1);
  EXPECT_EQ(g.index_of(-1), 7);
}

TEST(InnerProductTest, ConstantsOnUnitTorus) {
  const GridSpec g(8);
  EXPECT_DOUBLE_EQ(inner_product(Field::constant(g, 1.0), Field::constant(g, 2.0)), 2.0);
}

TEST(InnerProductTest, ZeroFieldGivesZero) {
  const GridSpec g(8);
  SeededRng rng(3);
  EXPECT_EQ(inner_product(Field(g), white_field(g, rng)), 0.0);
}

TEST(InnerProductTest, CosineSquaredIntegratesToHalf) {
  const GridSpec g(8);
  const Field c = Field::sample(g, [](double x1, double) { return std::cos(2 * kPi * x1); });
  double direct = 0.0;
  for (int a = 0; a < 8; ++a) {
    const double v = std::cos(2 * kPi * a / 8.0);
    direct += 8 * v * v;
  }
  direct /= 64.0;
  EXPECT_NEAR(inner_product(c, c), 0.5, 1e-15);
  EXPECT_NEAR(direct, 0.5, 1e-15);
}

TEST(InnerProductTest, SymmetricAndNonnegative) {
  const GridSpec g(16);
  SeededRng rng(4);
  const Field f = white_field(g, rng), h = white_field(g, rng);
  EXPECT_DOUBLE_EQ(inner_product(f, h), inner_product(h, f));
  EXPECT_GE(inner_product(f, f), 0.0);
}

TEST(InnerProductTest, GridMismatchIsShapeError) {
  EXPECT_THROW(inner_product(Field(GridSpec(8)), Field(GridSpec(16))), ShapeError);
}

TEST(SpectralTest, ConstantHasOnlyZeroMode) {
  const GridSpec g(8);
  const SpectralField s = to_spectral(Field::constant(g, 3.5));
  for (int k1 = 0; k1 < 8; ++k1) {
    for (int k2 = 0; k2 < 8; ++k2) {
      if (k1 == 0 && k2 == 0) {
        EXPECT_NEAR(s(k1, k2).real(), 3.5, 1e-14);
        EXPECT_NEAR(s(k1, k2).imag(), 0.0, 1e-14);
      } else {
        EXPECT_NEAR(std::abs(s(k1, k2)), 0.0, 1e-14);
      }
    }
  }
}

TEST(SpectralTest, CosineHasHalfAtPlusMinusOne) {
  const GridSpec g(8);
  const SpectralField s = to_spectral(Field::sample(g, [](double x1, double) { return std::cos(2 * kPi * x1); }));
  for (int k1 = 0; k1 < 8; ++k1) {
    for (int k2 = 0; k2 < 8; ++k2) {
      const int nu1 = g.frequency(k1), nu2 = g.frequency(k2);
      const double expected = (std::abs(nu1) == 1 && nu2 == 0) ? 0.5 : 0.0;
      EXPECT_NEAR(s(k1, k2).real(), expected, 1e-15) << nu1 << "," << nu2;
      EXPECT_NEAR(s(k1, k2).imag(), 0.0, 1e-15);
    }
  }
}

TEST(SpectralTest, RoundTripAcrossGridSizes) {
  for (int n : {4, 8, 16, 32}) {
    const GridSpec g(n);
    SeededRng rng(10 + n);
    for (int trial = 0; trial < 5; ++trial) {
      const Field f = white_field(g, rng);
      EXPECT_LE(sup_norm(from_spectral(to_spectral(f)) - f), 1e-12) << "N=" << n;
    }
  }
}

TEST(SpectralTest, ParsevalAgainstGridQuadrature) {
  for (int n : {4, 8, 16, 32}) {
    const GridSpec g(n);
    SeededRng rng(20 + n);
    const Field f = white_field(g, rng), h = white_field(g, rng);
    const double grid_ip = inner_product(f, h);
    const double spec_ip = spectral_inner_product(to_spectral(f), to_spectral(h));
    EXPECT_LE(std::abs(grid_ip - spec_ip), 1e-12 * (norm(f) * norm(h) + 1.0));
    EXPECT_NEAR(squared_norm(f), spectral_inner_product(to_spectral(f), to_spectral(f)), 1e-12 * squared_norm(f));
  }
}

TEST(SpectralTest, InverseOfRealFieldHasNoImaginaryPart) {
  const GridSpec g(16);
  SeededRng rng(1);
  EXPECT_LT(imaginary_residue(to_spectral(white_field(g, rng))), 1e-12);
}

TEST(GradientTest, ConstantHasZeroGradient) {
  const GridSpec g(8);
  const auto grad = spectral_gradient(Field::constant(g, 2.0));
  EXPECT_LT(sup_norm(grad[0]), 1e-14);
  EXPECT_LT(sup_norm(grad[1]), 1e-14);
}

TEST(GradientTest, SineDifferentiatesToScaledCosine) {
  const GridSpec g(16);
  const Field f = Field::sample(g, [](double x1, double) { return std::sin(2 * kPi * x1); });
  const Field expected = Field::sample(g, [](double x1, double) { return 2 * kPi * std::cos(2 * kPi * x1); });
  const auto grad = spectral_gradient(f);
  EXPECT_LE(sup_norm(grad[0] - expected), 1e-10);
  EXPECT_LE(sup_norm(grad[1]), 1e-10);
}

TEST(GradientTest, MixedModeAlongSecondAxis) {
  const GridSpec g(16);
  const Field f = Field::sample(g, [](double x1, double x2) { return std::cos(2 * kPi * (x1 + 3 * x2)); });
  const Field d2 = Field::sample(g, [](double x1, double x2) { return -6 * kPi * std::sin(2 * kPi * (x1 + 3 * x2)); });
  EXPECT_LE(sup_norm(spectral_gradient(f)[1] - d2), 1e-10);
}

TEST(GradientTest, AntiSelfAdjoint) {
  const GridSpec g(16);
  SeededRng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const Field f = white_field(g, rng), h = white_field(g, rng);
    const auto gf = spectral_gradient(f), gh = spectral_gradient(h);
    for (int axis = 0; axis < 2; ++axis) {
      EXPECT_NEAR(inner_product(gf[axis], h), -inner_product(f, gh[axis]), 1e-10);
    }
  }
}

TEST(GradientTest, NormalOperatorIsAdjointComposition) {
  const GridSpec g(8);
  SeededRng rng(8);
  const Field f = white_field(g, rng), h = white_field(g, rng);
  const auto gf = spectral_gradient(f), gh = spectral_gradient(h);
  const double lhs = inner_product(gradient_normal_operator(gf), h);
  const double rhs = inner_product(gf[0], gh[0]) + inner_product(gf[1], gh[1]);
  EXPECT_NEAR(lhs, rhs, 1e-9 * (std::abs(rhs) + 1.0));
}

TEST(MultiplierTest, OnesIsIdentityOnRetainedModes) {
  const GridSpec g(16);
  SeededRng rng(2);
  const Field f = sample_grf(GrfConfig{}, g, rng);
  EXPECT_LE(sup_norm(apply_fourier_multiplier(SpectralMultiplier::ones(g), f) - f), 1e-12);
}

TEST(MultiplierTest, OnesDropsNyquistLines) {
  const GridSpec g(8);
  const Field f = Field::sample(g, [](double x1, double) { return std::cos(2 * kPi * 4 * x1); });
  EXPECT_LE(sup_norm(apply_fourier_multiplier(SpectralMultiplier::ones(g), f)), 1e-14);
}

TEST(MultiplierTest, ZerosGiveZeroField) {
  const GridSpec g(8);
  SeededRng rng(2);
  EXPECT_EQ(sup_norm(apply_fourier_multiplier(SpectralMultiplier::zeros(g), white_field(g, rng))), 0.0);
}

TEST(MultiplierTest, ZeroModeOnlyGivesGridMean) {
  const GridSpec g(8);
  SeededRng rng(5);
  const Field f = white_field(g, rng);
  SpectralMultiplier r(g);
  r(0, 0) = 1.0;
  double mean = 0.0;
  for (double v : f.values()) mean += v;
  mean /= 64.0;
  const Field out = apply_fourier_multiplier(r, f);
  for (double v : out.values()) EXPECT_NEAR(v, mean, 1e-14);
}

TEST(MultiplierTest, MirroredToConjugateModes) {
  const GridSpec g(8);
  SpectralMultiplier r(g);
  r(1, 2) = 3.0;
  EXPECT_EQ(r.symbol(g.index_of(1), g.index_of(2)), 3.0);
  EXPECT_EQ(r.symbol(g.index_of(-1), g.index_of(-2)), 3.0);
  EXPECT_EQ(r.symbol(g.index_of(-1), g.index_of(2)), 3.0);
  EXPECT_EQ(r.symbol(4, 2), 0.0);
}

TEST(MultiplierTest, Linear) {
  const GridSpec g(16);
  SeededRng rng(9);
  SpectralMultiplier r(g);
  for (double& v : r.values()) v = rng.normal();
  const Field f = white_field(g, rng), h = white_field(g, rng);
  const double a = 1.7, b = -0.3;
  const Field lhs = apply_fourier_multiplier(r, a * f + b * h);
  const Field rhs = a * apply_fourier_multiplier(r, f) + b * apply_fourier_multiplier(r, h);
  EXPECT_LE(norm(lhs - rhs), 1e-12 * (norm(lhs) + 1.0));
}

TEST(MultiplierTest, ShapeMismatchThrows) {
  EXPECT_THROW(apply_fourier_multiplier(SpectralMultiplier::ones(GridSpec(8)), Field(GridSpec(16))), ShapeError);
}

TEST(MultiplierTest, GradientMatchesFiniteDifference) {
  const GridSpec g(8);
  SeededRng rng(11);
  const Field f = white_field(g, rng), h = white_field(g, rng);
  SpectralMultiplier r(g);
  for (double& v : r.values()) v = rng.normal();
  SpectralMultiplier grad(g);
  accumulate_multiplier_gradient(to_spectral(f), to_spectral(h), grad);
  // <h, W f> is linear in the weights, so a unit perturbation is exact.
  for (std::size_t i = 0; i < r.values().size(); ++i) {
    SpectralMultiplier e(g);
    e.values()[i] = 1.0;
    EXPECT_NEAR(grad.values()[i], inner_product(h, apply_fourier_multiplier(e, f)), 1e-12);
  }
}

TEST(FieldIoTest, RoundTripIsExact) {
  const GridSpec g(8);
  SeededRng rng(12);
  const Field f = white_field(g, rng);
  std::stringstream buf;
  write_field(buf, f);
  EXPECT_EQ(buf.str().size(), 12u + 64u * 8u);
  EXPECT_EQ(read_field(buf), f);
}

TEST(FieldIoTest, BadMagicThrows) {
  std::stringstream buf("XXXX");
  EXPECT_THROW(read_field(buf), std::runtime_error);
}
