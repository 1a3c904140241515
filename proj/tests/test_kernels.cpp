#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "oplab/kernels.hpp"
#include "support.hpp"

using namespace oplab;
using oplab::testing::grf_fields;
using oplab::testing::white_field;
using oplab::testing::dense_t;
using oplab::testing::as_vector;
using oplab::testing::as_field;

namespace {

constexpr double kPi = std::numbers::pi;

}  // namespace

TEST(KernelNamesTest, RoundTrip) {
  for (auto k : kAllInputKernels) EXPECT_EQ(input_kernel_from_name(name(k)), k);
  EXPECT_EQ(output_kernel_from_name("laplace"), OutputKernelKind::Laplace);
  EXPECT_THROW(input_kernel_from_name("rbf"), std::invalid_argument);
  EXPECT_THROW(output_kernel_from_name("cauchy"), std::invalid_argument);
  EXPECT_THROW(InputKernel(InputKernelKind::Laplacian, 0.0), std::invalid_argument);
}

TEST(KxEvalTest, LaplacianOfEqualFieldsIsOne) {
  const GridSpec g(8);
  SeededRng rng(1);
  const Field f = sample_grf(GrfConfig{}, g, rng);
  EXPECT_EQ(kx_eval(InputKernel(InputKernelKind::Laplacian), f, f), 1.0);
}

TEST(KxEvalTest, EnergyOfEqualNormsIsOne) {
  const GridSpec g(8);
  SeededRng rng(2);
  const Field f = sample_grf(GrfConfig{}, g, rng);
  EXPECT_EQ(kx_eval(InputKernel(InputKernelKind::Energy), f, -f), 1.0);
}

TEST(KxEvalTest, GradientRbfIgnoresConstantShift) {
  const GridSpec g(8);
  SeededRng rng(3);
  const Field f = sample_grf(GrfConfig{}, g, rng);
  EXPECT_NEAR(kx_eval(InputKernel(InputKernelKind::GradientRbf), f, f + Field::constant(g, 4.0)), 1.0, 1e-12);
}

TEST(KxEvalTest, LinearMatchesDirectSum) {
  const GridSpec g(8);
  SeededRng rng(4);
  const Field f = sample_grf(GrfConfig{}, g, rng), h = sample_grf(GrfConfig{}, g, rng);
  double s = 0.0;
  for (int a = 0; a < 8; ++a) {
    for (int b = 0; b < 8; ++b) s += f(a, b) * h(a, b);
  }
  EXPECT_NEAR(kx_eval(InputKernel(InputKernelKind::Linear), f, h), s / 64.0, 1e-15);
}

TEST(KxEvalTest, ClosedFormsOnExplicitFields) {
  const GridSpec g(16);
  const Field c = Field::sample(g, [](double x1, double) { return std::cos(2 * kPi * x1); });
  const Field z(g);
  // ||c||^2 = 1/2, ||grad c||^2 = 2 pi^2.
  EXPECT_NEAR(kx_eval(InputKernel(InputKernelKind::Laplacian, 0.5), c, z), std::exp(-std::sqrt(0.5) / 0.5), 1e-14);
  EXPECT_NEAR(kx_eval(InputKernel(InputKernelKind::Energy, 2.0), c, z), std::exp(-0.25 / 8.0), 1e-14);
  EXPECT_NEAR(kx_eval(InputKernel(InputKernelKind::GradientRbf, 3.0), c, z), std::exp(-2 * kPi * kPi / 18.0), 1e-12);
}

TEST(KxEvalTest, RangesAndSymmetry) {
  const GridSpec g(8);
  SeededRng rng(5);
  for (auto kind : kAllInputKernels) {
    const InputKernel k(kind);
    for (int t = 0; t < 10; ++t) {
      const Field f = sample_grf(GrfConfig{}, g, rng), h = sample_grf(GrfConfig{}, g, rng);
      const double v = kx_eval(k, f, h);
      EXPECT_DOUBLE_EQ(v, kx_eval(k, h, f));
      if (kind != InputKernelKind::Linear) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
      }
    }
  }
}

TEST(KxEvalTest, GridMismatchThrows) {
  EXPECT_THROW(kx_eval(InputKernel(InputKernelKind::Laplacian), Field(GridSpec(8)), Field(GridSpec(16))), ShapeError);
}

class OutputOperatorTest : public ::testing::TestWithParam<OutputKernelKind> {};

TEST_P(OutputOperatorTest, CirculantMatchesDenseOracle) {
  const GridSpec g(8);
  const OutputOperator t(GetParam(), 0.5, g);
  const Eigen::MatrixXd d = dense_t(GetParam(), 0.5, 8);
  EXPECT_LE((t.dense_matrix() - d).cwiseAbs().maxCoeff(), 1e-14);
  SeededRng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const Field u = white_field(g, rng);
    const Field dense = as_field(g, d * as_vector(u));
    EXPECT_LE(sup_norm(t.apply(u) - dense), 1e-12);
  }
}

TEST_P(OutputOperatorTest, ConstantMapsToRowSum) {
  const GridSpec g(8);
  const OutputOperator t(GetParam(), 0.5, g);
  const Eigen::MatrixXd d = dense_t(GetParam(), 0.5, 8);
  const double s = d.row(0).sum();
  const Field out = t.apply(Field::constant(g, 2.5));
  for (double v : out.values()) EXPECT_NEAR(v, 2.5 * s, 1e-12);
}

TEST_P(OutputOperatorTest, ImpulseGivesScaledStencil) {
  const GridSpec g(8);
  const OutputOperator t(GetParam(), 0.5, g);
  const Eigen::MatrixXd d = dense_t(GetParam(), 0.5, 8);
  Field impulse(g);
  impulse(0, 0) = 1.0;
  const Field out = t.apply(impulse);
  for (int p = 0; p < 64; ++p) EXPECT_NEAR(out.values()[p], d(p, 0), 1e-12);
  EXPECT_LE(sup_norm(out - (1.0 / 64.0) * t.stencil()), 1e-12);
}

TEST_P(OutputOperatorTest, SelfAdjointAndPositive) {
  const GridSpec g(16);
  const OutputOperator t(GetParam(), 0.5, g);
  SeededRng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const Field u = white_field(g, rng), v = white_field(g, rng);
    EXPECT_NEAR(inner_product(t.apply(u), v), inner_product(u, t.apply(v)), 1e-12);
    EXPECT_GE(inner_product(t.apply(u), u), 0.0);
  }
  EXPECT_GE(t.min_symbol(), 0.0);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(dense_t(GetParam(), 0.5, 8));
  EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-12);
}

TEST_P(OutputOperatorTest, MaxSymbolMatchesDenseSpectrum) {
  const OutputOperator t(GetParam(), 0.5, GridSpec(8));
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(dense_t(GetParam(), 0.5, 8));
  EXPECT_NEAR(t.max_symbol(), eig.eigenvalues().maxCoeff(), 1e-12);
}

INSTANTIATE_TEST_SUITE_P(BothKinds, OutputOperatorTest,
                         ::testing::Values(OutputKernelKind::Gaussian, OutputKernelKind::Laplace),
                         [](const auto& info) { return std::string(name(info.param)); });

TEST(OutputOperatorTest, RejectsBadSigmaAndGrid) {
  EXPECT_THROW(OutputOperator(OutputKernelKind::Gaussian, -1.0, GridSpec(8)), std::invalid_argument);
  const OutputOperator t(OutputKernelKind::Gaussian, 0.5, GridSpec(8));
  EXPECT_THROW(t.apply(Field(GridSpec(16))), ShapeError);
}

TEST(HsApplyTest, OrthogonalInputsUnderLinearGiveZero) {
  const GridSpec g(8);
  const HSKernel kappa{InputKernel(InputKernelKind::Linear), OutputOperator(OutputKernelKind::Gaussian, 0.5, g)};
  const Field c = Field::sample(g, [](double x1, double) { return std::cos(2 * kPi * x1); });
  const Field s = Field::sample(g, [](double x1, double) { return std::sin(2 * kPi * x1); });
  SeededRng rng(8);
  EXPECT_LE(sup_norm(hs_apply(kappa, c, s, white_field(g, rng))), 1e-15);
}

TEST(HsApplyTest, LaplacianCoincidentInputsGiveT) {
  const GridSpec g(8);
  const HSKernel kappa{InputKernel(InputKernelKind::Laplacian), OutputOperator(OutputKernelKind::Laplace, 0.5, g)};
  SeededRng rng(9);
  const Field f = sample_grf(GrfConfig{}, g, rng), u = white_field(g, rng);
  EXPECT_EQ(hs_apply(kappa, f, f, u), ky_apply(kappa.T, u));
}

TEST(HsApplyTest, GenericMatchesScalarTimesDense) {
  const GridSpec g(8);
  SeededRng rng(10);
  for (auto kind : kAllInputKernels) {
    const HSKernel kappa{InputKernel(kind), OutputOperator(OutputKernelKind::Gaussian, 0.5, g)};
    const Field f1 = sample_grf(GrfConfig{}, g, rng), f2 = sample_grf(GrfConfig{}, g, rng), u = white_field(g, rng);
    const double k = kx_eval(kappa.kx, f1, f2);
    const Field expected = as_field(g, k * (dense_t(OutputKernelKind::Gaussian, 0.5, 8) * as_vector(u)));
    EXPECT_LE(sup_norm(hs_apply(kappa, f1, f2, u) - expected), 1e-12);
  }
}

TEST(HsApplyTest, OperatorValuedHermitian) {
  const GridSpec g(16);
  SeededRng rng(11);
  for (auto kind : kAllInputKernels) {
    const HSKernel kappa{InputKernel(kind), OutputOperator(OutputKernelKind::Laplace, 0.5, g)};
    const Field f1 = sample_grf(GrfConfig{}, g, rng), f2 = sample_grf(GrfConfig{}, g, rng);
    const Field u = white_field(g, rng), v = white_field(g, rng);
    const double scale = norm(u) * norm(v);
    EXPECT_LE(std::abs(inner_product(hs_apply(kappa, f1, f2, u), v) - inner_product(u, hs_apply(kappa, f2, f1, v))),
              1e-12 * scale);
  }
}

TEST(GramTest, SingleLaplacianEntryIsOne) {
  const GridSpec g(8);
  SeededRng rng(12);
  const std::vector<Field> a{sample_grf(GrfConfig{}, g, rng)};
  const Eigen::MatrixXd m = gram_x(InputKernel(InputKernelKind::Laplacian), a, a);
  ASSERT_EQ(m.rows(), 1);
  EXPECT_EQ(m(0, 0), 1.0);
}

TEST(GramTest, OrthonormalPairUnderLinearIsIdentity) {
  const GridSpec g(8);
  const std::vector<Field> a{
      Field::sample(g, [](double x1, double) { return std::sqrt(2.0) * std::cos(2 * kPi * x1); }),
      Field::sample(g, [](double, double x2) { return std::sqrt(2.0) * std::sin(2 * kPi * x2); })};
  const Eigen::MatrixXd m = gram_x(InputKernel(InputKernelKind::Linear), a, a);
  EXPECT_LE((m - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(GramTest, EntriesMatchPointwiseLoop) {
  const GridSpec g(8);
  SeededRng rng(13);
  const auto a = grf_fields(g, 4, rng), b = grf_fields(g, 3, rng);
  for (auto kind : kAllInputKernels) {
    const InputKernel k(kind, 0.7);
    const Eigen::MatrixXd m = gram_x(k, a, b);
    ASSERT_EQ(m.rows(), 4);
    ASSERT_EQ(m.cols(), 3);
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(m(i, j), kx_eval(k, a[i], b[j]));
    }
  }
}

TEST(GramTest, LaplacianGramIsPsd) {
  const GridSpec g(8);
  SeededRng rng(14);
  for (int set = 0; set < 20; ++set) {
    const int size = 1 + set % 8;
    const auto a = grf_fields(g, size, rng);
    const Eigen::MatrixXd m = gram_x(InputKernel(InputKernelKind::Laplacian), a, a);
    EXPECT_LE((m - m.transpose()).cwiseAbs().maxCoeff(), 0.0);
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
    EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-10 * m.trace());
  }
}
