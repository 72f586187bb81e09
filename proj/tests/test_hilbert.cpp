#include "pdpi/hilbert.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

using namespace pdpi;
using pdpi::testing::Rng;
using pdpi::testing::kSamples;

TEST(Hilbert, InnerProductRequiresEqualDimensions) {
  EXPECT_THROW(inner(Vector::Zero(2), Vector::Zero(3)), std::invalid_argument);
  Rng rng(1);
  for (int s = 0; s < kSamples; ++s) {
    const Vector x = rng.vec(rng.integer(1, 8));
    EXPECT_GE(inner(x, x), 0.0);
  }
  EXPECT_EQ(inner(Vector::Zero(4), Vector::Zero(4)), 0.0);
}

TEST(Hilbert, ApproxEqualIsHybrid) {
  EXPECT_TRUE(approx_equal(1e6, 1e6 + 1e-5));
  EXPECT_FALSE(approx_equal(0.0, 1e-9));
}

TEST(Hilbert, LinearMapRejectsWrongDimension) {
  const auto L = LinearMap::from_matrix(Matrix::Ones(3, 2));
  EXPECT_THROW(L.apply(Vector::Zero(3)), std::invalid_argument);
  EXPECT_THROW(L.apply_adjoint(Vector::Zero(2)), std::invalid_argument);
}

TEST(Hilbert, AdjointIdentityProperty) {
  Rng rng(2);
  for (int s = 0; s < kSamples; ++s) {
    const Index r = rng.integer(1, 9), c = rng.integer(1, 9);
    for (const auto& L : {LinearMap::from_matrix(rng.mat(r, c)), LinearMap::identity(c), LinearMap::zero(c, r)}) {
      const Vector x = rng.vec(L.domain_dim), y = rng.vec(L.codomain_dim);
      const double lhs = inner(L.apply(x), y), rhs = inner(x, L.apply_adjoint(y));
      EXPECT_LE(std::abs(lhs - rhs), 1e-10 * (1.0 + x.norm() * y.norm()));
    }
  }
}

TEST(Hilbert, ProjectorProperties) {
  Rng rng(3);
  for (int s = 0; s < kSamples; ++s) {
    const Index n = rng.integer(2, 8), k = rng.integer(1, n);
    const auto P = SubspaceProjector::from_basis(rng.mat(n, k));
    const Vector x = rng.vec(n, 3.0), y = rng.vec(n, 3.0);
    const Vector px = P(x), py = P(y);
    EXPECT_LE((P(px) - px).norm(), 1e-12 * (1.0 + x.norm()));
    EXPECT_LE((px - py).norm(), (x - y).norm() + 1e-12);
    EXPECT_NEAR(inner(px, y), inner(x, py), 1e-10 * (1.0 + x.norm() * y.norm()));
  }
}

TEST(Hilbert, ProjectorMatchesLeastSquaresOracle) {
  Rng rng(4);
  for (int s = 0; s < kSamples; ++s) {
    const Index n = rng.integer(2, 7), k = rng.integer(1, n);
    const Matrix B = rng.mat(n, k);
    const Vector x = rng.vec(n);
    EXPECT_LE((SubspaceProjector::from_basis(B)(x) - pdpi::testing::projector_matrix(B) * x).norm(), 1e-10);
  }
}

TEST(Hilbert, SubspaceProjectExamples) {
  const Vector x = Vector::LinSpaced(4, -1.0, 2.0);
  EXPECT_EQ(subspace_project(SubspaceProjector::identity(4), x), x);
  EXPECT_EQ(subspace_project(SubspaceProjector::zero(4), x), Vector::Zero(4));
  Matrix b(2, 1);
  b << 1.0 / std::sqrt(2.0), 1.0 / std::sqrt(2.0);
  const Vector p = subspace_project(SubspaceProjector::from_basis(b), Vector::Unit(2, 0) * 2.0);
  EXPECT_NEAR(p[0], 1.0, 1e-14);
  EXPECT_NEAR(p[1], 1.0, 1e-14);
  EXPECT_THROW(subspace_project(SubspaceProjector::identity(3), x), std::invalid_argument);
}

TEST(Hilbert, OpNormExamples) {
  for (Index n : {1, 5, 17}) EXPECT_EQ(op_norm(LinearMap::identity(n)).value, 1.0);
  Matrix d = Matrix::Zero(2, 2);
  d.diagonal() << 3.0, 1.0;
  EXPECT_NEAR(op_norm(LinearMap::from_matrix(d)).value, 3.0, 1e-10);
  EXPECT_EQ(op_norm(LinearMap::zero(3, 4)).value, 0.0);
  EXPECT_THROW(op_norm(LinearMap::identity(2), 0), std::invalid_argument);
  EXPECT_THROW(op_norm(LinearMap::identity(2), 10, 0.0), std::invalid_argument);
}

TEST(Hilbert, OpNormMatchesGramOracle) {
  Rng rng(5);
  for (int s = 0; s < 20; ++s) {
    const Matrix A = rng.mat(8, 5);
    const auto est = op_norm(LinearMap::from_matrix(A), 100000, 1e-15);
    EXPECT_NEAR(est.value, pdpi::testing::spectral_norm_gram(A), 1e-8);
    EXPECT_LE(est.value, pdpi::testing::spectral_norm_gram(A) * (1.0 + 1e-12));
  }
}
