#include <lkis/linalg.hpp>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace lkis;
using namespace lkis::linalg;
using lkis::test::random_matrix;

namespace {

Matrix diag2(double a, double b)
{
    Matrix m = Matrix::Zero(2, 2);
    m(0, 0) = a;
    m(1, 1) = b;
    return m;
}

void expect_penrose(const Matrix& m, const Matrix& p, double tol)
{
    EXPECT_LT((m * p * m - m).norm(), tol * std::max(1.0, m.norm()));
    EXPECT_LT((p * m * p - p).norm(), tol * std::max(1.0, p.norm()));
    EXPECT_LT(((m * p).transpose() - m * p).norm(), tol);
    EXPECT_LT(((p * m).transpose() - p * m).norm(), tol);
}

} // namespace

TEST(Svd, ReconstructsRandomMatrices)
{
    std::mt19937_64 rng(1);
    for (auto [r, c] : {std::pair{5, 3}, {3, 5}, {6, 6}, {1, 4}, {4, 1}}) {
        const Matrix m = random_matrix(r, c, rng);
        const auto f = svd(m);
        EXPECT_LT((f.U * f.S.asDiagonal() * f.V.transpose() - m).norm(), 1e-12);
        EXPECT_LT((f.U.transpose() * f.U - Matrix::Identity(f.U.cols(), f.U.cols())).norm(), 1e-12);
        EXPECT_LT((f.V.transpose() * f.V - Matrix::Identity(f.V.cols(), f.V.cols())).norm(), 1e-12);
        for (Eigen::Index i = 1; i < f.S.size(); ++i) EXPECT_GE(f.S(i - 1), f.S(i));
        EXPECT_GE(f.S.minCoeff(), 0.0);
    }
}

TEST(Svd, SignConventionLargestEntryPositive)
{
    std::mt19937_64 rng(2);
    const Matrix m = random_matrix(7, 4, rng);
    const auto f = svd(m);
    for (Eigen::Index j = 0; j < f.U.cols(); ++j) {
        Eigen::Index imax;
        f.U.col(j).cwiseAbs().maxCoeff(&imax);
        EXPECT_GT(f.U(imax, j), 0.0);
    }
    // Deterministic under a sign flip of the input.
    const auto g = svd(-m);
    EXPECT_LT((g.U - f.U).norm(), 1e-12);
    EXPECT_LT((g.V + f.V).norm(), 1e-12);
}

TEST(Svd, RejectsNonFinite)
{
    Matrix m = Matrix::Ones(2, 2);
    m(0, 1) = std::nan("");
    EXPECT_THROW(svd(m), InvalidArgument);
}

TEST(Pinv, IdentityAndDiagonal)
{
    EXPECT_LT((pinv(Matrix::Identity(3, 3)) - Matrix::Identity(3, 3)).norm(), 1e-15);
    EXPECT_LT((pinv(diag2(2.0, 0.0)) - diag2(0.5, 0.0)).norm(), 1e-15);
}

TEST(Pinv, AllZeroGivesTransposedZero)
{
    const Matrix p = pinv(Matrix::Zero(2, 3));
    EXPECT_EQ(p.rows(), 3);
    EXPECT_EQ(p.cols(), 2);
    EXPECT_EQ(p.norm(), 0.0);
}

TEST(Pinv, FourPenroseConditions)
{
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Eigen::Index r = 1 + trial % 7, c = 1 + (trial * 3) % 6;
        Matrix m = random_matrix(r, c, rng);
        if (trial % 3 == 0 && r > 1 && c > 1) {
            // rank deficient: outer product of two thin factors
            m = random_matrix(r, 1, rng) * random_matrix(1, c, rng);
        }
        expect_penrose(m, pinv(m), 1e-10);
    }
}

TEST(Pinv, RankTruncationIsRelative)
{
    const Matrix m = diag2(1e6, 1e-12);
    EXPECT_EQ(numerical_rank(svd(m).S, default_rank_tol(2, 2)), 1);
    EXPECT_EQ(pinv(m)(1, 1), 0.0);
    const Matrix small = diag2(1e-20, 1e-21);
    EXPECT_EQ(numerical_rank(svd(small).S, default_rank_tol(2, 2)), 2);
}

TEST(Eig, DiagonalSortedByMagnitude)
{
    Matrix m = Matrix::Zero(3, 3);
    m.diagonal() << 0.5, -2.0, 1.0;
    const auto e = eig_general(m);
    EXPECT_NEAR(e.eigenvalues(0).real(), -2.0, 1e-14);
    EXPECT_NEAR(e.eigenvalues(1).real(), 1.0, 1e-14);
    EXPECT_NEAR(e.eigenvalues(2).real(), 0.5, 1e-14);
    EXPECT_NEAR(std::abs(e.right(1, 0)), 1.0, 1e-14);
    EXPECT_NEAR(e.right(1, 0).real(), 1.0, 1e-14);
}

TEST(Eig, RotationHasConjugatePair)
{
    const double th = std::numbers::pi / 4.0;
    Matrix m(2, 2);
    m << std::cos(th), -std::sin(th), std::sin(th), std::cos(th);
    const auto e = eig_general(m);
    EXPECT_NEAR(std::abs(e.eigenvalues(0) - std::polar(1.0, th)), 0.0, 1e-12);
    EXPECT_NEAR(std::abs(e.eigenvalues(1) - std::polar(1.0, -th)), 0.0, 1e-12);
}

TEST(Eig, CompanionMatrixRoots)
{
    // z^2 - 1.4 z + 0.45 = (z - 0.9)(z - 0.5)
    Matrix m(2, 2);
    m << 1.4, -0.45, 1.0, 0.0;
    const auto e = eig_general(m);
    EXPECT_NEAR(e.eigenvalues(0).real(), 0.9, 1e-12);
    EXPECT_NEAR(e.eigenvalues(1).real(), 0.5, 1e-12);
    EXPECT_NEAR(e.eigenvalues(0).imag(), 0.0, 1e-12);
}

TEST(Eig, RandomResidualsAndConjugateClosure)
{
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        const Matrix m = random_matrix(10, 10, rng);
        const auto e = eig_general(m);
        const CMatrix mc = m.cast<Complex>();
        const double scale = m.norm();
        for (Eigen::Index i = 0; i < 10; ++i) {
            const Complex l = e.eigenvalues(i);
            EXPECT_LE((mc * e.right.col(i) - l * e.right.col(i)).norm(), 1e-8 * scale);
            EXPECT_LE((e.left.col(i).adjoint() * mc - l * e.left.col(i).adjoint()).norm(), 1e-8 * scale);
            EXPECT_NEAR(e.right.col(i).norm(), 1.0, 1e-12);
            double closest = 1e300;
            for (Eigen::Index j = 0; j < 10; ++j) closest = std::min(closest, std::abs(e.eigenvalues(j) - std::conj(l)));
            EXPECT_LT(closest, 1e-10);
        }
        for (Eigen::Index i = 1; i < 10; ++i)
            EXPECT_GE(std::abs(e.eigenvalues(i - 1)) + 1e-12, std::abs(e.eigenvalues(i)));
    }
}

TEST(Eig, LargeMatrixConverges)
{
    std::mt19937_64 rng(5);
    const Matrix m = random_matrix(64, 64, rng);
    EXPECT_NO_THROW(eig_general(m));
}

TEST(Eig, RejectsNonSquare)
{
    EXPECT_THROW(eig_general(Matrix::Ones(2, 3)), InvalidArgument);
}

TEST(Biorthonormalize, SymmetricMatrix)
{
    Matrix m(3, 3);
    m << 2, 1, 0, 1, 3, 1, 0, 1, 4;
    const auto b = biorthonormalize(eig_general(m));
    EXPECT_LT(biorthogonality_error(b), 1e-12);
    // symmetric: left and right coincide
    for (Eigen::Index i = 0; i < 3; ++i)
        EXPECT_NEAR(std::abs(b.left.col(i).dot(b.right.col(i))), 1.0, 1e-12);
    EXPECT_LT((b.right * b.eigenvalues.asDiagonal() * b.left.adjoint() - m.cast<Complex>()).norm(), 1e-12);
}

TEST(Biorthonormalize, NonNormalMatrix)
{
    Matrix m(3, 3);
    m << 1, 5, 0, 0, 0.5, 3, 0, 0, -0.2;
    const auto b = biorthonormalize(eig_general(m));
    EXPECT_LT(biorthogonality_error(b), 1e-10);
    EXPECT_LT((b.right * b.eigenvalues.asDiagonal() * b.left.adjoint() - m.cast<Complex>()).norm(), 1e-10);
}

TEST(Biorthonormalize, JordanBlockIsDegenerate)
{
    Matrix m(2, 2);
    m << 1, 1, 0, 1;
    EXPECT_THROW(biorthonormalize(eig_general(m)), DegenerateEigenvalues);
    EXPECT_THROW(biorthonormalize_by_inverse(eig_general(m)), Error);
}

TEST(Biorthonormalize, RepeatedButDiagonalizableViaInverse)
{
    Matrix m = Matrix::Identity(3, 3);
    m(2, 2) = 0.5;
    const auto b = biorthonormalize_by_inverse(eig_general(m));
    EXPECT_LT(biorthogonality_error(b), 1e-12);
}
