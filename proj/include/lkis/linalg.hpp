///
/// \file linalg.hpp
///
/// Dense linear algebra used by DMD and the RSS loss: SVD with a fixed sign
/// convention, Moore-Penrose pseudoinverse, general real eigendecomposition
/// with left and right eigenvectors, and biorthonormalization of the pair.
///
/// Every routine is a pure function of its inputs.
///
#ifndef LKIS_LINALG_HPP
#define LKIS_LINALG_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "common.hpp"

namespace lkis::linalg {

/// Thin SVD, M = U * diag(S) * V^T.
struct SvdFactors
{
    Matrix U;
    Vector S;  ///< non-increasing, non-negative
    Matrix V;
};

/// Eigenvalues with right (columns w_i) and left (columns z_i) eigenvectors,
/// such that M w_i = lambda_i w_i and z_i^H M = lambda_i z_i^H.
struct ComplexEigenSystem
{
    CVector eigenvalues;
    CMatrix right;
    CMatrix left;

    Eigen::Index size() const { return eigenvalues.size(); }
};

inline double machine_epsilon() { return std::numeric_limits<double>::epsilon(); }

///
/// Thin SVD. The sign of each singular pair is fixed so that the
/// largest-magnitude entry of each U column is non-negative (first index wins
/// ties).
///
inline SvdFactors svd(const Matrix& m)
{
    require(m.rows() >= 1 && m.cols() >= 1, "svd: empty matrix");
    require(m.allFinite(), "svd: matrix has non-finite entries");

    Eigen::JacobiSVD<Matrix, Eigen::ColPivHouseholderQRPreconditioner> solver(
        m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (solver.info() != Eigen::Success) {
        throw ConvergenceError("svd: Jacobi sweeps did not converge",
                               static_cast<int>(2 * std::max(m.rows(), m.cols())));
    }

    SvdFactors f{solver.matrixU(), solver.singularValues(), solver.matrixV()};
    if (!f.U.allFinite() || !f.S.allFinite() || !f.V.allFinite()) {
        throw ConvergenceError("svd: non-finite factors",
                               static_cast<int>(2 * std::max(m.rows(), m.cols())));
    }
    for (Eigen::Index j = 0; j < f.U.cols(); ++j) {
        Eigen::Index imax = 0;
        double best = -1.0;
        for (Eigen::Index i = 0; i < f.U.rows(); ++i) {
            const double a = std::abs(f.U(i, j));
            if (a > best) {
                best = a;
                imax = i;
            }
        }
        if (f.U(imax, j) < 0.0) {
            f.U.col(j) *= -1.0;
            f.V.col(j) *= -1.0;
        }
    }
    return f;
}

/// Default relative rank tolerance, max(rows, cols) * eps.
inline double default_rank_tol(Eigen::Index rows, Eigen::Index cols)
{
    return static_cast<double>(std::max(rows, cols)) * machine_epsilon();
}

/// Number of singular values strictly above rel_tol * S_max.
inline Eigen::Index numerical_rank(const Vector& s, double rel_tol)
{
    if (s.size() == 0) return 0;
    const double cut = rel_tol * s(0);
    Eigen::Index r = 0;
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        if (s(i) > cut) ++r;
    }
    return r;
}

/// Pseudoinverse V * diag(S+) * U^T from precomputed factors.
inline Matrix pinv_from_svd(const SvdFactors& f, double rel_tol)
{
    require(rel_tol >= 0.0, "pinv: rank tolerance must be non-negative");
    const Eigen::Index r = numerical_rank(f.S, rel_tol);
    if (r == 0) return Matrix::Zero(f.V.rows(), f.U.rows());
    Vector inv = f.S.head(r).cwiseInverse();
    return f.V.leftCols(r) * inv.asDiagonal() * f.U.leftCols(r).transpose();
}

///
/// Moore-Penrose pseudoinverse. Singular values <= rel_tol * S_max are
/// treated as zero; the default tolerance is max(rows, cols) * eps. An
/// all-zero input yields the zero matrix of transposed shape.
///
inline Matrix pinv(const Matrix& m, std::optional<double> rel_tol = std::nullopt)
{
    const double tol = rel_tol.value_or(default_rank_tol(m.rows(), m.cols()));
    require(tol >= 0.0, "pinv: rank tolerance must be non-negative");
    if (m.isZero(0.0)) return Matrix::Zero(m.cols(), m.rows());
    return pinv_from_svd(svd(m), tol);
}

namespace detail {

/// Scale to unit norm and rotate so the largest-modulus entry is real positive.
inline void normalize_phase(Eigen::Ref<CVector> v)
{
    const double nrm = v.norm();
    if (nrm == 0.0) return;
    v /= nrm;
    Eigen::Index imax = 0;
    double best = -1.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        // ties resolved towards the first index, with slack for roundoff
        const double a = std::abs(v(i));
        if (a > best * (1.0 + 1e-12)) {
            best = a;
            imax = i;
        }
    }
    const Complex phase = v(imax) / std::abs(v(imax));
    v *= std::conj(phase);
}

/// Ordering: descending magnitude, then descending real part, then
/// descending imaginary part. Differences below tol count as ties.
inline bool eig_before(const Complex& a, const Complex& b, double tol)
{
    const double ma = std::abs(a), mb = std::abs(b);
    if (std::abs(ma - mb) > tol) return ma > mb;
    if (std::abs(a.real() - b.real()) > tol) return a.real() > b.real();
    return a.imag() > b.imag();
}

} // namespace detail

/// Indices that sort eigenvalues into the library's canonical order.
inline std::vector<Eigen::Index> eigen_order(const CVector& lambda)
{
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(lambda.size()));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    const double scale = lambda.size() ? std::max(1.0, lambda.cwiseAbs().maxCoeff()) : 1.0;
    const double tol = 1e-12 * scale;
    std::stable_sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) {
        return detail::eig_before(lambda(a), lambda(b), tol);
    });
    return idx;
}

///
/// Left eigenvector for eigenvalue lambda: the null vector of (M - lambda I)^H,
/// taken as the right singular vector of the smallest singular value.
///
inline CVector left_eigenvector(const Matrix& m, Complex lambda)
{
    const Eigen::Index n = m.rows();
    CMatrix shifted = m.cast<Complex>();
    shifted.diagonal().array() -= lambda;
    CMatrix adj = shifted.adjoint();
    Eigen::JacobiSVD<CMatrix> solver(adj, Eigen::ComputeFullV);
    CVector z = solver.matrixV().col(n - 1);
    detail::normalize_phase(z);
    return z;
}

///
/// Eigendecomposition of a general real square matrix via Hessenberg
/// reduction and shifted QR. Right and left vectors are unit-norm with the
/// largest-modulus entry real positive; eigenvalues are sorted by descending
/// magnitude, then real part, then imaginary part.
///
inline constexpr Eigen::Index kQrIterationsPerRow = 40;

inline ComplexEigenSystem eig_general(const Matrix& m)
{
    require(m.rows() == m.cols(), "eig_general: matrix must be square, got " +
                                      shape_str(m.rows(), m.cols()));
    require(m.rows() >= 1, "eig_general: empty matrix");
    require(m.allFinite(), "eig_general: matrix has non-finite entries");

    const Eigen::Index n = m.rows();
    // Eigen's cap is a total over the whole reduction, not per row.
    const Eigen::Index cap = kQrIterationsPerRow * n;
    Eigen::EigenSolver<Matrix> solver;
    solver.setMaxIterations(cap);
    solver.compute(m, true);
    if (solver.info() != Eigen::Success)
        throw ConvergenceError("eig_general: shifted QR did not converge", static_cast<int>(cap));

    const CVector lam = solver.eigenvalues();
    const CMatrix vecs = solver.eigenvectors();
    const auto order = eigen_order(lam);

    ComplexEigenSystem sys;
    sys.eigenvalues.resize(n);
    sys.right.resize(n, n);
    sys.left.resize(n, n);
    for (Eigen::Index k = 0; k < n; ++k) {
        const Eigen::Index src = order[static_cast<std::size_t>(k)];
        sys.eigenvalues(k) = lam(src);
        CVector w = vecs.col(src);
        detail::normalize_phase(w);
        sys.right.col(k) = w;
        sys.left.col(k) = left_eigenvector(m, lam(src));
    }
    return sys;
}

/// Smallest pairwise eigenvalue gap and the pair attaining it.
struct EigenGap
{
    double gap = std::numeric_limits<double>::infinity();
    std::size_t i = 0, j = 0;
};

inline EigenGap min_eigen_gap(const CVector& lambda)
{
    EigenGap g;
    for (Eigen::Index a = 0; a < lambda.size(); ++a) {
        for (Eigen::Index b = a + 1; b < lambda.size(); ++b) {
            const double d = std::abs(lambda(a) - lambda(b));
            if (d < g.gap) g = {d, static_cast<std::size_t>(a), static_cast<std::size_t>(b)};
        }
    }
    return g;
}

inline constexpr double kDegeneracyGap = 1e-10;

///
/// Rescale so that z_j^H w_i = delta_ij. Right vectors are brought to unit
/// norm; left vectors absorb the scaling. Throws DegenerateEigenvalues when
/// two eigenvalues are closer than 1e-10.
///
inline ComplexEigenSystem biorthonormalize(const ComplexEigenSystem& sys)
{
    require(sys.right.cols() == sys.size() && sys.left.cols() == sys.size(),
            "biorthonormalize: vector count does not match eigenvalue count");
    const EigenGap g = min_eigen_gap(sys.eigenvalues);
    if (g.gap < kDegeneracyGap) throw DegenerateEigenvalues(g.i, g.j, g.gap);

    ComplexEigenSystem out = sys;
    for (Eigen::Index i = 0; i < out.size(); ++i) {
        const double nw = out.right.col(i).norm();
        require(nw > 0.0, "biorthonormalize: zero right eigenvector");
        out.right.col(i) /= nw;
        const Complex d = out.left.col(i).dot(out.right.col(i));  // z^H w
        if (std::abs(d) < 1e-14 * out.left.col(i).norm()) {
            throw DegenerateEigenvalues(static_cast<std::size_t>(i), static_cast<std::size_t>(i), 0.0);
        }
        out.left.col(i) /= std::conj(d);
    }
    return out;
}

///
/// Biorthonormal left vectors from the inverse of the right-vector matrix,
/// Z = W^{-H}. Valid for any diagonalizable matrix, including repeated
/// eigenvalues; fails if W is numerically singular (cond > max_cond).
///
inline ComplexEigenSystem biorthonormalize_by_inverse(const ComplexEigenSystem& sys,
                                                      double max_cond = 1e12)
{
    ComplexEigenSystem out = sys;
    for (Eigen::Index i = 0; i < out.size(); ++i) out.right.col(i).normalize();
    Eigen::JacobiSVD<CMatrix> s(out.right);
    const auto& sv = s.singularValues();
    const double smin = sv(sv.size() - 1);
    if (!(smin > 0.0) || sv(0) / smin > max_cond) {
        throw Error("biorthonormalize: eigenvector matrix is numerically singular (defective matrix)");
    }
    out.left = out.right.inverse().adjoint();
    return out;
}

/// Frobenius norm of Z^H W - I.
inline double biorthogonality_error(const ComplexEigenSystem& sys)
{
    const CMatrix gram = sys.left.adjoint() * sys.right;
    return (gram - CMatrix::Identity(gram.rows(), gram.cols())).norm();
}

} // namespace lkis::linalg

#endif // LKIS_LINALG_HPP
