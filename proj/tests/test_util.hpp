#ifndef LKIS_TEST_UTIL_HPP
#define LKIS_TEST_UTIL_HPP

#include <lkis/common.hpp>

#include <random>

namespace lkis::test {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0)
{
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = n(rng);
    return m;
}

/// max |a - b| / max(1, |b|), elementwise.
inline double rel_err(const Matrix& a, const Matrix& b)
{
    double e = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i)
        e = std::max(e, std::abs(a.data()[i] - b.data()[i]) / std::max(1.0, std::abs(b.data()[i])));
    return e;
}

} // namespace lkis::test

#endif
