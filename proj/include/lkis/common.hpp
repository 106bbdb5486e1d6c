///
/// \file common.hpp
///
/// Shared scalar/matrix aliases and the exception hierarchy used across lkis.
///
#ifndef LKIS_COMMON_HPP
#define LKIS_COMMON_HPP

#include <complex>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace lkis {

using Complex = std::complex<double>;

/// Dense real matrix, column-major, 64-bit.
using Matrix  = Eigen::MatrixXd;
using Vector  = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using CMatrix = Eigen::MatrixXcd;
using CVector = Eigen::VectorXcd;

/// Root of every error thrown by the library.
class Error : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

/// Bad argument shapes or values.
class InvalidArgument : public Error
{
public:
    using Error::Error;
};

/// An iterative numerical routine failed to converge.
class ConvergenceError : public Error
{
public:
    ConvergenceError(const std::string& what, int iterations)
        : Error(what + " (after " + std::to_string(iterations) + " iterations)"),
          iterations_(iterations)
    {
    }

    int iterations() const noexcept { return iterations_; }

private:
    int iterations_;
};

/// Two eigenvalues are too close to be biorthonormalized independently.
class DegenerateEigenvalues : public Error
{
public:
    DegenerateEigenvalues(std::size_t i, std::size_t j, double gap)
        : Error("degenerate eigenvalues at indices " + std::to_string(i) + " and " +
                std::to_string(j) + " (gap " + std::to_string(gap) + ")"),
          first(i), second(j)
    {
    }

    std::size_t first;
    std::size_t second;
};

/// Parse failures in CSV/JSON/config inputs.
class ParseError : public Error
{
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : Error(line ? what + " (line " + std::to_string(line) + ")" : what), line_(line)
    {
    }

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

inline void require(bool cond, const std::string& msg)
{
    if (!cond) throw InvalidArgument(msg);
}

inline std::string shape_str(Eigen::Index r, Eigen::Index c)
{
    return std::to_string(r) + "x" + std::to_string(c);
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m)
{
    return m.allFinite();
}

} // namespace lkis

#endif // LKIS_COMMON_HPP
