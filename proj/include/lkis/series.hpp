///
/// \file series.hpp
///
/// Uniformly sampled multivariate time series and delay windows.
///
#ifndef LKIS_SERIES_HPP
#define LKIS_SERIES_HPP

#include <vector>

#include "common.hpp"

namespace lkis {

/// One sample per row, one measured component per column.
struct TimeSeries
{
    Matrix values;
    double delta_t = 1.0;

    Eigen::Index length() const { return values.rows(); }
    Eigen::Index dim() const { return values.cols(); }
};

/// Independent runs of the same system; pairs never cross episode boundaries.
using EpisodeList = std::vector<TimeSeries>;

///
/// Delay windows of `k` samples, newest first: row j holds
/// [y_{t}, y_{t-1}, ..., y_{t-k+1}] for t = k-1+j.
///
inline Matrix delay_windows(const Matrix& values, Eigen::Index k)
{
    require(k >= 1, "delay_windows: k must be >= 1");
    const Eigen::Index len = values.rows(), r = values.cols();
    require(len >= k, "delay_windows: series of length " + std::to_string(len) +
                          " is shorter than the window " + std::to_string(k));
    Matrix w(len - k + 1, k * r);
    for (Eigen::Index t = k - 1; t < len; ++t) {
        for (Eigen::Index lag = 0; lag < k; ++lag) {
            w.block(t - k + 1, lag * r, 1, r) = values.row(t - lag);
        }
    }
    return w;
}

/// Window ending at the last row of a chronological k x r history.
inline Vector window_from_history(const Matrix& history)
{
    const Eigen::Index k = history.rows(), r = history.cols();
    Vector w(k * r);
    for (Eigen::Index lag = 0; lag < k; ++lag) w.segment(lag * r, r) = history.row(k - 1 - lag).transpose();
    return w;
}

} // namespace lkis

#endif // LKIS_SERIES_HPP
