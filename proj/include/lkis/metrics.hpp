///
/// \file metrics.hpp
///
/// Evaluation on top of a fitted observable model + DMD result: multi-step
/// forecast errors, unstable-mode scores, ROC area, basin maps and
/// eigenvalue matching.
///
#ifndef LKIS_METRICS_HPP
#define LKIS_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "dmd.hpp"
#include "dynamics.hpp"

namespace lkis::metrics {

// ---------------------------------------------------------------------------
// Eigenvalue matching
// ---------------------------------------------------------------------------

struct EigenMatch
{
    std::vector<std::size_t> assignment;  ///< estimate index for each truth value
    std::vector<double> errors;           ///< |estimate - truth| per truth value
    double max_error = 0.0;
};

///
/// Assign each true eigenvalue to a distinct estimate so the largest
/// distance is minimal (ties broken by the total). Exhaustive search; meant
/// for the handful of eigenvalues the benchmarks check.
///
inline EigenMatch match_eigenvalues(const CVector& estimates, const std::vector<Complex>& truth)
{
    require(!truth.empty(), "match_eigenvalues: no reference values");
    require(static_cast<std::size_t>(estimates.size()) >= truth.size(),
            "match_eigenvalues: fewer estimates than reference values");
    require(truth.size() <= 8, "match_eigenvalues: at most 8 reference values");
    EigenMatch best;
    best.max_error = std::numeric_limits<double>::infinity();
    double best_sum = best.max_error;
    std::vector<std::size_t> cur(truth.size());
    std::vector<bool> used(static_cast<std::size_t>(estimates.size()), false);

    auto rec = [&](auto&& self, std::size_t i, double mx, double sum) -> void {
        if (mx > best.max_error) return;
        if (i == truth.size()) {
            if (mx < best.max_error || sum < best_sum) {
                best.max_error = mx;
                best_sum = sum;
                best.assignment = cur;
            }
            return;
        }
        for (std::size_t j = 0; j < used.size(); ++j) {
            if (used[j]) continue;
            const double e = std::abs(estimates(static_cast<Eigen::Index>(j)) - truth[i]);
            used[j] = true;
            cur[i] = j;
            self(self, i + 1, std::max(mx, e), sum + e);
            used[j] = false;
        }
    };
    rec(rec, 0, 0.0, 0.0);
    for (std::size_t i = 0; i < truth.size(); ++i)
        best.errors.push_back(std::abs(estimates(static_cast<Eigen::Index>(best.assignment[i])) - truth[i]));
    return best;
}

// ---------------------------------------------------------------------------
// Forecast errors
// ---------------------------------------------------------------------------

/// Number of start positions with a full horizon inside the series.
inline Eigen::Index forecast_starts(Eigen::Index length, Eigen::Index k, Eigen::Index horizon)
{
    return length - k - horizon + 1;
}

///
/// RMSE at horizons 1..max_horizon over every start whose whole horizon lies
/// inside the series, pooled over measured components.
///
template <dmd::ObservableModel M>
Vector rmse_by_horizon(const M& model, const dmd::DmdResult& res, const TimeSeries& test, Eigen::Index max_horizon)
{
    require(max_horizon >= 1, "rmse_by_horizon: max_horizon must be >= 1");
    require(test.dim() == model.r(), "rmse_by_horizon: measurement dimension mismatch");
    const Eigen::Index k = model.k();
    require(test.length() > max_horizon + k, "rmse_by_horizon: series of length " + std::to_string(test.length()) +
                                                  " too short; need more than " + std::to_string(max_horizon + k));
    const Eigen::Index starts = forecast_starts(test.length(), k, max_horizon);
    const Matrix windows = delay_windows(test.values, k).topRows(starts);
    const auto steps = dmd::predict_windows(model, res, windows, max_horizon);
    Vector out(max_horizon);
    for (Eigen::Index h = 1; h <= max_horizon; ++h) {
        const Matrix truth = test.values.middleRows(k - 1 + h, starts);
        out(h - 1) = std::sqrt((steps[static_cast<std::size_t>(h - 1)] - truth).squaredNorm() /
                               static_cast<double>(truth.size()));
    }
    return out;
}

/// Same starts as rmse_by_horizon with a window of k, forecasting y_{t+h} = y_t.
inline Vector persistence_rmse(const TimeSeries& test, Eigen::Index k, Eigen::Index max_horizon)
{
    require(max_horizon >= 1 && k >= 1, "persistence_rmse: bad arguments");
    require(test.length() > max_horizon + k, "persistence_rmse: series too short");
    const Eigen::Index starts = forecast_starts(test.length(), k, max_horizon);
    const Matrix now = test.values.middleRows(k - 1, starts);
    Vector out(max_horizon);
    for (Eigen::Index h = 1; h <= max_horizon; ++h) {
        const Matrix truth = test.values.middleRows(k - 1 + h, starts);
        out(h - 1) = std::sqrt((now - truth).squaredNorm() / static_cast<double>(truth.size()));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Unstable-mode detection
// ---------------------------------------------------------------------------

struct DetectionScores
{
    Vector magnitude;   ///< |phi(x_t)|, NaN for t < k-1
    Vector real_part;   ///< Re phi(x_t), NaN for t < k-1
    Eigen::Index first_valid = 0;
    Eigen::Index mode = 0;
    Complex eigenvalue{};
};

///
/// Values of the eigenfunction belonging to the smallest-magnitude discrete
/// eigenvalue, aligned with the series.
///
template <dmd::ObservableModel M>
DetectionScores detect_unstable(const M& model, const dmd::DmdResult& res, const TimeSeries& series)
{
    require(res.size() >= 2, "detect_unstable: need at least 2 modes");
    require(res.size() == model.n(), "detect_unstable: DMD result does not match the model");
    require(series.dim() == model.r(), "detect_unstable: measurement dimension mismatch");
    DetectionScores out;
    out.mode = res.size() - 1;  // eigenvalues are sorted by descending magnitude
    out.eigenvalue = res.eigenvalues()(out.mode);
    out.first_valid = model.k() - 1;
    const Matrix g = model.observe(delay_windows(series.values, model.k())).transpose();
    const CMatrix phi = dmd::eigenfunction_values(res, g);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    out.magnitude = Vector::Constant(series.length(), nan);
    out.real_part = Vector::Constant(series.length(), nan);
    for (Eigen::Index j = 0; j < phi.cols(); ++j) {
        out.magnitude(out.first_valid + j) = std::abs(phi(out.mode, j));
        out.real_part(out.first_valid + j) = phi(out.mode, j).real();
    }
    return out;
}

///
/// ROC area by the rank statistic. A time step is positive when a labeled
/// event lies within `tolerance_window` steps of it. NaN scores are skipped.
///
inline double auc(const Vector& scores, const std::vector<int>& labels, Eigen::Index tolerance_window = 5)
{
    require(static_cast<std::size_t>(scores.size()) == labels.size(), "auc: scores and labels differ in length");
    require(tolerance_window >= 0, "auc: tolerance_window must be >= 0");
    const auto n = static_cast<Eigen::Index>(labels.size());
    std::vector<int> pos(labels.size(), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!labels[static_cast<std::size_t>(i)]) continue;
        for (Eigen::Index j = std::max<Eigen::Index>(0, i - tolerance_window); j <= std::min(n - 1, i + tolerance_window); ++j)
            pos[static_cast<std::size_t>(j)] = 1;
    }
    std::vector<std::pair<double, int>> v;
    for (Eigen::Index i = 0; i < n; ++i)
        if (!std::isnan(scores(i))) v.emplace_back(scores(i), pos[static_cast<std::size_t>(i)]);
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    double rank_sum = 0.0, npos = 0.0;
    for (std::size_t i = 0; i < v.size();) {
        std::size_t j = i;
        while (j < v.size() && v[j].first == v[i].first) ++j;
        const double avg = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
        for (std::size_t t = i; t < j; ++t)
            if (v[t].second) {
                rank_sum += avg;
                npos += 1.0;
            }
        i = j;
    }
    const double nneg = static_cast<double>(v.size()) - npos;
    if (npos == 0.0 || nneg == 0.0) throw InvalidArgument("auc: labels must contain both classes");
    return (rank_sum - npos * (npos + 1.0) / 2.0) / (npos * nneg);
}

///
/// Sudden amplitude decays: t is an event onset when the peak-to-peak range
/// of y[t, t+W) is below (1 - drop) times that of y[t-W, t), and t-1 was not.
///
inline std::vector<int> label_amplitude_collapses(const Vector& y, Eigen::Index window = 50, double drop = 0.5)
{
    require(window >= 1, "label_amplitude_collapses: window must be >= 1");
    require(drop > 0.0 && drop < 1.0, "label_amplitude_collapses: drop must be in (0, 1)");
    const Eigen::Index n = y.size();
    std::vector<int> out(static_cast<std::size_t>(n), 0);
    bool prev = false;
    for (Eigen::Index t = window; t + window <= n; ++t) {
        const auto before = y.segment(t - window, window), after = y.segment(t, window);
        const double a0 = before.maxCoeff() - before.minCoeff();
        const double a1 = after.maxCoeff() - after.minCoeff();
        const bool hit = a0 > 0.0 && a1 < (1.0 - drop) * a0;
        if (hit && !prev) out[static_cast<std::size_t>(t)] = 1;
        prev = hit;
    }
    return out;
}

/// Coefficient of variation of the finite entries.
inline double coefficient_of_variation(const Vector& v)
{
    double s = 0.0, s2 = 0.0, n = 0.0;
    for (double x : v)
        if (std::isfinite(x)) {
            s += x;
            s2 += x * x;
            n += 1.0;
        }
    require(n >= 2.0, "coefficient_of_variation: need at least 2 values");
    const double mean = s / n;
    const double var = std::max(0.0, s2 / n - mean * mean);
    return std::sqrt(var) / std::abs(mean);
}

// ---------------------------------------------------------------------------
// Basins
// ---------------------------------------------------------------------------

struct GridSpec
{
    double lo = -2.0;
    double hi = 2.0;
    Eigen::Index nx = 21;
    Eigen::Index ny = 21;

    double x(Eigen::Index i) const { return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(nx - 1); }
    double y(Eigen::Index j) const { return lo + (hi - lo) * static_cast<double>(j) / static_cast<double>(ny - 1); }
};

struct BasinPoint
{
    double x = 0.0, y = 0.0;
    dynamics::BasinLabel truth = dynamics::BasinLabel::Undecided;
    dynamics::BasinLabel predicted = dynamics::BasinLabel::Undecided;
    Complex value{};                 ///< selected eigenfunction
    CVector all;                     ///< every eigenfunction
    double boundary_distance = 0.0;  ///< to the brute-force boundary
};

struct BasinMap
{
    GridSpec grid;
    std::vector<BasinPoint> points;  ///< row-major over (x, y)
    Eigen::Index mode = 0;
    Complex eigenvalue_c{};
    Complex plus_value{}, minus_value{};

    /// Fraction of decided points at least `margin` from the boundary where
    /// the prediction equals the truth.
    double agreement(double margin) const
    {
        double hit = 0.0, n = 0.0;
        for (const auto& p : points) {
            if (p.truth == dynamics::BasinLabel::Undecided || p.boundary_distance < margin) continue;
            n += 1.0;
            if (p.predicted == p.truth) hit += 1.0;
        }
        require(n > 0.0, "BasinMap::agreement: no points beyond the margin");
        return hit / n;
    }

    /// Same, with the predictions compared to a seeded permutation of the truth.
    double shuffled_agreement(double margin, std::uint64_t seed) const
    {
        std::vector<dynamics::BasinLabel> labels;
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < points.size(); ++i) {
            const auto& p = points[i];
            if (p.truth == dynamics::BasinLabel::Undecided || p.boundary_distance < margin) continue;
            labels.push_back(p.truth);
            idx.push_back(i);
        }
        require(!idx.empty(), "BasinMap::shuffled_agreement: no points beyond the margin");
        std::mt19937_64 rng(seed);
        std::shuffle(labels.begin(), labels.end(), rng);
        double hit = 0.0;
        for (std::size_t i = 0; i < idx.size(); ++i)
            if (points[idx[i]].predicted == labels[i]) hit += 1.0;
        return hit / static_cast<double>(idx.size());
    }
};

namespace detail {

/// Chronological k-step history starting at x0, newest-first window.
inline Vector warm_window(const dynamics::SystemSpec& spec, const Vector& x0, Eigen::Index k)
{
    const auto tr = dynamics::simulate(spec, x0, k);
    return window_from_history(tr.observed);
}

} // namespace detail

///
/// Evaluate eigenfunctions over a grid of initial states (each point is
/// integrated forward k-1 steps to fill its delay window) and classify each
/// point by the nearer of the two attractor values.
///
/// Candidates are the `candidates` eigenfunctions with the smallest
/// |continuous eigenvalue|; the one that best separates the two attractors
/// relative to its spread over the grid is used.
///
template <dmd::ObservableModel M>
BasinMap basin_map(const M& model, const dmd::DmdResult& res, const GridSpec& grid,
                   const dynamics::SystemSpec& spec = dynamics::duffing(), Eigen::Index candidates = 3)
{
    require(spec.kind == dynamics::SystemKind::Duffing, "basin_map: needs a Duffing system");
    require(grid.nx >= 2 && grid.ny >= 2 && grid.hi > grid.lo, "basin_map: bad grid");
    require(candidates >= 1, "basin_map: candidates must be >= 1");
    const Eigen::Index k = model.k();
    const Eigen::Index npts = grid.nx * grid.ny;

    BasinMap out;
    out.grid = grid;
    out.points.resize(static_cast<std::size_t>(npts));
    Matrix windows(npts + 2, k * model.r());
    for (Eigen::Index i = 0; i < grid.nx; ++i)
        for (Eigen::Index j = 0; j < grid.ny; ++j) {
            auto& p = out.points[static_cast<std::size_t>(i * grid.ny + j)];
            p.x = grid.x(i);
            p.y = grid.y(j);
            const Vector x0 = (Vector(2) << p.x, p.y).finished();
            p.truth = dynamics::duffing_basin_label(x0, spec);
            windows.row(i * grid.ny + j) = detail::warm_window(spec, x0, k).transpose();
        }
    windows.row(npts) = detail::warm_window(spec, (Vector(2) << 1.0, 0.0).finished(), k).transpose();
    windows.row(npts + 1) = detail::warm_window(spec, (Vector(2) << -1.0, 0.0).finished(), k).transpose();
    const CMatrix phi = dmd::eigenfunction_values(res, model.observe(windows).transpose());

    const CVector lc = dmd::to_continuous(res);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(lc.size()));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return std::abs(lc(a)) < std::abs(lc(b)); });

    double best = -1.0;
    for (Eigen::Index c = 0; c < std::min<Eigen::Index>(candidates, lc.size()); ++c) {
        const Eigen::Index m = order[static_cast<std::size_t>(c)];
        const Complex mean = phi.row(m).head(npts).mean();
        const double spread = std::sqrt((phi.row(m).head(npts).array() - mean).abs2().mean());
        const double sep = std::abs(phi(m, npts) - phi(m, npts + 1)) / std::max(spread, 1e-300);
        if (sep > best) {
            best = sep;
            out.mode = m;
        }
    }
    out.eigenvalue_c = lc(out.mode);
    out.plus_value = phi(out.mode, npts);
    out.minus_value = phi(out.mode, npts + 1);

    for (Eigen::Index i = 0; i < npts; ++i) {
        auto& p = out.points[static_cast<std::size_t>(i)];
        p.all = phi.col(i);
        p.value = phi(out.mode, i);
        p.predicted = std::abs(p.value - out.plus_value) <= std::abs(p.value - out.minus_value)
                          ? dynamics::BasinLabel::PlusOne
                          : dynamics::BasinLabel::MinusOne;
    }

    // Boundary: midpoints between grid neighbours with different decided labels.
    std::vector<std::pair<double, double>> edge;
    auto at = [&](Eigen::Index i, Eigen::Index j) -> const BasinPoint& {
        return out.points[static_cast<std::size_t>(i * grid.ny + j)];
    };
    for (Eigen::Index i = 0; i < grid.nx; ++i)
        for (Eigen::Index j = 0; j < grid.ny; ++j) {
            const auto& a = at(i, j);
            if (i + 1 < grid.nx && at(i + 1, j).truth != a.truth)
                edge.emplace_back(0.5 * (a.x + at(i + 1, j).x), a.y);
            if (j + 1 < grid.ny && at(i, j + 1).truth != a.truth)
                edge.emplace_back(a.x, 0.5 * (a.y + at(i, j + 1).y));
        }
    for (auto& p : out.points) {
        double d = std::numeric_limits<double>::infinity();
        for (const auto& [ex, ey] : edge) d = std::min(d, std::hypot(p.x - ex, p.y - ey));
        p.boundary_distance = d;
    }
    return out;
}

} // namespace lkis::metrics

#endif // LKIS_METRICS_HPP
