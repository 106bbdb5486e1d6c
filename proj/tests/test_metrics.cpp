#include <lkis/metrics.hpp>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace lkis;
using namespace lkis::metrics;

namespace {

Vector vec(std::initializer_list<double> v)
{
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out(i++) = x;
    return out;
}

Matrix rotation(double th, double rho)
{
    Matrix m(2, 2);
    m << rho * std::cos(th), -rho * std::sin(th), rho * std::sin(th), rho * std::cos(th);
    return m;
}

} // namespace

TEST(Auc, PerfectAndReversed)
{
    const std::vector<int> labels{0, 0, 0, 1, 1};
    EXPECT_DOUBLE_EQ(auc(vec({0.1, 0.2, 0.3, 0.8, 0.9}), labels, 0), 1.0);
    EXPECT_DOUBLE_EQ(auc(vec({0.9, 0.8, 0.7, 0.2, 0.1}), labels, 0), 0.0);
    EXPECT_DOUBLE_EQ(auc(vec({1, 1, 1, 1, 1}), labels, 0), 0.5);
}

TEST(Auc, HandComputedWithTie)
{
    // positives {0.5, 0.9}, negatives {0.1, 0.5, 0.7}: pairs won 1 + 0.5 + 0 + 1 + 1 + 1 = 4.5 of 6
    EXPECT_DOUBLE_EQ(auc(vec({0.1, 0.5, 0.7, 0.5, 0.9}), {0, 0, 0, 1, 1}, 0), 4.5 / 6.0);
}

TEST(Auc, IndependentScoresNearHalf)
{
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Vector s(10000);
    std::vector<int> labels(10000);
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        s(i) = u(rng);
        labels[static_cast<std::size_t>(i)] = u(rng) < 0.3;
    }
    EXPECT_NEAR(auc(s, labels, 0), 0.5, 0.02);
}

TEST(Auc, MonotoneInvariance)
{
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n(0.0, 1.0);
    Vector s(500);
    std::vector<int> labels(500, 0);
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        labels[static_cast<std::size_t>(i)] = i % 37 == 0;
        s(i) = n(rng) + (labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0);
    }
    const double a = auc(s, labels, 2);
    const Vector t = s.unaryExpr([](double v) { return std::exp(3.0 * v) - 7.0; });
    EXPECT_DOUBLE_EQ(auc(t, labels, 2), a);
}

TEST(Auc, ToleranceWindowDilatesEvents)
{
    // event at index 5; with w = 1 the positives are 4, 5, 6
    Vector s = Vector::Zero(10);
    s(4) = s(5) = s(6) = 1.0;
    std::vector<int> labels(10, 0);
    labels[5] = 1;
    EXPECT_DOUBLE_EQ(auc(s, labels, 1), 1.0);
    EXPECT_LT(auc(s, labels, 0), 1.0);
}

TEST(Auc, SkipsNanAndRejectsDegenerateLabels)
{
    const double nan = std::numeric_limits<double>::quiet_NaN();
    EXPECT_DOUBLE_EQ(auc(vec({nan, 0.1, 0.9}), {1, 0, 1}, 0), 1.0);
    EXPECT_THROW(auc(vec({0.1, 0.2}), {0, 0}, 0), InvalidArgument);
    EXPECT_THROW(auc(vec({0.1, 0.2}), {1, 1}, 0), InvalidArgument);
    EXPECT_THROW(auc(vec({0.1}), {1, 0}, 0), InvalidArgument);
}

TEST(EigenMatching, MinimaxAssignment)
{
    CVector est(3);
    est << 0.52, 0.88, 1.0;
    const auto m = match_eigenvalues(est, {0.9, 0.5});
    EXPECT_EQ(m.assignment, (std::vector<std::size_t>{1, 0}));
    EXPECT_NEAR(m.max_error, 0.02, 1e-12);
    EXPECT_THROW(match_eigenvalues(est, {1, 2, 3, 4}), InvalidArgument);
}

TEST(Forecast, PerfectLinearModelHasZeroError)
{
    const auto tr = dynamics::simulate(dynamics::linear_map(rotation(0.2, 0.99)), (Vector(2) << 1, 0).finished(), 200);
    const dmd::HankelObservables id{1, 2};
    const auto res = dmd::fit_model(id, EpisodeList{tr.series()});
    const Vector r = rmse_by_horizon(id, res, tr.series(), 20);
    EXPECT_LT(r.maxCoeff(), 1e-8);
}

TEST(Forecast, HorizonOneMatchesDirectPrediction)
{
    const auto tr = dynamics::simulate(dynamics::lorenz(), (Vector(3) << 1, 1, 1).finished(), 600, 0, 0.0, 500);
    const auto series = tr.series();
    const dmd::HankelObservables h{4, 1};
    const auto res = dmd::fit_model(h, EpisodeList{series});
    const Eigen::Index horizon = 5, k = 4;
    const Vector r = rmse_by_horizon(h, res, series, horizon);
    double sq = 0.0;
    const Eigen::Index starts = forecast_starts(series.length(), k, horizon);
    for (Eigen::Index s = 0; s < starts; ++s) {
        const Matrix hist = series.values.middleRows(s, k);
        const double e = dmd::predict(h, res, hist, 1)(0, 0) - series.values(s + k, 0);
        sq += e * e;
    }
    EXPECT_NEAR(r(0), std::sqrt(sq / static_cast<double>(starts)), 1e-10);
    EXPECT_THROW(rmse_by_horizon(h, res, series, 600), InvalidArgument);
}

TEST(Forecast, PersistenceGrowsWithHorizon)
{
    const auto tr = dynamics::simulate(dynamics::lorenz(), (Vector(3) << 1, 1, 1).finished(), 3000, 0, 0.0, 1000);
    const Vector p = persistence_rmse(tr.series(), 8, 30);
    for (Eigen::Index h = 1; h < 30; ++h) EXPECT_GT(p(h), p(h - 1));
}

TEST(Detection, FlatScoresWithoutEvents)
{
    const auto tr = dynamics::simulate(dynamics::linear_map(rotation(0.3, 0.999)), (Vector(2) << 1, 0).finished(), 300);
    const dmd::HankelObservables id{1, 2};
    const auto res = dmd::fit_model(id, EpisodeList{tr.series()});
    const auto sc = detect_unstable(id, res, tr.series());
    EXPECT_EQ(sc.mode, 1);
    EXPECT_LT(coefficient_of_variation(sc.magnitude), 1.0);
}

TEST(Detection, NeedsTwoModes)
{
    TimeSeries s;
    s.values = (Matrix(4, 1) << 1, 0.5, 0.25, 0.125).finished();
    const dmd::HankelObservables id{1, 1};
    const auto res = dmd::fit_model(id, EpisodeList{s});
    EXPECT_THROW(detect_unstable(id, res, s), InvalidArgument);
}

TEST(Detection, RuleLabelsMarkOnsets)
{
    Vector y(200);
    for (Eigen::Index t = 0; t < 200; ++t) y(t) = (t < 100 ? 1.0 : 0.1) * std::sin(0.7 * static_cast<double>(t));
    const auto l = label_amplitude_collapses(y, 20, 0.5);
    std::vector<std::size_t> on;
    for (std::size_t t = 0; t < l.size(); ++t)
        if (l[t]) on.push_back(t);
    ASSERT_EQ(on.size(), 1u);
    EXPECT_GE(on[0], 81u);
    EXPECT_LE(on[0], 100u);
}

TEST(Basins, LinearModelStructure)
{
    const auto spec = dynamics::duffing();
    const auto eps = dynamics::as_episodes(dynamics::simulate_episodes(spec, 30, 60, -2.0, 2.0, 0));
    const dmd::HankelObservables id{1, 2};
    const auto res = dmd::fit_model(id, eps);
    GridSpec g;
    g.nx = g.ny = 7;
    const auto map = basin_map(id, res, g, spec, 2);
    ASSERT_EQ(map.points.size(), 49u);
    EXPECT_GT(std::abs(map.plus_value - map.minus_value), 1e-3);
    for (const auto& p : map.points) {
        EXPECT_GE(p.boundary_distance, 0.0);
        EXPECT_EQ(p.all.size(), 2);
    }
    // the corner points of the grid
    EXPECT_EQ(map.points.front().x, -2.0);
    EXPECT_EQ(map.points.back().y, 2.0);
    const double a = map.agreement(0.2), s = map.shuffled_agreement(0.2, 0);
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
    EXPECT_GT(s, 0.2);
    EXPECT_LT(s, 0.8);
}
