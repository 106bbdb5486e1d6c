#include <lkis/dmd.hpp>
#include <lkis/dynamics.hpp>

#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"

using namespace lkis;
using namespace lkis::dmd;
using lkis::test::random_matrix;

namespace {

double nearest(const CVector& v, Complex target)
{
    double best = 1e300;
    for (Eigen::Index i = 0; i < v.size(); ++i) best = std::min(best, std::abs(v(i) - target));
    return best;
}

TimeSeries fixed_point_states(Eigen::Index steps, Vector x0 = (Vector(2) << 0.8, -0.6).finished())
{
    return dynamics::simulate(dynamics::fixed_point_map(), x0, steps).series();
}

EpisodeList fixed_point_episodes(std::size_t count, Eigen::Index steps, std::uint64_t seed, double noise = 0.0)
{
    const Vector w = (Vector(2) << 1.0, 1.0).finished();
    return dynamics::as_episodes(dynamics::simulate_episodes(dynamics::fixed_point_map(), count, steps, -w, w, seed, noise, 0));
}

// Stable random map with spectral radius 0.9.
Matrix stable_map(Eigen::Index d, std::mt19937_64& rng)
{
    Matrix m = random_matrix(d, d, rng);
    const double rho = linalg::eig_general(m).eigenvalues.cwiseAbs().maxCoeff();
    return 0.9 * m / rho;
}

} // namespace

TEST(DataMatrices, ShiftByOne)
{
    const Matrix s = (Matrix(1, 3) << 1, 2, 3).finished();
    const auto dm = build_data_matrices(s);
    EXPECT_EQ(dm.y0, (Matrix(1, 2) << 1, 2).finished());
    EXPECT_EQ(dm.y1, (Matrix(1, 2) << 2, 3).finished());
    EXPECT_THROW(build_data_matrices(Matrix::Ones(2, 1)), InvalidArgument);
}

TEST(DataMatrices, EpisodesConcatenateIndependently)
{
    std::mt19937_64 rng(1);
    const Matrix a = random_matrix(2, 4, rng), b = random_matrix(2, 3, rng);
    const auto dm = build_data_matrices(std::vector<Matrix>{a, b});
    const auto da = build_data_matrices(a), db = build_data_matrices(b);
    ASSERT_EQ(dm.y0.cols(), 5);
    EXPECT_EQ(dm.y0.leftCols(3), da.y0);
    EXPECT_EQ(dm.y0.rightCols(2), db.y0);
    EXPECT_EQ(dm.y1.leftCols(3), da.y1);
    EXPECT_EQ(dm.y1.rightCols(2), db.y1);
}

TEST(DmdFit, DiagonalDynamics)
{
    std::mt19937_64 rng(2);
    const Matrix y0 = random_matrix(2, 6, rng);
    const Matrix d = (Matrix(2, 2) << 0.9, 0, 0, 0.5).finished();
    const auto res = dmd_fit({y0, d * y0, "test"});
    EXPECT_NEAR(std::abs(res.eigenvalues()(0) - 0.9), 0.0, 1e-12);
    EXPECT_NEAR(std::abs(res.eigenvalues()(1) - 0.5), 0.0, 1e-12);
}

TEST(DmdFit, PlainDmdRecoversLinearMaps)
{
    std::mt19937_64 rng(3);
    for (Eigen::Index d = 2; d <= 5; ++d) {
        const Matrix m = stable_map(d, rng);
        const auto tr = dynamics::simulate(dynamics::linear_map(m), random_matrix(d, 1, rng).col(0), 40);
        const auto res = dmd_fit(build_data_matrices(Matrix(tr.states.transpose())));
        const auto truth = linalg::eig_general(m).eigenvalues;
        for (Eigen::Index i = 0; i < d; ++i) EXPECT_LT(nearest(res.eigenvalues(), truth(i)), 1e-8) << "dim " << d;
        EXPECT_LT(linalg::biorthogonality_error(res.eigen), 1e-8);
        // sum_i w_i z_i^H = I
        EXPECT_LT((res.eigen.right * res.eigen.left.adjoint() - CMatrix::Identity(d, d)).norm(), 1e-8);
        EXPECT_LT((modal_operator(res) - res.a.cast<Complex>()).norm(), 1e-8);
    }
}

TEST(DmdFit, ModalReconstructionOfSnapshots)
{
    std::mt19937_64 rng(4);
    const Matrix m = stable_map(3, rng);
    const auto tr = dynamics::simulate(dynamics::linear_map(m), (Vector(3) << 1, -1, 0.5).finished(), 20);
    const Matrix snaps = tr.states.transpose();
    const auto res = dmd_fit(build_data_matrices(snaps));
    const CMatrix phi0 = eigenfunction_values(res, snaps.leftCols(1));
    for (Eigen::Index t = 0; t < snaps.cols(); ++t) {
        CVector x = CVector::Zero(3);
        for (Eigen::Index i = 0; i < 3; ++i)
            x += std::pow(res.eigenvalues()(i), static_cast<double>(t)) * phi0(i, 0) * res.eigen.right.col(i);
        EXPECT_LT((x - snaps.col(t).cast<Complex>()).norm(), 1e-6) << "t=" << t;
    }
}

TEST(DmdFit, EigenfunctionRecurrence)
{
    std::mt19937_64 rng(5);
    const Matrix m = stable_map(3, rng);
    const auto tr = dynamics::simulate(dynamics::linear_map(m), (Vector(3) << 0.3, 1, -2).finished(), 30);
    const Matrix snaps = tr.states.transpose();
    const auto res = dmd_fit(build_data_matrices(snaps));
    const CMatrix phi = eigenfunction_values(res, snaps);
    for (Eigen::Index t = 0; t + 1 < snaps.cols(); ++t)
        for (Eigen::Index i = 0; i < 3; ++i) EXPECT_LT(std::abs(phi(i, t + 1) - res.eigenvalues()(i) * phi(i, t)), 1e-6);
    EXPECT_THROW(eigenfunction_values(res, Matrix::Ones(2, 3)), InvalidArgument);
}

TEST(DmdFit, DiagonalSystemEigenfunctionsAreCoordinates)
{
    const Matrix d = (Matrix(2, 2) << 0.9, 0, 0, 0.5).finished();
    const auto tr = dynamics::simulate(dynamics::linear_map(d), (Vector(2) << 1, 2).finished(), 10);
    const Matrix snaps = tr.states.transpose();
    const auto res = dmd_fit(build_data_matrices(snaps));
    const CMatrix phi = eigenfunction_values(res, snaps);
    for (Eigen::Index i = 0; i < 2; ++i) {
        const Complex ratio = phi(i, 0) / snaps(i, 0);
        for (Eigen::Index t = 0; t < snaps.cols(); ++t) EXPECT_LT(std::abs(phi(i, t) - ratio * snaps(i, t)), 1e-10);
    }
}

TEST(DmdFit, RejectsZeroData)
{
    EXPECT_THROW(dmd_fit({Matrix::Zero(2, 3), Matrix::Ones(2, 3), ""}), InvalidArgument);
}

TEST(Hankel, DelayOneIsPlainDmd)
{
    std::mt19937_64 rng(6);
    const Matrix m = stable_map(2, rng);
    const auto tr = dynamics::simulate(dynamics::linear_map(m), (Vector(2) << 1, 1).finished(), 30);
    const auto plain = dmd_fit(build_data_matrices(Matrix(tr.states.transpose())));
    const auto hk = hankel_dmd(tr.series(), 1);
    EXPECT_LT((plain.eigenvalues() - hk.eigenvalues()).norm(), 1e-10);
}

TEST(Hankel, DelayTwoOnFixedPointMapIsInconsistent)
{
    const auto res = hankel_dmd(fixed_point_episodes(20, 30, 0), 2);
    ASSERT_EQ(res.size(), 4);
    double worst = 0.0;
    for (Eigen::Index i = 0; i < 4; ++i) {
        double best = 1e300;
        for (double t : {1.0, 0.9, 0.81, 0.5}) best = std::min(best, std::abs(res.eigenvalues()(i) - t));
        worst = std::max(worst, best);
    }
    EXPECT_GT(worst, 0.05);
}

TEST(Hankel, TooShort)
{
    TimeSeries s;
    s.values = Matrix::Ones(3, 1);
    EXPECT_THROW(hankel_dmd(s, 3), InvalidArgument);
}

TEST(ExtendedDmd, LinearDictionaryGivesMatrixEigenvalues)
{
    std::mt19937_64 rng(7);
    const Matrix m = stable_map(2, rng);
    const auto tr = dynamics::simulate(dynamics::linear_map(m), (Vector(2) << 1, -1).finished(), 20);
    const auto res = extended_dmd(tr.series(), linear_dictionary(2));
    const auto truth = linalg::eig_general(m).eigenvalues;
    for (Eigen::Index i = 0; i < 2; ++i) EXPECT_LT(nearest(res.eigenvalues(), truth(i)), 1e-8);
}

TEST(ExtendedDmd, FixedPointDictionaryRecoversSpectrum)
{
    const auto res = extended_dmd(fixed_point_episodes(10, 20, 1), fixed_point_dictionary());
    for (double t : {0.9, 0.81, 0.5}) EXPECT_LT(nearest(res.eigenvalues(), t), 1e-6) << t;
}

TEST(ExtendedDmd, NoiseInflatesError)
{
    auto err = [](const DmdResult& r) {
        double e = 0.0;
        for (double t : {0.9, 0.81, 0.5}) e = std::max(e, nearest(r.eigenvalues(), t));
        return e;
    };
    const double clean = err(extended_dmd(fixed_point_episodes(50, 20, 2), fixed_point_dictionary()));
    const double noisy = err(extended_dmd(fixed_point_episodes(50, 20, 2, 0.1), fixed_point_dictionary()));
    EXPECT_GE(noisy, 10.0 * clean);
}

TEST(ExtendedDmd, SlowModeIsTheQuadraticEigenfunction)
{
    const auto states = fixed_point_states(30);
    const auto res = extended_dmd(states, fixed_point_dictionary());
    Eigen::Index mu = 0;
    (res.eigenvalues().array() - Complex(0.5, 0.0)).abs().minCoeff(&mu);
    const CMatrix phi = eigenfunction_values(res, fixed_point_dictionary().evaluate(states.values));
    const Matrix& x = states.values;
    const Complex c = phi(mu, 0) / (x(0, 1) - x(0, 0) * x(0, 0));
    for (Eigen::Index t = 0; t < x.rows(); ++t)
        EXPECT_LT(std::abs(phi(mu, t) - c * (x(t, 1) - x(t, 0) * x(t, 0))), 1e-8);
}

TEST(ExtendedDmd, NonFiniteNamesFunction)
{
    const Dictionary bad{"bad", {{"log_x1", [](const Vector& x) { return std::log(x(0)); }}}};
    TimeSeries s;
    s.values = (Matrix(3, 1) << 1.0, 0.5, -1.0).finished();
    try {
        (void)extended_dmd(s, bad);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("log_x1"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("state index 2"), std::string::npos);
    }
}

TEST(Dictionary, Monomials)
{
    const auto d = monomial_dictionary(2, 2);
    EXPECT_EQ(d.size(), 5);
    EXPECT_EQ(monomial_dictionary(2, 2, true).size(), 6);
    const Matrix v = d.evaluate((Matrix(1, 2) << 2.0, 3.0).finished());
    std::vector<double> got(v.data(), v.data() + v.size());
    std::sort(got.begin(), got.end());
    EXPECT_EQ(got, (std::vector<double>{2, 3, 4, 6, 9}));
}

TEST(Predict, ScalarHalvingSeries)
{
    TimeSeries s;
    s.values.resize(10, 1);
    for (Eigen::Index t = 0; t < 10; ++t) s.values(t, 0) = 4.0 * std::pow(0.5, static_cast<double>(t));
    const HankelObservables id{1, 1};
    const auto res = fit_model(id, EpisodeList{s});
    const Matrix out = predict(id, res, (Matrix(1, 1) << 3.0).finished(), 5);
    for (Eigen::Index h = 1; h <= 5; ++h) EXPECT_NEAR(out(h - 1, 0), 3.0 * std::pow(0.5, static_cast<double>(h)), 1e-12);
    EXPECT_THROW(predict(id, res, (Matrix(1, 1) << 3.0).finished(), 0), InvalidArgument);
}

TEST(Predict, OneStepEqualsOperator)
{
    Hyperparameters hp;
    hp.k = 2;
    hp.n = 4;
    const auto model = make_model(2, hp, 3);
    const auto eps = fixed_point_episodes(5, 15, 3);
    const auto res = fit_model(model, eps);
    const Matrix w = delay_windows(eps[0].values, 2);
    const Matrix direct = model.reconstruct((res.a * model.observe(w).transpose()).transpose());
    const auto steps = predict_windows(model, res, w, 3);
    EXPECT_LT((steps[0] - direct).cwiseAbs().maxCoeff(), 1e-8);

    // real input stays real: the modal propagator has no imaginary leakage
    const CMatrix g = modal_operator(res) * model.observe(w).transpose().cast<Complex>();
    EXPECT_LT(g.imag().cwiseAbs().maxCoeff(), 1e-8);

    auto wrong = res;
    wrong.a = Matrix::Identity(3, 3);
    wrong.eigen = linalg::eig_general(wrong.a);
    EXPECT_THROW(predict_windows(model, wrong, w, 1), InvalidArgument);
}

TEST(Continuous, Logarithm)
{
    DmdResult r;
    r.delta_t = 0.1;
    r.eigen.eigenvalues = CVector(2);
    r.eigen.eigenvalues << 1.0, std::exp(-0.5 * 0.1);
    const CVector c = to_continuous(r);
    EXPECT_LT(std::abs(c(0)), 1e-15);
    EXPECT_NEAR(c(1).real(), -0.5, 1e-12);
    r.eigen.eigenvalues(1) = 0.0;
    EXPECT_THROW(to_continuous(r), InvalidArgument);
}

TEST(Export, JsonRoundTripAndCsv)
{
    const auto res = extended_dmd(fixed_point_episodes(3, 10, 4), fixed_point_dictionary());
    const auto back = result_from_json(nlohmann::json::parse(result_to_json(res).dump()));
    EXPECT_EQ(back.a, res.a);
    EXPECT_EQ(back.eigenvalues(), res.eigenvalues());
    EXPECT_EQ(back.eigen.left, res.eigen.left);
    EXPECT_THROW(result_from_json(nlohmann::json{{"format", "other"}}), ParseError);

    std::ostringstream os;
    write_eigenvalues_csv(os, res.eigenvalues());
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "re,im,abs,angle");
    int rows = 0;
    while (std::getline(is, line)) ++rows;
    EXPECT_EQ(rows, 3);
}
