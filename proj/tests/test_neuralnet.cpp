#include <lkis/neuralnet.hpp>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace lkis;
using namespace lkis::nn;
using lkis::test::random_matrix;

namespace {

// Hand-rolled forward pass, Eval or Train statistics.
Matrix oracle_forward(const Mlp& net, const Matrix& x, bool train)
{
    Matrix a = x;
    const double eps = net.batchnorm_config().eps;
    for (std::size_t l = 0; l < net.affine().size(); ++l) {
        const auto& L = net.affine()[l];
        Matrix z(a.rows(), L.weight.rows());
        for (Eigen::Index i = 0; i < a.rows(); ++i)
            for (Eigen::Index o = 0; o < L.weight.rows(); ++o) {
                double s = L.bias(o);
                for (Eigen::Index j = 0; j < a.cols(); ++j) s += L.weight(o, j) * a(i, j);
                z(i, o) = s;
            }
        if (l == net.hidden_count()) return z;
        const auto& h = net.hidden()[l];
        for (Eigen::Index o = 0; o < z.cols(); ++o) {
            double mean = h.running_mean(o), var = h.running_var(o);
            if (train) {
                mean = 0.0;
                for (Eigen::Index i = 0; i < z.rows(); ++i) mean += z(i, o);
                mean /= static_cast<double>(z.rows());
                var = 0.0;
                for (Eigen::Index i = 0; i < z.rows(); ++i) var += (z(i, o) - mean) * (z(i, o) - mean);
                var /= static_cast<double>(z.rows());
            }
            for (Eigen::Index i = 0; i < z.rows(); ++i) {
                const double u = h.bn_scale(o) * (z(i, o) - mean) / std::sqrt(var + eps) + h.bn_shift(o);
                z(i, o) = u > 0.0 ? u : h.prelu_slope * u;
            }
        }
        a = z;
    }
    return a;
}

// Non-trivial batchnorm and PReLU parameters so every gradient path is exercised.
void perturb_state(Mlp& net, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> u(0.5, 1.5), s(-0.3, 0.3);
    for (auto& h : net.hidden()) {
        for (Eigen::Index i = 0; i < h.bn_scale.size(); ++i) {
            h.bn_scale(i) = u(rng);
            h.bn_shift(i) = s(rng);
            h.running_mean(i) = s(rng);
            h.running_var(i) = u(rng);
        }
        h.prelu_slope = 0.1 + 0.2 * u(rng);
    }
    for (auto& a : net.affine())
        for (Eigen::Index i = 0; i < a.bias.size(); ++i) a.bias(i) = s(rng);
}

double weighted_output(Mlp& net, const Matrix& x, const Matrix& c, NetMode mode)
{
    return (net.forward(x, mode, false).output.array() * c.array()).sum();
}

void check_fd(std::vector<Eigen::Index> sizes, NetMode mode, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    Mlp net(sizes, seed);
    perturb_state(net, rng);
    const Matrix x = random_matrix(6, sizes.front(), rng);
    const Matrix c = random_matrix(6, sizes.back(), rng);
    const auto cache = net.forward(x, mode, false);
    auto grads = net.zero_grads();
    net.backward(cache, c, grads);

    const double h = 1e-6;
    auto params = net.parameters();
    auto gblocks = grads.blocks();
    ASSERT_EQ(params.size(), gblocks.size());
    for (std::size_t b = 0; b < params.size(); ++b) {
        for (std::size_t i = 0; i < params[b].data.size(); ++i) {
            double& p = params[b].data[i];
            const double keep = p;
            p = keep + h;
            const double fp = weighted_output(net, x, c, mode);
            p = keep - h;
            const double fm = weighted_output(net, x, c, mode);
            p = keep;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = gblocks[b].data[i];
            EXPECT_LE(std::abs(fd - an), 1e-4 * std::max(std::abs(fd), std::abs(an)) + 1e-8)
                << params[b].name << "[" << i << "] fd=" << fd << " analytic=" << an;
        }
    }
    Matrix xp = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double keep = xp.data()[i];
        xp.data()[i] = keep + h;
        const double fp = weighted_output(net, xp, c, mode);
        xp.data()[i] = keep - h;
        const double fm = weighted_output(net, xp, c, mode);
        xp.data()[i] = keep;
        const double fd = (fp - fm) / (2.0 * h);
        EXPECT_LE(std::abs(fd - grads.input.data()[i]), 1e-4 * std::abs(fd) + 1e-8) << "input[" << i << "]";
    }
}

} // namespace

TEST(Mlp, ParameterCounts)
{
    EXPECT_EQ(Mlp({2, 3, 4}, 0).parameter_count(), 32u);
    EXPECT_EQ(Mlp({1, 1}, 0).parameter_count(), 2u);
    std::size_t total = 0;
    Mlp net({3, 5, 5, 2}, 1);
    for (const auto& b : net.parameters()) total += b.data.size();
    EXPECT_EQ(total, net.parameter_count());
}

TEST(Mlp, DefaultLayerSizes)
{
    EXPECT_EQ(default_layer_sizes(4, 16), (std::vector<Eigen::Index>{4, 10, 16}));
    EXPECT_EQ(default_layer_sizes(3, 2, 2), (std::vector<Eigen::Index>{3, 3, 3, 2}));
    EXPECT_EQ(default_layer_sizes(2, 2, 1, 64), (std::vector<Eigen::Index>{2, 64, 2}));
    EXPECT_EQ(default_layer_sizes(2, 2, 0), (std::vector<Eigen::Index>{2, 2}));
}

TEST(Mlp, SameSeedSameWeights)
{
    Mlp a({3, 4, 2}, 7), b({3, 4, 2}, 7), c({3, 4, 2}, 8);
    EXPECT_EQ(a.affine()[0].weight, b.affine()[0].weight);
    EXPECT_NE(a.affine()[0].weight, c.affine()[0].weight);
}

TEST(Mlp, HeInitializationScale)
{
    Mlp net({400, 300, 1}, 3);
    const Matrix& w = net.affine()[0].weight;
    const double var = w.squaredNorm() / static_cast<double>(w.size());
    EXPECT_NEAR(var, 2.0 / 400.0, 0.05 * 2.0 / 400.0);
}

TEST(Mlp, ForwardMatchesOracle)
{
    std::mt19937_64 rng(11);
    for (auto sizes : {std::vector<Eigen::Index>{2, 3, 4}, {3, 5, 5, 2}, {4, 1}}) {
        Mlp net(sizes, 5);
        perturb_state(net, rng);
        const Matrix x = random_matrix(7, sizes.front(), rng);
        EXPECT_LT((net.predict(x) - oracle_forward(net, x, false)).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LT((net.forward(x, NetMode::Train, false).output - oracle_forward(net, x, true)).cwiseAbs().maxCoeff(),
                  1e-12);
    }
}

TEST(Mlp, GradientMatchesFiniteDifferenceTrainMode)
{
    check_fd({3, 4, 2}, NetMode::Train, 1);
    check_fd({2, 5, 3, 2}, NetMode::Train, 2);
}

TEST(Mlp, GradientMatchesFiniteDifferenceEvalMode)
{
    check_fd({3, 4, 2}, NetMode::Eval, 3);
    check_fd({4, 3}, NetMode::Eval, 4);
}

TEST(Mlp, ZeroUpstreamGivesZeroGradients)
{
    std::mt19937_64 rng(5);
    Mlp net({3, 4, 2}, 5);
    const Matrix x = random_matrix(5, 3, rng);
    const auto cache = net.forward(x, NetMode::Train, false);
    auto g = net.zero_grads();
    net.backward(cache, Matrix::Zero(5, 2), g);
    for (const auto& b : g.blocks())
        for (double v : b.data) EXPECT_EQ(v, 0.0);
}

TEST(Mlp, LinearNetClosedFormGradient)
{
    // No hidden layers: L = sum(C .* (X W^T + 1 b^T)) => dW = C^T X, db = C^T 1.
    std::mt19937_64 rng(6);
    Mlp net({3, 2}, 6);
    const Matrix x = random_matrix(4, 3, rng), c = random_matrix(4, 2, rng);
    auto g = net.zero_grads();
    net.backward(net.forward(x, NetMode::Train), c, g);
    EXPECT_LT((g.affine[0].weight - c.transpose() * x).norm(), 1e-12);
    EXPECT_LT((g.affine[0].bias - c.colwise().sum().transpose()).norm(), 1e-12);
    EXPECT_LT((g.input - c * net.affine()[0].weight).norm(), 1e-12);
}

TEST(Mlp, ZeroWeightsGiveZeroOutput)
{
    std::mt19937_64 rng(12);
    Mlp net({3, 4, 2}, 12);
    for (auto& a : net.affine()) a.weight.setZero();
    EXPECT_EQ(net.predict(random_matrix(5, 3, rng)).norm(), 0.0);
}

TEST(Mlp, SingleAffineLayerIsExact)
{
    std::mt19937_64 rng(13);
    Mlp net({3, 2}, 13);
    net.affine()[0].bias << 0.5, -1.0;
    const Matrix x = random_matrix(4, 3, rng);
    Matrix expect = x * net.affine()[0].weight.transpose();
    expect.rowwise() += net.affine()[0].bias.transpose();
    EXPECT_EQ(net.predict(x), expect);
}

TEST(Mlp, QuadraticLossClosedForm)
{
    // ||X W^T - T||^2 => dW = 2 (X W^T - T)^T X
    std::mt19937_64 rng(14);
    Mlp net({3, 2}, 14);
    const Matrix x = random_matrix(6, 3, rng), t = random_matrix(6, 2, rng);
    const auto c = net.forward(x, NetMode::Train);
    auto g = net.zero_grads();
    net.backward(c, 2.0 * (c.output - t), g);
    const Matrix resid = x * net.affine()[0].weight.transpose() - t;
    EXPECT_LT((g.affine[0].weight - 2.0 * resid.transpose() * x).norm(), 1e-10);
}

TEST(Mlp, BatchNormNormalizesTrainBatch)
{
    std::mt19937_64 rng(7);
    Mlp net({3, 6, 1}, 7);
    const Matrix x = random_matrix(50, 3, rng, 4.0);
    const auto c = net.forward(x, NetMode::Train, false);
    const Matrix& xhat = c.normalized[0];
    for (Eigen::Index j = 0; j < xhat.cols(); ++j) {
        EXPECT_NEAR(xhat.col(j).mean(), 0.0, 1e-12);
        EXPECT_NEAR(xhat.col(j).squaredNorm() / 50.0, 1.0, 1e-6);
    }
}

TEST(Mlp, RunningStatisticsUpdate)
{
    std::mt19937_64 rng(8);
    Mlp net({2, 3, 1}, 8);
    const Matrix x = random_matrix(10, 2, rng);
    const Vector before = net.hidden()[0].running_mean;
    (void)net.forward(x, NetMode::Train, false);
    EXPECT_EQ(net.hidden()[0].running_mean, before);
    (void)net.forward(x, NetMode::Train, true);
    EXPECT_NE(net.hidden()[0].running_mean, before);
    const Vector after = net.hidden()[0].running_mean;
    (void)net.predict(x);
    EXPECT_EQ(net.hidden()[0].running_mean, after);
}

TEST(Mlp, EvalModeIsRowwise)
{
    std::mt19937_64 rng(9);
    Mlp net({3, 4, 2}, 9);
    const Matrix x = random_matrix(6, 3, rng);
    Eigen::PermutationMatrix<Eigen::Dynamic> perm(6);
    perm.indices() << 3, 0, 5, 1, 4, 2;
    EXPECT_LT((net.predict(perm * x) - perm * net.predict(x)).norm(), 1e-14);
}

TEST(Mlp, TrainModeRejectsSingleRow)
{
    Mlp net({2, 3, 1}, 0);
    EXPECT_THROW(net.forward(Matrix::Ones(1, 2), NetMode::Train), InvalidArgument);
    EXPECT_NO_THROW(net.forward(Matrix::Ones(1, 2), NetMode::Eval));
}

TEST(Mlp, ShapeErrors)
{
    Mlp net({2, 3, 1}, 0), other({2, 4, 1}, 0);
    EXPECT_THROW(net.predict(Matrix::Ones(3, 3)), InvalidArgument);
    const auto c = other.forward(Matrix::Ones(3, 2), NetMode::Eval);
    auto g = net.zero_grads();
    EXPECT_THROW(net.backward(c, Matrix::Ones(3, 1), g), InvalidArgument);
}

TEST(Mlp, JsonRoundTrip)
{
    std::mt19937_64 rng(10);
    Mlp net({3, 4, 2}, 10);
    perturb_state(net, rng);
    const Mlp back = mlp_from_json(nlohmann::json::parse(mlp_to_json(net).dump()));
    const Matrix x = random_matrix(5, 3, rng);
    EXPECT_EQ(back.predict(x), net.predict(x));
}

TEST(Optimizer, PlainSgdStep)
{
    double p = 1.0, g = 2.0;
    Optimizer opt({OptimizerKind::Sgd, 0.1});
    opt.step({{"p", {&p, 1}}}, {{"p", {&g, 1}}});
    EXPECT_DOUBLE_EQ(p, 0.8);
    EXPECT_EQ(opt.step_count(), 1);
}

TEST(Optimizer, ZeroGradient)
{
    double p = 1.5, g = 0.0;
    Optimizer sgd({OptimizerKind::Sgd, 0.1});
    sgd.step({{"p", {&p, 1}}}, {{"p", {&g, 1}}});
    EXPECT_EQ(p, 1.5);
    Optimizer adam;
    adam.step({{"p", {&p, 1}}}, {{"p", {&g, 1}}});
    EXPECT_NEAR(p, 1.5, 1e-12);
}

TEST(Optimizer, AdamFirstStepIsSignedLearningRate)
{
    double p[3] = {0.0, 0.0, 0.0}, g[3] = {3.0, -0.01, 1e3};
    Optimizer opt({OptimizerKind::Adam, 0.01});
    opt.step({{"p", {p, 3}}}, {{"p", {g, 3}}});
    EXPECT_NEAR(p[0], -0.01, 1e-8);
    EXPECT_NEAR(p[1], 0.01, 1e-7);
    EXPECT_NEAR(p[2], -0.01, 1e-8);
}

TEST(Optimizer, MomentumAccumulates)
{
    double p = 0.0, g = 1.0;
    Optimizer opt({OptimizerKind::SgdMomentum, 0.1, 0.5});
    opt.step({{"p", {&p, 1}}}, {{"p", {&g, 1}}});
    opt.step({{"p", {&p, 1}}}, {{"p", {&g, 1}}});
    EXPECT_NEAR(p, -0.1 - 0.15, 1e-15);
}

TEST(Optimizer, NonFiniteGradientNamesBlock)
{
    double p[2] = {1.0, 2.0}, g[2] = {0.0, std::numeric_limits<double>::infinity()};
    Optimizer opt;
    try {
        opt.step({{"layer0.weight", {p, 2}}}, {{"layer0.weight", {g, 2}}});
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("layer0.weight"), std::string::npos);
    }
    EXPECT_EQ(p[0], 1.0);
    EXPECT_EQ(p[1], 2.0);
}

TEST(Optimizer, KindNames)
{
    for (auto k : {OptimizerKind::Sgd, OptimizerKind::SgdMomentum, OptimizerKind::Adam})
        EXPECT_EQ(optimizer_kind_from_string(to_string(k)), k);
    EXPECT_THROW(optimizer_kind_from_string("rmsprop"), Error);
}
