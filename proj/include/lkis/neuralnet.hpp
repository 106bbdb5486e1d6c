///
/// \file neuralnet.hpp
///
/// Feed-forward networks with the fixed layer pattern
///
///     affine -> batchnorm -> PReLU   (every hidden layer)
///     affine                         (output layer)
///
/// with explicit forward/backward passes and first-order optimizers.
/// Inputs are batches laid out one sample per row.
///
#ifndef LKIS_NEURALNET_HPP
#define LKIS_NEURALNET_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"

namespace lkis::nn {

enum class NetMode { Train, Eval };

/// A named, contiguous block of parameters (or gradients).
struct ParamBlock
{
    std::string name;
    std::span<double> data;
};

struct BatchNormConfig
{
    double momentum = 0.1;
    double eps = 1e-8;
};

struct AffineLayer
{
    Matrix weight;  ///< out x in
    Vector bias;    ///< out
};

struct HiddenLayerState
{
    double prelu_slope = 0.25;
    Vector bn_scale;
    Vector bn_shift;
    Vector running_mean;
    Vector running_var;
};

/// Hidden size used when not overridden: rounded mean of input and output size.
inline Eigen::Index mean_hidden_size(Eigen::Index in, Eigen::Index out)
{
    return static_cast<Eigen::Index>(std::lround(0.5 * static_cast<double>(in + out)));
}

/// Layer sizes (in, h, ..., h, out) with `hidden_layers` hidden layers of
/// width `hidden` (0 = mean of in and out).
inline std::vector<Eigen::Index> default_layer_sizes(Eigen::Index in, Eigen::Index out,
                                                     int hidden_layers = 1, Eigen::Index hidden = 0)
{
    std::vector<Eigen::Index> s{in};
    for (int i = 0; i < hidden_layers; ++i) s.push_back(hidden > 0 ? hidden : mean_hidden_size(in, out));
    s.push_back(out);
    return s;
}

/// Activations kept from a forward pass for the backward pass.
struct ForwardCache
{
    NetMode mode = NetMode::Eval;
    std::vector<Eigen::Index> layer_sizes;
    std::vector<Matrix> inputs;     ///< input to each affine layer
    std::vector<Matrix> normalized; ///< x-hat per hidden layer
    std::vector<Matrix> shifted;    ///< scale * x-hat + shift per hidden layer
    std::vector<Vector> inv_std;    ///< per hidden layer
    Matrix output;
};

/// Gradient storage, same shapes as the network parameters.
struct MlpGrads
{
    std::vector<AffineLayer> affine;
    std::vector<HiddenLayerState> hidden;
    Matrix input;  ///< dL/dX

    std::vector<ParamBlock> blocks();
    void set_zero();
};

class Mlp
{
public:
    Mlp() = default;

    ///
    /// Layer sizes (input, hidden..., output), all >= 1, at least two entries.
    /// Weights are He-initialized from a normal distribution seeded by
    /// `seed`; biases and batchnorm shifts start at 0, scales at 1, PReLU
    /// slopes at 0.25.
    ///
    Mlp(std::vector<Eigen::Index> layer_sizes, std::uint64_t seed, BatchNormConfig bn = {})
        : sizes_(std::move(layer_sizes)), bn_(bn)
    {
        require(sizes_.size() >= 2, "Mlp: need at least input and output sizes");
        for (auto s : sizes_) require(s >= 1, "Mlp: layer sizes must be >= 1");

        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
            const Eigen::Index in = sizes_[l], out = sizes_[l + 1];
            const double stddev = std::sqrt(2.0 / static_cast<double>(in));
            AffineLayer layer{Matrix(out, in), Vector::Zero(out)};
            for (Eigen::Index i = 0; i < out; ++i)
                for (Eigen::Index j = 0; j < in; ++j) layer.weight(i, j) = stddev * normal(rng);
            affine_.push_back(std::move(layer));
            if (l + 2 < sizes_.size()) {
                HiddenLayerState h;
                h.bn_scale = Vector::Ones(out);
                h.bn_shift = Vector::Zero(out);
                h.running_mean = Vector::Zero(out);
                h.running_var = Vector::Ones(out);
                hidden_.push_back(std::move(h));
            }
        }
    }

    const std::vector<Eigen::Index>& layer_sizes() const { return sizes_; }
    Eigen::Index input_size() const { return sizes_.front(); }
    Eigen::Index output_size() const { return sizes_.back(); }
    std::size_t hidden_count() const { return hidden_.size(); }
    const BatchNormConfig& batchnorm_config() const { return bn_; }

    std::vector<AffineLayer>& affine() { return affine_; }
    const std::vector<AffineLayer>& affine() const { return affine_; }
    std::vector<HiddenLayerState>& hidden() { return hidden_; }
    const std::vector<HiddenLayerState>& hidden() const { return hidden_; }

    /// Learnable parameters in declared order.
    std::vector<ParamBlock> parameters()
    {
        return collect_blocks(affine_, hidden_);
    }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (const auto& a : affine_) n += static_cast<std::size_t>(a.weight.size() + a.bias.size());
        for (const auto& h : hidden_) n += 1 + static_cast<std::size_t>(h.bn_scale.size() + h.bn_shift.size());
        return n;
    }

    MlpGrads zero_grads() const
    {
        MlpGrads g;
        for (const auto& a : affine_)
            g.affine.push_back({Matrix::Zero(a.weight.rows(), a.weight.cols()), Vector::Zero(a.bias.size())});
        for (const auto& h : hidden_) {
            HiddenLayerState z;
            z.prelu_slope = 0.0;
            z.bn_scale = Vector::Zero(h.bn_scale.size());
            z.bn_shift = Vector::Zero(h.bn_shift.size());
            g.hidden.push_back(std::move(z));
        }
        return g;
    }

    ///
    /// Forward pass. In Train mode batchnorm uses batch statistics (batch of
    /// at least 2 rows) and, if `update_running`, folds them into the running
    /// estimates. In Eval mode the running estimates are used and the net is
    /// not modified.
    ///
    ForwardCache forward(const Matrix& x, NetMode mode, bool update_running = true)
    {
        if (mode == NetMode::Eval) return forward_impl(x, mode, nullptr);
        return forward_impl(x, mode, update_running ? &hidden_ : nullptr);
    }

    ForwardCache forward(const Matrix& x) const { return forward_impl(x, NetMode::Eval, nullptr); }

    /// Eval-mode output only.
    Matrix predict(const Matrix& x) const { return forward_impl(x, NetMode::Eval, nullptr).output; }

    ///
    /// Backward pass from dL/dOutput. Gradients are accumulated into `grads`
    /// (which must come from zero_grads() of a net with this structure);
    /// grads.input receives dL/dX.
    ///
    void backward(const ForwardCache& cache, const Matrix& grad_out, MlpGrads& grads) const
    {
        if (cache.layer_sizes != sizes_)
            throw InvalidArgument("Mlp::backward: cache was produced by a network of different structure");
        require(grads.affine.size() == affine_.size() && grads.hidden.size() == hidden_.size(),
                "Mlp::backward: gradient storage does not match network");
        require(grad_out.rows() == cache.output.rows() && grad_out.cols() == cache.output.cols(),
                "Mlp::backward: grad_out shape " + shape_str(grad_out.rows(), grad_out.cols()) +
                    " does not match output " + shape_str(cache.output.rows(), cache.output.cols()));

        const auto batch = static_cast<double>(grad_out.rows());
        Matrix d = grad_out;  // gradient w.r.t. the output of the current layer
        for (std::size_t li = affine_.size(); li-- > 0;) {
            const AffineLayer& layer = affine_[li];
            if (li < hidden_.size()) {
                // d is w.r.t. PReLU output; undo activation then batchnorm.
                const HiddenLayerState& h = hidden_[li];
                HiddenLayerState& gh = grads.hidden[li];
                const Matrix& u = cache.shifted[li];
                const Matrix& xhat = cache.normalized[li];
                Matrix du(d.rows(), d.cols());
                double dslope = 0.0;
                for (Eigen::Index j = 0; j < d.cols(); ++j) {
                    for (Eigen::Index i = 0; i < d.rows(); ++i) {
                        const double ui = u(i, j);
                        if (ui > 0.0) {
                            du(i, j) = d(i, j);
                        } else {
                            du(i, j) = h.prelu_slope * d(i, j);
                            dslope += d(i, j) * ui;
                        }
                    }
                }
                gh.prelu_slope += dslope;
                gh.bn_scale += (du.array() * xhat.array()).colwise().sum().transpose().matrix();
                gh.bn_shift += du.colwise().sum().transpose();
                Matrix dxhat = du.array().rowwise() * h.bn_scale.transpose().array();
                const Vector& istd = cache.inv_std[li];
                if (cache.mode == NetMode::Train) {
                    const RowVector sum_d = dxhat.colwise().sum();
                    const RowVector sum_dx = (dxhat.array() * xhat.array()).colwise().sum();
                    Matrix dz = (batch * dxhat.array()).matrix();
                    dz.rowwise() -= sum_d;
                    dz.array() -= xhat.array().rowwise() * sum_dx.array();
                    dz.array().rowwise() *= (istd.transpose().array() / batch);
                    d = std::move(dz);
                } else {
                    dxhat.array().rowwise() *= istd.transpose().array();
                    d = std::move(dxhat);
                }
            }
            grads.affine[li].weight.noalias() += d.transpose() * cache.inputs[li];
            grads.affine[li].bias += d.colwise().sum().transpose();
            d = d * layer.weight;
        }
        grads.input = std::move(d);
    }

private:
    static std::vector<ParamBlock> collect_blocks(std::vector<AffineLayer>& affine,
                                                  std::vector<HiddenLayerState>& hidden)
    {
        std::vector<ParamBlock> out;
        for (std::size_t l = 0; l < affine.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            auto& a = affine[l];
            out.push_back({p + "weight", {a.weight.data(), static_cast<std::size_t>(a.weight.size())}});
            out.push_back({p + "bias", {a.bias.data(), static_cast<std::size_t>(a.bias.size())}});
            if (l < hidden.size()) {
                auto& h = hidden[l];
                out.push_back({p + "bn_scale", {h.bn_scale.data(), static_cast<std::size_t>(h.bn_scale.size())}});
                out.push_back({p + "bn_shift", {h.bn_shift.data(), static_cast<std::size_t>(h.bn_shift.size())}});
                out.push_back({p + "prelu_slope", {&h.prelu_slope, 1}});
            }
        }
        return out;
    }

    ForwardCache forward_impl(const Matrix& x, NetMode mode, std::vector<HiddenLayerState>* update) const
    {
        require(x.cols() == input_size(), "Mlp::forward: input has " + std::to_string(x.cols()) +
                                              " columns, network expects " + std::to_string(input_size()));
        require(x.rows() >= 1, "Mlp::forward: empty batch");
        if (mode == NetMode::Train && !hidden_.empty())
            require(x.rows() >= 2, "Mlp::forward: Train mode needs a batch of at least 2 rows");

        ForwardCache c;
        c.mode = mode;
        c.layer_sizes = sizes_;
        Matrix a = x;
        for (std::size_t l = 0; l < affine_.size(); ++l) {
            const AffineLayer& layer = affine_[l];
            Matrix z = a * layer.weight.transpose();
            z.rowwise() += layer.bias.transpose();
            c.inputs.push_back(std::move(a));
            if (l < hidden_.size()) {
                const HiddenLayerState& h = hidden_[l];
                Vector mean, var;
                if (mode == NetMode::Train) {
                    mean = z.colwise().mean().transpose();
                    var = (z.rowwise() - mean.transpose()).array().square().colwise().mean().transpose();
                    if (update) {
                        auto& s = (*update)[l];
                        s.running_mean = (1.0 - bn_.momentum) * s.running_mean + bn_.momentum * mean;
                        s.running_var = (1.0 - bn_.momentum) * s.running_var + bn_.momentum * var;
                    }
                } else {
                    mean = h.running_mean;
                    var = h.running_var;
                }
                Vector istd = (var.array() + bn_.eps).rsqrt().matrix();
                Matrix xhat = (z.rowwise() - mean.transpose()).array().rowwise() * istd.transpose().array();
                Matrix u = (xhat.array().rowwise() * h.bn_scale.transpose().array()).matrix();
                u.rowwise() += h.bn_shift.transpose();
                const double s = h.prelu_slope;
                a = u.unaryExpr([s](double v) { return v > 0.0 ? v : s * v; });
                c.normalized.push_back(std::move(xhat));
                c.shifted.push_back(std::move(u));
                c.inv_std.push_back(std::move(istd));
            } else {
                a = std::move(z);
            }
        }
        c.output = std::move(a);
        return c;
    }

    std::vector<Eigen::Index> sizes_;
    std::vector<AffineLayer> affine_;
    std::vector<HiddenLayerState> hidden_;
    BatchNormConfig bn_;

    friend struct MlpGrads;
    friend Mlp mlp_from_json(const nlohmann::json&);
};

inline std::vector<ParamBlock> MlpGrads::blocks()
{
    return Mlp::collect_blocks(affine, hidden);
}

inline void MlpGrads::set_zero()
{
    for (auto& a : affine) {
        a.weight.setZero();
        a.bias.setZero();
    }
    for (auto& h : hidden) {
        h.prelu_slope = 0.0;
        h.bn_scale.setZero();
        h.bn_shift.setZero();
    }
    input.resize(0, 0);
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

enum class OptimizerKind { Sgd, SgdMomentum, Adam };

inline std::string to_string(OptimizerKind k)
{
    switch (k) {
    case OptimizerKind::Sgd: return "sgd";
    case OptimizerKind::SgdMomentum: return "sgd-momentum";
    case OptimizerKind::Adam: return "adam";
    }
    return "adam";
}

inline OptimizerKind optimizer_kind_from_string(const std::string& s)
{
    if (s == "sgd") return OptimizerKind::Sgd;
    if (s == "sgd-momentum") return OptimizerKind::SgdMomentum;
    if (s == "adam") return OptimizerKind::Adam;
    throw InvalidArgument("unknown optimizer '" + s + "' (expected sgd, sgd-momentum or adam)");
}

struct OptimizerConfig
{
    OptimizerKind kind = OptimizerKind::Adam;
    double learning_rate = 1e-3;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Per-parameter accumulators for one optimizer run.
class Optimizer
{
public:
    explicit Optimizer(OptimizerConfig cfg = {}) : cfg_(cfg) {}

    const OptimizerConfig& config() const { return cfg_; }
    void set_learning_rate(double lr) { cfg_.learning_rate = lr; }
    std::int64_t step_count() const { return step_; }

    ///
    /// One update of every block. Gradient blocks must match parameter blocks
    /// one-to-one in size. A non-finite gradient aborts before any parameter
    /// is touched.
    ///
    void step(const std::vector<ParamBlock>& params, const std::vector<ParamBlock>& grads)
    {
        require(params.size() == grads.size(), "Optimizer::step: parameter/gradient block count mismatch");
        for (std::size_t b = 0; b < params.size(); ++b) {
            require(params[b].data.size() == grads[b].data.size(),
                    "Optimizer::step: size mismatch in block '" + params[b].name + "'");
            for (double g : grads[b].data) {
                if (!std::isfinite(g)) throw Error("Optimizer::step: non-finite gradient in block '" + params[b].name + "'");
            }
        }
        if (first_.empty()) {
            for (const auto& p : params) {
                first_.emplace_back(Vector::Zero(static_cast<Eigen::Index>(p.data.size())));
                second_.emplace_back(Vector::Zero(static_cast<Eigen::Index>(p.data.size())));
            }
        }
        require(first_.size() == params.size(), "Optimizer::step: parameter layout changed between steps");
        ++step_;

        const double lr = cfg_.learning_rate;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::size_t b = 0; b < params.size(); ++b) {
            auto p = params[b].data;
            auto g = grads[b].data;
            require(static_cast<Eigen::Index>(p.size()) == first_[b].size(),
                    "Optimizer::step: accumulator shape mismatch in block '" + params[b].name + "'");
            Vector& m = first_[b];
            Vector& v = second_[b];
            for (std::size_t i = 0; i < p.size(); ++i) {
                const auto k = static_cast<Eigen::Index>(i);
                switch (cfg_.kind) {
                case OptimizerKind::Sgd:
                    p[i] -= lr * g[i];
                    break;
                case OptimizerKind::SgdMomentum:
                    m(k) = cfg_.momentum * m(k) + g[i];
                    p[i] -= lr * m(k);
                    break;
                case OptimizerKind::Adam: {
                    m(k) = cfg_.beta1 * m(k) + (1.0 - cfg_.beta1) * g[i];
                    v(k) = cfg_.beta2 * v(k) + (1.0 - cfg_.beta2) * g[i] * g[i];
                    const double mhat = m(k) / bc1;
                    const double vhat = v(k) / bc2;
                    p[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
                    break;
                }
                }
            }
        }
    }

private:
    OptimizerConfig cfg_;
    std::int64_t step_ = 0;
    std::vector<Vector> first_;
    std::vector<Vector> second_;
};

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline constexpr int kMlpFormatVersion = 1;

/// Versioned document: layer sizes, parameter blocks in declared order
/// (weights flattened row-major), batchnorm running statistics.
inline nlohmann::json mlp_to_json(const Mlp& net)
{
    using nlohmann::json;
    json j;
    j["format"] = "lkis.mlp";
    j["version"] = kMlpFormatVersion;
    j["layer_sizes"] = net.layer_sizes();
    j["batchnorm"] = {{"momentum", net.batchnorm_config().momentum}, {"eps", net.batchnorm_config().eps}};
    json params = json::array();
    auto copy = net;
    for (const auto& b : copy.parameters()) {
        std::vector<double> values;
        if (b.name.ends_with(".weight")) {
            const auto l = static_cast<std::size_t>(std::stoul(b.name.substr(5)));
            const Matrix& w = net.affine()[l].weight;
            for (Eigen::Index r = 0; r < w.rows(); ++r)
                for (Eigen::Index c = 0; c < w.cols(); ++c) values.push_back(w(r, c));
        } else {
            values.assign(b.data.begin(), b.data.end());
        }
        params.push_back({{"name", b.name}, {"values", values}});
    }
    j["parameters"] = params;
    json stats = json::array();
    for (const auto& h : net.hidden()) {
        stats.push_back({{"mean", std::vector<double>(h.running_mean.data(), h.running_mean.data() + h.running_mean.size())},
                         {"var", std::vector<double>(h.running_var.data(), h.running_var.data() + h.running_var.size())}});
    }
    j["running_stats"] = stats;
    return j;
}

inline Mlp mlp_from_json(const nlohmann::json& j)
{
    if (j.value("format", std::string{}) != "lkis.mlp") throw ParseError("mlp json: missing or wrong 'format'");
    if (j.value("version", 0) != kMlpFormatVersion)
        throw ParseError("mlp json: unsupported version " + std::to_string(j.value("version", 0)));
    auto sizes = j.at("layer_sizes").get<std::vector<Eigen::Index>>();
    BatchNormConfig bn;
    bn.momentum = j.at("batchnorm").at("momentum").get<double>();
    bn.eps = j.at("batchnorm").at("eps").get<double>();
    Mlp net(sizes, 0, bn);

    const auto& params = j.at("parameters");
    auto blocks = net.parameters();
    if (params.size() != blocks.size()) throw ParseError("mlp json: parameter block count mismatch");
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const auto& pj = params[b];
        if (pj.at("name").get<std::string>() != blocks[b].name)
            throw ParseError("mlp json: expected block '" + blocks[b].name + "'");
        auto values = pj.at("values").get<std::vector<double>>();
        if (values.size() != blocks[b].data.size())
            throw ParseError("mlp json: block '" + blocks[b].name + "' has wrong length");
        if (blocks[b].name.ends_with(".weight")) {
            const auto l = static_cast<std::size_t>(std::stoul(blocks[b].name.substr(5)));
            Matrix& w = net.affine_[l].weight;
            std::size_t k = 0;
            for (Eigen::Index r = 0; r < w.rows(); ++r)
                for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = values[k++];
        } else {
            std::copy(values.begin(), values.end(), blocks[b].data.begin());
        }
    }
    const auto& stats = j.at("running_stats");
    if (stats.size() != net.hidden_.size()) throw ParseError("mlp json: running_stats count mismatch");
    for (std::size_t l = 0; l < net.hidden_.size(); ++l) {
        auto mean = stats[l].at("mean").get<std::vector<double>>();
        auto var = stats[l].at("var").get<std::vector<double>>();
        auto& h = net.hidden_[l];
        if (static_cast<Eigen::Index>(mean.size()) != h.running_mean.size() ||
            static_cast<Eigen::Index>(var.size()) != h.running_var.size())
            throw ParseError("mlp json: running_stats shape mismatch");
        h.running_mean = Eigen::Map<Vector>(mean.data(), static_cast<Eigen::Index>(mean.size()));
        h.running_var = Eigen::Map<Vector>(var.data(), static_cast<Eigen::Index>(var.size()));
        if ((h.running_var.array() < 0.0).any()) throw ParseError("mlp json: negative running variance");
    }
    return net;
}

} // namespace lkis::nn

#endif // LKIS_NEURALNET_HPP
