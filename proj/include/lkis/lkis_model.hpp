///
/// \file lkis_model.hpp
///
/// Learning Koopman invariant subspaces: a linear delay embedder followed by
/// an observable network g and a reconstructor h, trained to minimize
///
///     L = || Y1 (I - Y0^+ Y0) ||_F^2 + alpha * sum_j || y_j - h(g(x~_j)) ||^2
///         + l1_phi * || W_phi ||_1
///
/// where the columns of Y0 / Y1 are g evaluated on consecutive embedded
/// states.
///
#ifndef LKIS_LKIS_MODEL_HPP
#define LKIS_LKIS_MODEL_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "linalg.hpp"
#include "neuralnet.hpp"
#include "series.hpp"

namespace lkis {

// ---------------------------------------------------------------------------
// Embedder
// ---------------------------------------------------------------------------

/// x~ = W_phi [y_t; y_{t-1}; ...; y_{t-k+1}], W_phi in R^{p x kr}.
struct Embedder
{
    Matrix weight;
    Eigen::Index k = 1;
    Eigen::Index r = 1;

    Embedder() = default;
    Embedder(Matrix w, Eigen::Index lags, Eigen::Index dim) : weight(std::move(w)), k(lags), r(dim)
    {
        require(k >= 1 && r >= 1, "Embedder: k and r must be >= 1");
        require(weight.cols() == k * r, "Embedder: weight has " + std::to_string(weight.cols()) +
                                            " columns, expected k*r = " + std::to_string(k * r));
        require(weight.rows() >= 1, "Embedder: p must be >= 1");
    }

    Eigen::Index p() const { return weight.rows(); }

    /// Window given as k rows of r measurements, newest first.
    Vector embed(const Matrix& window_newest_first) const
    {
        require(window_newest_first.rows() == k && window_newest_first.cols() == r,
                "Embedder::embed: window must be " + shape_str(k, r) + ", got " +
                    shape_str(window_newest_first.rows(), window_newest_first.cols()));
        Vector stacked(k * r);
        for (Eigen::Index lag = 0; lag < k; ++lag)
            stacked.segment(lag * r, r) = window_newest_first.row(lag).transpose();
        return weight * stacked;
    }

    /// Rows of stacked windows (N x kr) to rows of embedded states (N x p).
    Matrix embed_rows(const Matrix& windows) const
    {
        require(windows.cols() == k * r, "Embedder::embed_rows: windows must have k*r columns");
        return windows * weight.transpose();
    }
};

// ---------------------------------------------------------------------------
// Pairs
// ---------------------------------------------------------------------------

///
/// Consecutive embedded-state pairs (x~_t, x~_{t+1}) for t = k-1 ... m-1 of
/// every episode, stored as stacked delay windows plus the newest measurement
/// of each window (the reconstruction target).
///
struct PairSet
{
    Matrix windows0;  ///< N x kr
    Matrix windows1;  ///< N x kr
    Matrix targets0;  ///< N x r, y_t
    Matrix targets1;  ///< N x r, y_{t+1}
    std::vector<std::size_t> episode;
    std::vector<Eigen::Index> time;

    Eigen::Index size() const { return windows0.rows(); }

    PairSet subset(const std::vector<Eigen::Index>& idx) const
    {
        PairSet s;
        const auto n = static_cast<Eigen::Index>(idx.size());
        s.windows0.resize(n, windows0.cols());
        s.windows1.resize(n, windows1.cols());
        s.targets0.resize(n, targets0.cols());
        s.targets1.resize(n, targets1.cols());
        for (Eigen::Index i = 0; i < n; ++i) {
            const Eigen::Index j = idx[static_cast<std::size_t>(i)];
            s.windows0.row(i) = windows0.row(j);
            s.windows1.row(i) = windows1.row(j);
            s.targets0.row(i) = targets0.row(j);
            s.targets1.row(i) = targets1.row(j);
            s.episode.push_back(episode[static_cast<std::size_t>(j)]);
            s.time.push_back(time[static_cast<std::size_t>(j)]);
        }
        return s;
    }
};

/// Minimum series length that yields one pair.
inline Eigen::Index min_pair_length(Eigen::Index k) { return k + 1; }

inline PairSet build_pairs(const EpisodeList& episodes, Eigen::Index k)
{
    require(!episodes.empty(), "build_pairs: no episodes");
    require(k >= 1, "build_pairs: k must be >= 1");
    const Eigen::Index r = episodes.front().dim();
    Eigen::Index total = 0;
    for (const auto& e : episodes) {
        require(e.dim() == r, "build_pairs: episodes have different measurement dimensions");
        require(e.length() >= min_pair_length(k),
                "build_pairs: series of length " + std::to_string(e.length()) + " too short; need at least " +
                    std::to_string(min_pair_length(k)) + " samples for k = " + std::to_string(k));
        total += e.length() - k;
    }
    PairSet ps;
    ps.windows0.resize(total, k * r);
    ps.windows1.resize(total, k * r);
    ps.targets0.resize(total, r);
    ps.targets1.resize(total, r);
    Eigen::Index row = 0;
    for (std::size_t ei = 0; ei < episodes.size(); ++ei) {
        const Matrix w = delay_windows(episodes[ei].values, k);
        const Eigen::Index np = w.rows() - 1;
        ps.windows0.middleRows(row, np) = w.topRows(np);
        ps.windows1.middleRows(row, np) = w.bottomRows(np);
        ps.targets0.middleRows(row, np) = w.topRows(np).leftCols(r);
        ps.targets1.middleRows(row, np) = w.bottomRows(np).leftCols(r);
        for (Eigen::Index j = 0; j < np; ++j) {
            ps.episode.push_back(ei);
            ps.time.push_back(k - 1 + j);
        }
        row += np;
    }
    return ps;
}

inline PairSet build_pairs(const TimeSeries& series, Eigen::Index k)
{
    return build_pairs(EpisodeList{series}, k);
}

// ---------------------------------------------------------------------------
// RSS loss
// ---------------------------------------------------------------------------

struct RssResult
{
    double loss = 0.0;
    Matrix grad_y0;  ///< dL/dY0, n x b
    Matrix grad_y1;  ///< dL/dY1, n x b
    Matrix a;        ///< Y1 Y0^+, n x n
    Eigen::Index rank = 0;
};

namespace detail {

inline RssResult rss_impl(const Matrix& y0, const Matrix& y1, bool with_grad, std::optional<double> rank_tol)
{
    require(y0.rows() == y1.rows() && y0.cols() == y1.cols(),
            "rss_loss: Y0 is " + shape_str(y0.rows(), y0.cols()) + " but Y1 is " + shape_str(y1.rows(), y1.cols()));
    require(y0.cols() >= 1 && y0.rows() >= 1, "rss_loss: empty data matrices");

    RssResult out;
    const Eigen::Index n = y0.rows();
    if (y0.isZero(0.0)) {
        out.loss = y1.squaredNorm();
        out.a = Matrix::Zero(n, n);
        if (with_grad) {
            out.grad_y1 = 2.0 * y1;
            out.grad_y0 = Matrix::Zero(y0.rows(), y0.cols());
        }
        return out;
    }
    const auto f = linalg::svd(y0);
    const double tol = rank_tol.value_or(linalg::default_rank_tol(y0.rows(), y0.cols()));
    const Eigen::Index rank = linalg::numerical_rank(f.S, tol);
    out.rank = rank;
    // Projection onto the row space of Y0 without forming the b x b projector.
    const Matrix vr = f.V.leftCols(rank);
    const Matrix y1v = y1 * vr;
    const Matrix resid = y1 - y1v * vr.transpose();
    out.loss = resid.squaredNorm();
    out.a = y1v * f.S.head(rank).cwiseInverse().asDiagonal() * f.U.leftCols(rank).transpose();
    if (with_grad) {
        out.grad_y1 = 2.0 * resid;
        out.grad_y0 = -2.0 * out.a.transpose() * resid;
    }
    return out;
}

} // namespace detail

/// || Y1 (I - Y0^+ Y0) ||_F^2.
inline double rss_loss(const Matrix& y0, const Matrix& y1, std::optional<double> rank_tol = std::nullopt)
{
    return detail::rss_impl(y0, y1, false, rank_tol).loss;
}

///
/// Loss with gradients. With R = Y1 (I - Y0^+ Y0) and A = Y1 Y0^+:
/// dL/dY1 = 2 R and dL/dY0 = -2 A^T R.
///
inline RssResult rss_loss_grad(const Matrix& y0, const Matrix& y1, std::optional<double> rank_tol = std::nullopt)
{
    return detail::rss_impl(y0, y1, true, rank_tol);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct Hyperparameters
{
    Eigen::Index k = 8;        ///< maximum lag
    Eigen::Index p = 0;        ///< embedded dimension; 0 selects min(k*r, 2r+1)
    Eigen::Index n = 4;        ///< number of observables
    double alpha = 1.0;        ///< reconstruction weight
    double l1_phi = 0.0;       ///< L1 coefficient on W_phi
    int hidden_layers = 1;     ///< per MLP
    Eigen::Index hidden_size = 0;  ///< hidden width; 0 = mean of the MLP's input and output sizes

    Eigen::Index resolved_p(Eigen::Index r) const { return p > 0 ? p : std::min(k * r, 2 * r + 1); }
};

/// Trained (or freshly initialized) embedder + observables + reconstructor.
struct LkisModel
{
    Embedder embedder;
    nn::Mlp g;
    nn::Mlp h;
    double alpha = 1.0;
    double l1_phi = 0.0;
    double delta_t = 1.0;
    /// Measurements are standardized as (y - offset) / scale before use.
    Vector offset;
    Vector scale;

    Eigen::Index k() const { return embedder.k; }
    Eigen::Index r() const { return embedder.r; }
    Eigen::Index p() const { return embedder.p(); }
    Eigen::Index n() const { return g.output_size(); }

    void validate() const
    {
        require(alpha >= 0.0, "LkisModel: alpha must be >= 0");
        require(l1_phi >= 0.0, "LkisModel: l1_phi must be >= 0");
        require(delta_t > 0.0, "LkisModel: delta_t must be > 0");
        require(embedder.weight.cols() == embedder.k * embedder.r, "LkisModel: embedder shape inconsistent");
        require(g.input_size() == p(), "LkisModel: g input size " + std::to_string(g.input_size()) +
                                           " != p = " + std::to_string(p()));
        require(h.input_size() == n(), "LkisModel: h input size must equal n");
        require(h.output_size() == r(), "LkisModel: h output size must equal r");
        require(offset.size() == r() && scale.size() == r(), "LkisModel: standardization has wrong size");
        require((scale.array() > 0.0).all(), "LkisModel: standardization scale must be positive");
        require(embedder.weight.allFinite(), "LkisModel: non-finite embedder weights");
    }

    Matrix standardize(const Matrix& y) const
    {
        Matrix z = y.rowwise() - offset.transpose();
        return z.array().rowwise() / scale.transpose().array();
    }

    Matrix unstandardize(const Matrix& z) const
    {
        Matrix y = z.array().rowwise() * scale.transpose().array();
        return y.rowwise() + offset.transpose();
    }

    /// Standardize raw stacked windows (N x kr).
    Matrix standardize_windows(const Matrix& windows) const
    {
        Matrix out = windows;
        for (Eigen::Index lag = 0; lag < k(); ++lag) out.middleCols(lag * r(), r()) = standardize(windows.middleCols(lag * r(), r()));
        return out;
    }

    /// Eval-mode observables (N x n) for raw stacked windows (N x kr).
    Matrix observe(const Matrix& raw_windows) const
    {
        return g.predict(embedder.embed_rows(standardize_windows(raw_windows)));
    }

    /// Eval-mode reconstruction (N x r, raw units) from observables (N x n).
    Matrix reconstruct(const Matrix& observables) const
    {
        return unstandardize(h.predict(observables));
    }
};

/// Fresh model: random embedder, He-initialized g (p -> n) and h (n -> r).
inline LkisModel make_model(Eigen::Index r, const Hyperparameters& hp, std::uint64_t seed, double delta_t = 1.0)
{
    require(r >= 1, "make_model: r must be >= 1");
    require(hp.k >= 1 && hp.n >= 1, "make_model: k and n must be >= 1");
    require(hp.alpha >= 0.0 && hp.l1_phi >= 0.0, "make_model: alpha and l1_phi must be >= 0");
    const Eigen::Index p = hp.resolved_p(r);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(hp.k * r)));
    Matrix w(p, hp.k * r);
    for (Eigen::Index i = 0; i < p; ++i)
        for (Eigen::Index j = 0; j < hp.k * r; ++j) w(i, j) = normal(rng);

    LkisModel m;
    m.embedder = Embedder(std::move(w), hp.k, r);
    m.g = nn::Mlp(nn::default_layer_sizes(p, hp.n, hp.hidden_layers, hp.hidden_size), seed + 1);
    m.h = nn::Mlp(nn::default_layer_sizes(hp.n, r, hp.hidden_layers, hp.hidden_size), seed + 2);
    m.alpha = hp.alpha;
    m.l1_phi = hp.l1_phi;
    m.delta_t = delta_t;
    m.offset = Vector::Zero(r);
    m.scale = Vector::Ones(r);
    return m;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// sum_j || y_j - h(g(x~_j)) ||^2 over rows, in standardized units.
inline double rec_loss(const LkisModel& model, const Matrix& embedded, const Matrix& targets)
{
    require(embedded.rows() >= 1, "rec_loss: empty batch");
    require(embedded.rows() == targets.rows(), "rec_loss: batch and target row counts differ");
    require(embedded.cols() == model.p() && targets.cols() == model.r(), "rec_loss: shape mismatch");
    return (model.h.predict(model.g.predict(embedded)) - targets).squaredNorm();
}

struct LossComponents
{
    double rss = 0.0;
    double rec = 0.0;
    double l1 = 0.0;
    double total = 0.0;
};

///
/// Loss on a pair set. In Eval mode the networks use their running
/// statistics; in Train mode one batchnorm statistic is taken over the
/// stacked [x~_t; x~_{t+1}] rows and running statistics are left unchanged.
///
inline LossComponents total_loss(const LkisModel& model, const PairSet& pairs, nn::NetMode mode = nn::NetMode::Eval)
{
    require(pairs.size() >= 1, "total_loss: empty pair set");
    const Eigen::Index b = pairs.size();
    Matrix win(2 * b, pairs.windows0.cols());
    win << pairs.windows0, pairs.windows1;
    Matrix tgt(2 * b, pairs.targets0.cols());
    tgt << pairs.targets0, pairs.targets1;
    const Matrix x = model.embedder.embed_rows(model.standardize_windows(win));
    const Matrix t = model.standardize(tgt);

    Matrix gout, hout;
    if (mode == nn::NetMode::Eval) {
        gout = model.g.predict(x);
        hout = model.h.predict(gout);
    } else {
        auto g = model.g;
        auto h = model.h;
        gout = g.forward(x, mode, false).output;
        hout = h.forward(gout, mode, false).output;
    }
    LossComponents c;
    c.rss = rss_loss(gout.topRows(b).transpose(), gout.bottomRows(b).transpose());
    c.rec = (hout - t).squaredNorm();
    c.l1 = model.l1_phi * model.embedder.weight.cwiseAbs().sum();
    c.total = c.rss + model.alpha * c.rec + c.l1;
    return c;
}

/// Gradients of the total loss for one batch, laid out like LkisModel.
struct ModelGrads
{
    Matrix embedder;
    nn::MlpGrads g;
    nn::MlpGrads h;
};

struct BatchEvaluation
{
    LossComponents loss;
    ModelGrads grads;
};

///
/// Train-mode loss and exact gradient for one batch of pairs. The RSS
/// gradient flows through g and W_phi; the reconstruction gradient through
/// h, g and W_phi. Running statistics are updated iff `update_running`.
///
inline BatchEvaluation evaluate_batch(LkisModel& model, const PairSet& batch, bool update_running = true)
{
    const Eigen::Index b = batch.size();
    require(b >= 2, "evaluate_batch: need at least 2 pairs");
    Matrix win(2 * b, batch.windows0.cols());
    win << batch.windows0, batch.windows1;
    Matrix tgt(2 * b, batch.targets0.cols());
    tgt << batch.targets0, batch.targets1;
    const Matrix stacked = model.standardize_windows(win);
    const Matrix x = model.embedder.embed_rows(stacked);
    const Matrix t = model.standardize(tgt);

    const auto gc = model.g.forward(x, nn::NetMode::Train, update_running);
    const auto hc = model.h.forward(gc.output, nn::NetMode::Train, update_running);

    BatchEvaluation ev;
    const RssResult rss = rss_loss_grad(gc.output.topRows(b).transpose(), gc.output.bottomRows(b).transpose());
    const Matrix hres = hc.output - t;
    ev.loss.rss = rss.loss;
    ev.loss.rec = hres.squaredNorm();
    ev.loss.l1 = model.l1_phi * model.embedder.weight.cwiseAbs().sum();
    ev.loss.total = ev.loss.rss + model.alpha * ev.loss.rec + ev.loss.l1;

    ev.grads.g = model.g.zero_grads();
    ev.grads.h = model.h.zero_grads();
    model.h.backward(hc, 2.0 * model.alpha * hres, ev.grads.h);

    Matrix dg(2 * b, model.n());
    dg << rss.grad_y0.transpose(), rss.grad_y1.transpose();
    dg += ev.grads.h.input;
    model.g.backward(gc, dg, ev.grads.g);

    ev.grads.embedder = ev.grads.g.input.transpose() * stacked;
    if (model.l1_phi > 0.0)
        ev.grads.embedder += model.l1_phi * model.embedder.weight.unaryExpr([](double v) {
            return static_cast<double>((v > 0.0) - (v < 0.0));
        });
    return ev;
}

inline std::vector<nn::ParamBlock> model_parameters(LkisModel& m)
{
    std::vector<nn::ParamBlock> out{{"embedder.weight", {m.embedder.weight.data(), static_cast<std::size_t>(m.embedder.weight.size())}}};
    for (auto& b : m.g.parameters()) out.push_back({"g." + b.name, b.data});
    for (auto& b : m.h.parameters()) out.push_back({"h." + b.name, b.data});
    return out;
}

inline std::vector<nn::ParamBlock> grad_blocks(ModelGrads& gr)
{
    std::vector<nn::ParamBlock> out{{"embedder.weight", {gr.embedder.data(), static_cast<std::size_t>(gr.embedder.size())}}};
    for (auto& b : gr.g.blocks()) out.push_back({"g." + b.name, b.data});
    for (auto& b : gr.h.blocks()) out.push_back({"h." + b.name, b.data});
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig
{
    Eigen::Index batch_size = 200;
    int max_epochs = 200;
    nn::OptimizerConfig optimizer{};
    /// Multiplicative learning-rate decay applied after every epoch.
    double lr_decay = 1.0;
    /// Fraction of the data held out for model selection when no explicit
    /// validation set is given: whole episodes when there are several,
    /// otherwise the trailing pairs.
    double validation_fraction = 0.0;
    /// Epochs without validation improvement before stopping; 0 disables.
    int patience = 0;
    std::uint64_t seed = 0;
    bool monitor_full_batch = false;
    /// Fit per-component mean/std of the training data and standardize.
    bool standardize = false;

    void validate() const
    {
        require(batch_size >= 2, "TrainConfig: batch_size must be >= 2");
        require(max_epochs >= 1, "TrainConfig: max_epochs must be >= 1");
        require(validation_fraction >= 0.0 && validation_fraction < 1.0,
                "TrainConfig: validation_fraction must be in [0, 1)");
        require(patience >= 0, "TrainConfig: patience must be >= 0");
        require(optimizer.learning_rate > 0.0, "TrainConfig: learning rate must be > 0");
    }
};

struct StepRecord
{
    std::int64_t step = 0;
    int epoch = 0;
    double batch_rss = 0.0;
    double batch_rec = 0.0;
    std::optional<double> full_batch_rss;
    std::optional<double> validation_loss;
};

struct LossReport
{
    std::vector<StepRecord> steps;
    int best_epoch = -1;
    double best_validation = std::numeric_limits<double>::infinity();
    int threads = 1;

    /// Full-batch RSS values in epoch order (only recorded when monitored).
    std::vector<double> full_batch_curve() const
    {
        std::vector<double> v;
        for (const auto& s : steps)
            if (s.full_batch_rss) v.push_back(*s.full_batch_rss);
        return v;
    }
};

/// Non-finite loss during training; carries the report up to that point.
class TrainingDiverged : public Error
{
public:
    TrainingDiverged(const std::string& what, LossReport r) : Error(what), report(std::move(r)) {}
    LossReport report;
};

struct TrainResult
{
    LkisModel model;
    LossReport report;
};

namespace detail {

inline void fit_standardization(LkisModel& m, const EpisodeList& eps)
{
    const Eigen::Index r = m.r();
    Vector sum = Vector::Zero(r), sq = Vector::Zero(r);
    double count = 0.0;
    for (const auto& e : eps) {
        sum += e.values.colwise().sum().transpose();
        sq += e.values.array().square().colwise().sum().matrix().transpose();
        count += static_cast<double>(e.length());
    }
    m.offset = sum / count;
    Vector var = sq / count - m.offset.cwiseProduct(m.offset);
    m.scale = var.cwiseMax(0.0).cwiseSqrt();
    for (Eigen::Index i = 0; i < r; ++i)
        if (!(m.scale(i) > 1e-12)) m.scale(i) = 1.0;
}

inline double full_batch_rss(const LkisModel& model, const PairSet& pairs)
{
    return total_loss(model, pairs, nn::NetMode::Train).rss;
}

} // namespace detail

///
/// Mini-batch training. Each epoch visits a seeded permutation of the
/// training pairs in batches of `batch_size` (a trailing remainder smaller
/// than two pairs is skipped). After every epoch the validation loss (Eval
/// mode; the training set when there is no validation data) selects the
/// returned snapshot.
///
inline TrainResult train(const EpisodeList& episodes, const Hyperparameters& hp, const TrainConfig& cfg,
                         const EpisodeList& validation = {})
{
    cfg.validate();
    require(!episodes.empty(), "train: no data");
    const Eigen::Index r = episodes.front().dim();
    const double dt = episodes.front().delta_t;

    EpisodeList train_eps = episodes;
    EpisodeList val_eps = validation;
    std::mt19937_64 rng(cfg.seed);
    if (val_eps.empty() && cfg.validation_fraction > 0.0) {
        if (train_eps.size() > 1) {
            std::vector<std::size_t> order(train_eps.size());
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::shuffle(order.begin(), order.end(), rng);
            const auto nval = std::max<std::size_t>(
                1, static_cast<std::size_t>(std::llround(cfg.validation_fraction * static_cast<double>(order.size()))));
            require(nval < order.size(), "train: validation split leaves no training episodes");
            EpisodeList tr, va;
            for (std::size_t i = 0; i < order.size(); ++i) (i < nval ? va : tr).push_back(train_eps[order[i]]);
            train_eps = std::move(tr);
            val_eps = std::move(va);
        } else {
            const TimeSeries& s = train_eps.front();
            const auto nval = static_cast<Eigen::Index>(std::llround(cfg.validation_fraction * static_cast<double>(s.length())));
            if (nval >= hp.k + 1 && s.length() - nval >= hp.k + 1) {
                TimeSeries a{s.values.topRows(s.length() - nval), s.delta_t};
                TimeSeries v{s.values.bottomRows(nval), s.delta_t};
                train_eps = {a};
                val_eps = {v};
            }
        }
    }

    const PairSet pairs = build_pairs(train_eps, hp.k);
    require(pairs.size() >= 2, "train: need at least 2 training pairs");
    std::optional<PairSet> val_pairs;
    if (!val_eps.empty()) val_pairs = build_pairs(val_eps, hp.k);

    LkisModel model = make_model(r, hp, cfg.seed, dt);
    if (cfg.standardize) detail::fit_standardization(model, train_eps);
    nn::Optimizer opt(cfg.optimizer);

    TrainResult best{model, {}};
    LossReport report;
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(pairs.size()));
    std::iota(perm.begin(), perm.end(), Eigen::Index{0});
    const Eigen::Index bs = std::min(cfg.batch_size, pairs.size());
    int since_best = 0;
    std::int64_t step = 0;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::shuffle(perm.begin(), perm.end(), rng);
        for (Eigen::Index start = 0; start + 2 <= pairs.size(); start += bs) {
            const Eigen::Index len = std::min(bs, pairs.size() - start);
            if (len < 2) break;
            std::vector<Eigen::Index> idx(perm.begin() + start, perm.begin() + start + len);
            const PairSet batch = pairs.subset(idx);
            BatchEvaluation ev = evaluate_batch(model, batch);
            StepRecord rec{++step, epoch, ev.loss.rss, ev.loss.rec, std::nullopt, std::nullopt};
            if (!std::isfinite(ev.loss.total)) {
                report.steps.push_back(rec);
                throw TrainingDiverged("train: non-finite loss at epoch " + std::to_string(epoch), report);
            }
            auto grads = grad_blocks(ev.grads);
            try {
                opt.step(model_parameters(model), grads);
            } catch (const Error& e) {
                report.steps.push_back(rec);
                throw TrainingDiverged(std::string("train: ") + e.what(), report);
            }
            report.steps.push_back(rec);
        }
        if (report.steps.empty()) throw Error("train: no batch could be formed");

        auto& last = report.steps.back();
        if (cfg.monitor_full_batch) last.full_batch_rss = detail::full_batch_rss(model, pairs);
        const LossComponents v = total_loss(model, val_pairs ? *val_pairs : pairs, nn::NetMode::Eval);
        last.validation_loss = v.total;
        if (!std::isfinite(v.total)) throw TrainingDiverged("train: non-finite validation loss", report);
        if (v.total < report.best_validation) {
            report.best_validation = v.total;
            report.best_epoch = epoch;
            best.model = model;
            since_best = 0;
        } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
            break;
        }
        if (cfg.lr_decay != 1.0) opt.set_learning_rate(opt.config().learning_rate * cfg.lr_decay);
    }
    best.report = std::move(report);
    return best;
}

inline TrainResult train(const TimeSeries& series, const Hyperparameters& hp, const TrainConfig& cfg)
{
    return train(EpisodeList{series}, hp, cfg);
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline constexpr int kModelFormatVersion = 1;

namespace detail {

inline nlohmann::json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vector json_vec(const nlohmann::json& j)
{
    auto v = j.get<std::vector<double>>();
    return Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

} // namespace detail

inline nlohmann::json model_to_json(const LkisModel& m)
{
    nlohmann::json j;
    j["format"] = "lkis.model";
    j["version"] = kModelFormatVersion;
    j["hyperparameters"] = {{"k", m.k()}, {"p", m.p()}, {"n", m.n()}, {"r", m.r()},
                            {"alpha", m.alpha}, {"l1_phi", m.l1_phi}, {"delta_t", m.delta_t}};
    std::vector<double> w;
    for (Eigen::Index i = 0; i < m.embedder.weight.rows(); ++i)
        for (Eigen::Index c = 0; c < m.embedder.weight.cols(); ++c) w.push_back(m.embedder.weight(i, c));
    j["embedder"] = {{"rows", m.embedder.weight.rows()}, {"cols", m.embedder.weight.cols()}, {"values", w}};
    j["standardization"] = {{"offset", detail::vec_json(m.offset)}, {"scale", detail::vec_json(m.scale)}};
    j["g"] = nn::mlp_to_json(m.g);
    j["h"] = nn::mlp_to_json(m.h);
    return j;
}

inline LkisModel model_from_json(const nlohmann::json& j)
{
    if (j.value("format", std::string{}) != "lkis.model") throw ParseError("model json: missing or wrong 'format'");
    if (j.value("version", 0) != kModelFormatVersion) throw ParseError("model json: unsupported version");
    const auto& hp = j.at("hyperparameters");
    const auto k = hp.at("k").get<Eigen::Index>();
    const auto r = hp.at("r").get<Eigen::Index>();
    const auto rows = j.at("embedder").at("rows").get<Eigen::Index>();
    const auto cols = j.at("embedder").at("cols").get<Eigen::Index>();
    auto vals = j.at("embedder").at("values").get<std::vector<double>>();
    if (rows < 1 || cols < 1 || static_cast<Eigen::Index>(vals.size()) != rows * cols)
        throw ParseError("model json: embedder values do not match its shape");
    Matrix w(rows, cols);
    std::size_t idx = 0;
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index c = 0; c < cols; ++c) w(i, c) = vals[idx++];

    LkisModel m;
    try {
        m.embedder = Embedder(std::move(w), k, r);
    } catch (const InvalidArgument& e) {
        throw ParseError(std::string("model json: ") + e.what());
    }
    m.g = nn::mlp_from_json(j.at("g"));
    m.h = nn::mlp_from_json(j.at("h"));
    m.alpha = hp.at("alpha").get<double>();
    m.l1_phi = hp.at("l1_phi").get<double>();
    m.delta_t = hp.at("delta_t").get<double>();
    m.offset = detail::json_vec(j.at("standardization").at("offset"));
    m.scale = detail::json_vec(j.at("standardization").at("scale"));
    if (hp.at("p").get<Eigen::Index>() != m.p() || hp.at("n").get<Eigen::Index>() != m.n())
        throw ParseError("model json: hyperparameters disagree with stored shapes");
    try {
        m.validate();
    } catch (const InvalidArgument& e) {
        throw ParseError(std::string("model json: ") + e.what());
    }
    return m;
}

inline nlohmann::json report_to_json(const LossReport& r)
{
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : r.steps) {
        nlohmann::json e{{"step", s.step}, {"epoch", s.epoch}, {"batch_rss", s.batch_rss}, {"batch_rec", s.batch_rec}};
        e["full_batch_rss"] = s.full_batch_rss ? nlohmann::json(*s.full_batch_rss) : nlohmann::json(nullptr);
        e["validation_loss"] = s.validation_loss ? nlohmann::json(*s.validation_loss) : nlohmann::json(nullptr);
        steps.push_back(e);
    }
    return {{"steps", steps}, {"best_epoch", r.best_epoch}, {"best_validation", r.best_validation}, {"threads", r.threads}};
}

} // namespace lkis

#endif // LKIS_LKIS_MODEL_HPP
