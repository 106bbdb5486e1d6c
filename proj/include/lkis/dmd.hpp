///
/// \file dmd.hpp
///
/// Dynamic mode decomposition over any source of observables: snapshot
/// matrices, A = Y1 Y0^+, biorthonormal modes, eigenfunction values, modal
/// prediction, and the linear Hankel / extended (dictionary) baselines.
///
#ifndef LKIS_DMD_HPP
#define LKIS_DMD_HPP

#include <cmath>
#include <concepts>
#include <functional>
#include <numbers>
#include <optional>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "linalg.hpp"
#include "lkis_model.hpp"
#include "series.hpp"

namespace lkis::dmd {

/// Snapshot pair; column t of y1 is the observable one step after column t of y0.
struct DataMatrices
{
    Matrix y0;
    Matrix y1;
    std::string source;
};

struct DmdResult
{
    Matrix a;
    linalg::ComplexEigenSystem eigen;  ///< biorthonormal
    double delta_t = 1.0;
    CVector amplitudes;                ///< W c = first snapshot, least squares

    Eigen::Index size() const { return a.rows(); }
    const CVector& eigenvalues() const { return eigen.eigenvalues; }
};

/// Snapshots g(x_0..x_m) as columns of an n x (m+1) matrix.
inline DataMatrices build_data_matrices(const Matrix& snapshots, std::string source = "raw")
{
    require(snapshots.cols() >= 2, "build_data_matrices: need at least 2 snapshots, got " + std::to_string(snapshots.cols()));
    const Eigen::Index m = snapshots.cols() - 1;
    return {snapshots.leftCols(m), snapshots.rightCols(m), std::move(source)};
}

/// Per-episode shift, then concatenation.
inline DataMatrices build_data_matrices(const std::vector<Matrix>& episodes, std::string source = "raw")
{
    require(!episodes.empty(), "build_data_matrices: no episodes");
    const Eigen::Index n = episodes.front().rows();
    Eigen::Index total = 0;
    for (const auto& e : episodes) {
        require(e.rows() == n, "build_data_matrices: episodes disagree on observable dimension");
        require(e.cols() >= 2, "build_data_matrices: every episode needs at least 2 snapshots");
        total += e.cols() - 1;
    }
    DataMatrices dm{Matrix(n, total), Matrix(n, total), std::move(source)};
    Eigen::Index col = 0;
    for (const auto& e : episodes) {
        const Eigen::Index m = e.cols() - 1;
        dm.y0.middleCols(col, m) = e.leftCols(m);
        dm.y1.middleCols(col, m) = e.rightCols(m);
        col += m;
    }
    return dm;
}

///
/// A = Y1 Y0^+, eigendecomposition, biorthonormalization. Repeated
/// eigenvalues of a diagonalizable A (e.g. the null space of a rank-deficient
/// Y0) fall back to Z = W^{-H}.
///
inline DmdResult dmd_fit(const DataMatrices& dm, double delta_t = 1.0, std::optional<double> rank_tol = std::nullopt)
{
    require(dm.y0.rows() == dm.y1.rows() && dm.y0.cols() == dm.y1.cols(), "dmd_fit: Y0 and Y1 shapes differ");
    require(!dm.y0.isZero(0.0), "dmd_fit: Y0 is identically zero");
    require(delta_t > 0.0, "dmd_fit: delta_t must be > 0");

    DmdResult res;
    res.delta_t = delta_t;
    res.a = dm.y1 * linalg::pinv(dm.y0, rank_tol);
    const auto sys = linalg::eig_general(res.a);
    try {
        res.eigen = linalg::biorthonormalize(sys);
    } catch (const DegenerateEigenvalues&) {
        res.eigen = linalg::biorthonormalize_by_inverse(sys);
    }
    const CVector first = dm.y0.col(0).cast<Complex>();
    res.amplitudes = res.eigen.right.colPivHouseholderQr().solve(first);
    return res;
}

/// phi_i(x_t) = z_i^H g(x_t); observables as columns (n x m).
inline CMatrix eigenfunction_values(const DmdResult& res, const Matrix& observables)
{
    require(observables.rows() == res.size(), "eigenfunction_values: observables have " +
                                                  std::to_string(observables.rows()) + " rows, A is " +
                                                  std::to_string(res.size()) + "-dimensional");
    return res.eigen.left.adjoint() * observables.cast<Complex>();
}

/// W diag(lambda) Z^H; equals A when the modes are biorthonormal.
inline CMatrix modal_operator(const DmdResult& res)
{
    return res.eigen.right * res.eigen.eigenvalues.asDiagonal() * res.eigen.left.adjoint();
}

///
/// Continuous-time eigenvalues ln(lambda)/dt on the principal branch
/// (imaginary parts in (-pi/dt, pi/dt]).
///
inline CVector to_continuous(const DmdResult& res)
{
    require(res.delta_t > 0.0, "to_continuous: delta_t must be > 0");
    CVector out(res.eigenvalues().size());
    for (Eigen::Index i = 0; i < out.size(); ++i) {
        const Complex l = res.eigenvalues()(i);
        if (l == Complex(0.0, 0.0)) throw InvalidArgument("to_continuous: eigenvalue " + std::to_string(i) + " is exactly zero");
        out(i) = std::log(l) / res.delta_t;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Observable sources
// ---------------------------------------------------------------------------

///
/// Anything that maps stacked delay windows to observables and observables
/// back to measurements: LkisModel, HankelObservables.
///
template <typename M>
concept ObservableModel = requires(const M& m, const Matrix& x) {
    { m.k() } -> std::convertible_to<Eigen::Index>;
    { m.r() } -> std::convertible_to<Eigen::Index>;
    { m.n() } -> std::convertible_to<Eigen::Index>;
    { m.observe(x) } -> std::convertible_to<Matrix>;
    { m.reconstruct(x) } -> std::convertible_to<Matrix>;
};

/// Raw measurements stacked over `delay` lags; reconstruction selects y_t.
struct HankelObservables
{
    Eigen::Index delay = 1;
    Eigen::Index dim = 1;

    Eigen::Index k() const { return delay; }
    Eigen::Index r() const { return dim; }
    Eigen::Index n() const { return delay * dim; }
    Matrix observe(const Matrix& windows) const { return windows; }
    Matrix reconstruct(const Matrix& g) const { return g.leftCols(dim); }
};

static_assert(ObservableModel<LkisModel>);
static_assert(ObservableModel<HankelObservables>);

/// Observables for every window of every episode, as n x (windows) matrices.
template <ObservableModel M>
std::vector<Matrix> episode_observables(const M& model, const EpisodeList& episodes)
{
    std::vector<Matrix> out;
    for (const auto& e : episodes) {
        require(e.dim() == model.r(), "episode_observables: measurement dimension mismatch");
        out.push_back(model.observe(delay_windows(e.values, model.k())).transpose());
    }
    return out;
}

/// Fit DMD on the observables a model produces on the given episodes.
template <ObservableModel M>
DmdResult fit_model(const M& model, const EpisodeList& episodes, std::optional<double> rank_tol = std::nullopt)
{
    require(!episodes.empty(), "fit_model: no data");
    return dmd_fit(build_data_matrices(episode_observables(model, episodes), "model"), episodes.front().delta_t, rank_tol);
}

inline DmdResult hankel_dmd(const EpisodeList& episodes, Eigen::Index delay)
{
    require(delay >= 1, "hankel_dmd: delay must be >= 1");
    require(!episodes.empty(), "hankel_dmd: no data");
    for (const auto& e : episodes)
        require(e.length() >= delay + 1, "hankel_dmd: series of length " + std::to_string(e.length()) +
                                             " too short for delay " + std::to_string(delay));
    HankelObservables h{delay, episodes.front().dim()};
    return dmd_fit(build_data_matrices(episode_observables(h, episodes), "hankel"), episodes.front().delta_t);
}

inline DmdResult hankel_dmd(const TimeSeries& series, Eigen::Index delay)
{
    return hankel_dmd(EpisodeList{series}, delay);
}

// ---------------------------------------------------------------------------
// Dictionaries
// ---------------------------------------------------------------------------

struct DictionaryFunction
{
    std::string name;
    std::function<double(const Vector&)> f;
};

struct Dictionary
{
    std::string name;
    std::vector<DictionaryFunction> functions;

    Eigen::Index size() const { return static_cast<Eigen::Index>(functions.size()); }

    /// Evaluate on states (rows) to an n x T matrix.
    Matrix evaluate(const Matrix& states) const
    {
        require(!functions.empty(), "Dictionary: empty dictionary");
        Matrix out(size(), states.rows());
        for (Eigen::Index t = 0; t < states.rows(); ++t) {
            const Vector x = states.row(t).transpose();
            for (Eigen::Index i = 0; i < size(); ++i) {
                const double v = functions[static_cast<std::size_t>(i)].f(x);
                if (!std::isfinite(v))
                    throw Error("Dictionary '" + name + "': function '" + functions[static_cast<std::size_t>(i)].name +
                                "' is non-finite at state index " + std::to_string(t));
                out(i, t) = v;
            }
        }
        return out;
    }
};

/// Identity coordinates x1..xd.
inline Dictionary linear_dictionary(Eigen::Index d)
{
    Dictionary dict{"linear", {}};
    for (Eigen::Index i = 0; i < d; ++i)
        dict.functions.push_back({"x" + std::to_string(i + 1), [i](const Vector& x) { return x(i); }});
    return dict;
}

/// {x1, x2, x1^2}.
inline Dictionary fixed_point_dictionary()
{
    return {"x1,x2,x1^2",
            {{"x1", [](const Vector& x) { return x(0); }},
             {"x2", [](const Vector& x) { return x(1); }},
             {"x1^2", [](const Vector& x) { return x(0) * x(0); }}}};
}

/// All monomials of total degree 1..degree (optionally with the constant).
inline Dictionary monomial_dictionary(Eigen::Index d, int degree, bool with_constant = false)
{
    Dictionary dict{"monomials", {}};
    std::vector<int> exps(static_cast<std::size_t>(d), 0);
    std::function<void(Eigen::Index, int)> rec = [&](Eigen::Index var, int left) {
        if (var == d) {
            int total = 0;
            for (int e : exps) total += e;
            if (total == 0 && !with_constant) return;
            std::string nm;
            for (Eigen::Index i = 0; i < d; ++i) {
                const int e = exps[static_cast<std::size_t>(i)];
                if (e == 0) continue;
                if (!nm.empty()) nm += "*";
                nm += "x" + std::to_string(i + 1) + (e > 1 ? "^" + std::to_string(e) : "");
            }
            if (nm.empty()) nm = "1";
            auto ex = exps;
            dict.functions.push_back({nm, [ex](const Vector& x) {
                                          double v = 1.0;
                                          for (std::size_t i = 0; i < ex.size(); ++i)
                                              for (int p = 0; p < ex[i]; ++p) v *= x(static_cast<Eigen::Index>(i));
                                          return v;
                                      }});
            return;
        }
        for (int e = 0; e <= left; ++e) {
            exps[static_cast<std::size_t>(var)] = e;
            rec(var + 1, left - e);
        }
        exps[static_cast<std::size_t>(var)] = 0;
    };
    rec(0, degree);
    return dict;
}

/// Extended DMD on state episodes (rows = states).
inline DmdResult extended_dmd(const EpisodeList& states, const Dictionary& dict)
{
    require(dict.size() >= 1, "extended_dmd: dictionary is empty");
    require(!states.empty(), "extended_dmd: no data");
    std::vector<Matrix> obs;
    for (const auto& e : states) obs.push_back(dict.evaluate(e.values));
    return dmd_fit(build_data_matrices(obs, "dictionary:" + dict.name), states.front().delta_t);
}

inline DmdResult extended_dmd(const TimeSeries& states, const Dictionary& dict)
{
    return extended_dmd(EpisodeList{states}, dict);
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

///
/// Multi-step forecasts for many starting windows at once. `windows` holds
/// raw stacked delay windows (N x kr). Returns one N x r matrix per horizon
/// step 1..horizon. Observables advance by W diag(lambda) Z^H; the real part
/// is mapped back to measurements.
///
template <ObservableModel M>
std::vector<Matrix> predict_windows(const M& model, const DmdResult& res, const Matrix& windows, Eigen::Index horizon)
{
    require(horizon >= 1, "predict: horizon must be >= 1");
    require(res.size() == model.n(), "predict: DMD result has dimension " + std::to_string(res.size()) +
                                         " but the model produces " + std::to_string(model.n()) + " observables");
    require(windows.cols() == model.k() * model.r(), "predict: window width does not match the model");
    const CMatrix prop = modal_operator(res);
    CMatrix g = model.observe(windows).transpose().template cast<Complex>();  // n x N
    std::vector<Matrix> out;
    out.reserve(static_cast<std::size_t>(horizon));
    for (Eigen::Index s = 0; s < horizon; ++s) {
        g = prop * g;
        out.push_back(model.reconstruct(g.real().transpose()));
    }
    return out;
}

/// Forecast from a chronological history of the last k measurements (k x r).
template <ObservableModel M>
Matrix predict(const M& model, const DmdResult& res, const Matrix& history, Eigen::Index horizon)
{
    require(history.rows() == model.k() && history.cols() == model.r(),
            "predict: history must be " + shape_str(model.k(), model.r()));
    const Matrix w = window_from_history(history).transpose();
    const auto steps = predict_windows(model, res, w, horizon);
    Matrix out(horizon, model.r());
    for (Eigen::Index s = 0; s < horizon; ++s) out.row(s) = steps[static_cast<std::size_t>(s)].row(0);
    return out;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json cmatrix_json(const CMatrix& m)
{
    nlohmann::json re = nlohmann::json::array(), im = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        std::vector<double> r, c;
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            r.push_back(m(i, j).real());
            c.push_back(m(i, j).imag());
        }
        re.push_back(r);
        im.push_back(c);
    }
    return {{"re", re}, {"im", im}};
}

inline CMatrix json_cmatrix(const nlohmann::json& j)
{
    auto re = j.at("re").get<std::vector<std::vector<double>>>();
    auto im = j.at("im").get<std::vector<std::vector<double>>>();
    if (re.size() != im.size()) throw ParseError("complex matrix: re/im row counts differ");
    const auto rows = static_cast<Eigen::Index>(re.size());
    const auto cols = rows ? static_cast<Eigen::Index>(re[0].size()) : 0;
    CMatrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        if (static_cast<Eigen::Index>(re[static_cast<std::size_t>(i)].size()) != cols ||
            static_cast<Eigen::Index>(im[static_cast<std::size_t>(i)].size()) != cols)
            throw ParseError("complex matrix: ragged rows");
        for (Eigen::Index c = 0; c < cols; ++c)
            m(i, c) = Complex(re[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)],
                              im[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)]);
    }
    return m;
}

} // namespace detail

inline nlohmann::json result_to_json(const DmdResult& r)
{
    std::vector<double> lre, lim, cre, cim;
    for (Eigen::Index i = 0; i < r.eigenvalues().size(); ++i) {
        lre.push_back(r.eigenvalues()(i).real());
        lim.push_back(r.eigenvalues()(i).imag());
    }
    for (Eigen::Index i = 0; i < r.amplitudes.size(); ++i) {
        cre.push_back(r.amplitudes(i).real());
        cim.push_back(r.amplitudes(i).imag());
    }
    return {{"format", "lkis.dmd"},
            {"version", 1},
            {"delta_t", r.delta_t},
            {"A", detail::cmatrix_json(r.a.cast<Complex>())},
            {"eigenvalues", {{"re", lre}, {"im", lim}}},
            {"modes", detail::cmatrix_json(r.eigen.right)},
            {"left_vectors", detail::cmatrix_json(r.eigen.left)},
            {"amplitudes", {{"re", cre}, {"im", cim}}}};
}

inline DmdResult result_from_json(const nlohmann::json& j)
{
    if (j.value("format", std::string{}) != "lkis.dmd") throw ParseError("dmd json: missing or wrong 'format'");
    DmdResult r;
    r.delta_t = j.at("delta_t").get<double>();
    r.a = detail::json_cmatrix(j.at("A")).real();
    auto lre = j.at("eigenvalues").at("re").get<std::vector<double>>();
    auto lim = j.at("eigenvalues").at("im").get<std::vector<double>>();
    auto cre = j.at("amplitudes").at("re").get<std::vector<double>>();
    auto cim = j.at("amplitudes").at("im").get<std::vector<double>>();
    if (lre.size() != lim.size() || cre.size() != cim.size()) throw ParseError("dmd json: re/im length mismatch");
    r.eigen.eigenvalues.resize(static_cast<Eigen::Index>(lre.size()));
    for (std::size_t i = 0; i < lre.size(); ++i) r.eigen.eigenvalues(static_cast<Eigen::Index>(i)) = Complex(lre[i], lim[i]);
    r.amplitudes.resize(static_cast<Eigen::Index>(cre.size()));
    for (std::size_t i = 0; i < cre.size(); ++i) r.amplitudes(static_cast<Eigen::Index>(i)) = Complex(cre[i], cim[i]);
    r.eigen.right = detail::json_cmatrix(j.at("modes"));
    r.eigen.left = detail::json_cmatrix(j.at("left_vectors"));
    const auto n = r.a.rows();
    if (r.a.cols() != n || r.eigen.eigenvalues.size() != n || r.eigen.right.rows() != n || r.eigen.right.cols() != n ||
        r.eigen.left.rows() != n || r.eigen.left.cols() != n)
        throw ParseError("dmd json: inconsistent dimensions");
    return r;
}

/// CSV columns re,im,abs,angle, one eigenvalue per row.
inline void write_eigenvalues_csv(std::ostream& os, const CVector& lambda)
{
    os << "re,im,abs,angle\n" << std::setprecision(17);
    for (Eigen::Index i = 0; i < lambda.size(); ++i)
        os << lambda(i).real() << "," << lambda(i).imag() << "," << std::abs(lambda(i)) << "," << std::arg(lambda(i)) << "\n";
}

} // namespace lkis::dmd

#endif // LKIS_DMD_HPP
