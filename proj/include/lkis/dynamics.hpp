///
/// \file dynamics.hpp
///
/// Benchmark systems: the quadratic fixed-point map, FitzHugh-Nagumo,
/// unforced Duffing, Lorenz, Rossler and plain linear maps. Continuous
/// systems are sampled every `dt` time units and integrated with classical
/// RK4 on a finer `substep` grid.
///
#ifndef LKIS_DYNAMICS_HPP
#define LKIS_DYNAMICS_HPP

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "series.hpp"

namespace lkis::dynamics {

enum class SystemKind { FixedPointMap, FitzHughNagumo, Duffing, Lorenz, Rossler, LinearMap };

inline std::string to_string(SystemKind k)
{
    switch (k) {
    case SystemKind::FixedPointMap: return "fixed_point";
    case SystemKind::FitzHughNagumo: return "fhn";
    case SystemKind::Duffing: return "duffing";
    case SystemKind::Lorenz: return "lorenz";
    case SystemKind::Rossler: return "rossler";
    case SystemKind::LinearMap: return "linear";
    }
    return "?";
}

inline SystemKind system_kind_from_string(const std::string& s)
{
    for (auto k : {SystemKind::FixedPointMap, SystemKind::FitzHughNagumo, SystemKind::Duffing, SystemKind::Lorenz,
                   SystemKind::Rossler, SystemKind::LinearMap})
        if (to_string(k) == s) return k;
    throw InvalidArgument("unknown system '" + s + "' (expected fixed_point, fhn, duffing, lorenz, rossler, linear)");
}

struct SystemSpec
{
    SystemKind kind = SystemKind::FixedPointMap;
    std::map<std::string, double> params;
    double dt = 1.0;       ///< sample interval (continuous systems)
    double substep = 0.01; ///< RK4 step (continuous systems)
    std::vector<Eigen::Index> observed;  ///< empty = all components
    Matrix linear;         ///< LinearMap only

    bool continuous() const
    {
        return kind != SystemKind::FixedPointMap && kind != SystemKind::LinearMap;
    }

    Eigen::Index state_dim() const
    {
        switch (kind) {
        case SystemKind::Lorenz:
        case SystemKind::Rossler: return 3;
        case SystemKind::LinearMap: return linear.rows();
        default: return 2;
        }
    }

    double param(const std::string& name) const
    {
        auto it = params.find(name);
        if (it == params.end()) throw InvalidArgument("system " + to_string(kind) + ": missing parameter '" + name + "'");
        return it->second;
    }

    void validate() const
    {
        static const std::map<SystemKind, std::vector<std::string>> required{
            {SystemKind::FixedPointMap, {"lambda", "mu"}},
            {SystemKind::FitzHughNagumo, {"a", "b", "c", "I"}},
            {SystemKind::Duffing, {"alpha", "beta", "delta"}},
            {SystemKind::Lorenz, {"sigma", "rho", "beta"}},
            {SystemKind::Rossler, {"a", "b", "c"}},
            {SystemKind::LinearMap, {}}};
        for (const auto& n : required.at(kind)) (void)param(n);
        if (continuous()) {
            require(dt > 0.0 && substep > 0.0, "system: dt and substep must be > 0");
        }
        if (kind == SystemKind::LinearMap) {
            require(linear.rows() >= 1 && linear.rows() == linear.cols(), "linear map: matrix must be square");
        }
        for (auto i : observed) require(i >= 0 && i < state_dim(), "system: observed component out of range");
    }
};

inline SystemSpec fixed_point_map(double lambda = 0.9, double mu = 0.5)
{
    return {SystemKind::FixedPointMap, {{"lambda", lambda}, {"mu", mu}}, 1.0, 1.0, {}, {}};
}

inline SystemSpec fitzhugh_nagumo(double dt = 0.5, double substep = 0.01)
{
    return {SystemKind::FitzHughNagumo, {{"a", 0.7}, {"b", 0.8}, {"c", 0.08}, {"I", 0.8}}, dt, substep, {}, {}};
}

inline SystemSpec duffing(double dt = 0.25, double substep = 0.01)
{
    return {SystemKind::Duffing, {{"alpha", 1.0}, {"beta", -1.0}, {"delta", 0.5}}, dt, substep, {}, {}};
}

inline SystemSpec lorenz(double dt = 0.01, double substep = 0.01)
{
    return {SystemKind::Lorenz, {{"sigma", 10.0}, {"rho", 28.0}, {"beta", 8.0 / 3.0}}, dt, substep, {0}, {}};
}

inline SystemSpec rossler(double dt = 0.05, double substep = 0.01)
{
    return {SystemKind::Rossler, {{"a", 0.2}, {"b", 0.2}, {"c", 5.7}}, dt, substep, {0}, {}};
}

inline SystemSpec linear_map(Matrix m)
{
    SystemSpec s{SystemKind::LinearMap, {}, 1.0, 1.0, {}, std::move(m)};
    return s;
}

/// (lambda x1, mu x2 + (lambda^2 - mu) x1^2).
inline Vector step_fixed_point(const Vector& x, double lambda, double mu)
{
    require(x.size() == 2, "step_fixed_point: state must be 2-dimensional");
    Vector y(2);
    y(0) = lambda * x(0);
    y(1) = mu * x(1) + (lambda * lambda - mu) * x(0) * x(0);
    return y;
}

using Rhs = std::function<Vector(const Vector&)>;

/// One classical fourth-order Runge-Kutta step.
inline Vector rk4_step(const Rhs& f, const Vector& x, double dt)
{
    require(dt > 0.0, "rk4_step: dt must be > 0");
    const Vector k1 = f(x);
    if (!k1.allFinite()) throw Error("rk4_step: non-finite derivative");
    const Vector k2 = f(x + 0.5 * dt * k1);
    const Vector k3 = f(x + 0.5 * dt * k2);
    const Vector k4 = f(x + dt * k3);
    if (!k2.allFinite() || !k3.allFinite() || !k4.allFinite()) throw Error("rk4_step: non-finite derivative");
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// Vector field of a continuous system.
inline Rhs vector_field(const SystemSpec& s)
{
    switch (s.kind) {
    case SystemKind::FitzHughNagumo: {
        const double a = s.param("a"), b = s.param("b"), c = s.param("c"), I = s.param("I");
        return [=](const Vector& x) {
            Vector d(2);
            d(0) = x(0) - x(0) * x(0) * x(0) / 3.0 - x(1) + I;
            d(1) = c * (x(0) - b * x(1) + a);
            return d;
        };
    }
    case SystemKind::Duffing: {
        const double al = s.param("alpha"), be = s.param("beta"), de = s.param("delta");
        return [=](const Vector& x) {
            Vector d(2);
            d(0) = x(1);
            d(1) = -de * x(1) - x(0) * (be + al * x(0) * x(0));
            return d;
        };
    }
    case SystemKind::Lorenz: {
        const double sg = s.param("sigma"), rho = s.param("rho"), be = s.param("beta");
        return [=](const Vector& x) {
            Vector d(3);
            d(0) = sg * (x(1) - x(0));
            d(1) = x(0) * (rho - x(2)) - x(1);
            d(2) = x(0) * x(1) - be * x(2);
            return d;
        };
    }
    case SystemKind::Rossler: {
        const double a = s.param("a"), b = s.param("b"), c = s.param("c");
        return [=](const Vector& x) {
            Vector d(3);
            d(0) = -x(1) - x(2);
            d(1) = x(0) + a * x(1);
            d(2) = b + x(2) * (x(0) - c);
            return d;
        };
    }
    default: throw InvalidArgument("vector_field: " + to_string(s.kind) + " is a discrete map");
    }
}

/// Advance the state by one sample interval.
class Stepper
{
public:
    explicit Stepper(const SystemSpec& s) : spec_(s)
    {
        spec_.validate();
        if (spec_.continuous()) {
            rhs_ = vector_field(spec_);
            substeps_ = std::max<long>(1, std::lround(spec_.dt / spec_.substep));
            h_ = spec_.dt / static_cast<double>(substeps_);
        }
    }

    Vector operator()(const Vector& x) const
    {
        switch (spec_.kind) {
        case SystemKind::FixedPointMap: return step_fixed_point(x, spec_.param("lambda"), spec_.param("mu"));
        case SystemKind::LinearMap: return spec_.linear * x;
        default: {
            Vector y = x;
            for (long i = 0; i < substeps_; ++i) y = rk4_step(rhs_, y, h_);
            return y;
        }
        }
    }

private:
    SystemSpec spec_;
    Rhs rhs_;
    long substeps_ = 1;
    double h_ = 1.0;
};

struct Trajectory
{
    Matrix states;    ///< clean states, one per row
    Matrix observed;  ///< observed components plus noise
    double dt = 1.0;
    SystemSpec spec;
    Vector x0;
    std::uint64_t seed = 0;
    double noise_sigma = 0.0;
    Eigen::Index discard = 0;

    TimeSeries series() const { return {observed, dt}; }
};

///
/// Run `discard` burn-in samples from x0, then record `steps` samples
/// (starting with the state reached after burn-in). Gaussian noise with
/// standard deviation noise_sigma is added to the observed components only,
/// drawn from a stream seeded by `seed`.
///
inline Trajectory simulate(const SystemSpec& spec, const Vector& x0, Eigen::Index steps, std::uint64_t seed = 0,
                           double noise_sigma = 0.0, Eigen::Index discard = 0)
{
    require(steps >= 1, "simulate: steps must be >= 1");
    require(discard >= 0, "simulate: discard must be >= 0");
    require(noise_sigma >= 0.0, "simulate: noise_sigma must be >= 0");
    require(x0.size() == spec.state_dim(), "simulate: initial state has dimension " + std::to_string(x0.size()) +
                                               ", system needs " + std::to_string(spec.state_dim()));
    Stepper step(spec);
    Trajectory tr;
    tr.spec = spec;
    tr.dt = spec.continuous() ? spec.dt : 1.0;
    tr.x0 = x0;
    tr.seed = seed;
    tr.noise_sigma = noise_sigma;
    tr.discard = discard;

    Vector x = x0;
    for (Eigen::Index i = 0; i < discard; ++i) {
        x = step(x);
        if (!x.allFinite()) throw Error("simulate: state diverged during burn-in at step " + std::to_string(i + 1));
    }
    tr.states.resize(steps, spec.state_dim());
    for (Eigen::Index t = 0; t < steps; ++t) {
        if (t > 0) x = step(x);
        if (!x.allFinite()) throw Error("simulate: state diverged at step " + std::to_string(t));
        tr.states.row(t) = x.transpose();
    }

    std::vector<Eigen::Index> obs = spec.observed;
    if (obs.empty())
        for (Eigen::Index i = 0; i < spec.state_dim(); ++i) obs.push_back(i);
    tr.observed.resize(steps, static_cast<Eigen::Index>(obs.size()));
    for (std::size_t c = 0; c < obs.size(); ++c) tr.observed.col(static_cast<Eigen::Index>(c)) = tr.states.col(obs[c]);
    if (noise_sigma > 0.0) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal(0.0, noise_sigma);
        for (Eigen::Index t = 0; t < steps; ++t)
            for (Eigen::Index c = 0; c < tr.observed.cols(); ++c) tr.observed(t, c) += normal(rng);
    }
    return tr;
}

///
/// Episodes from initial conditions drawn uniformly from the box
/// [lo_i, hi_i]. Episode e uses noise seed base_seed + e.
///
inline std::vector<Trajectory> simulate_episodes(const SystemSpec& spec, std::size_t count, Eigen::Index steps,
                                                 const Vector& lo, const Vector& hi, std::uint64_t base_seed,
                                                 double noise_sigma = 0.0, Eigen::Index discard = 0)
{
    require(lo.size() == spec.state_dim() && hi.size() == spec.state_dim(),
            "simulate_episodes: box dimension must match the state");
    require((hi.array() >= lo.array()).all(), "simulate_episodes: empty box");
    std::mt19937_64 rng(base_seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Trajectory> out;
    out.reserve(count);
    for (std::size_t e = 0; e < count; ++e) {
        Vector x0(spec.state_dim());
        for (Eigen::Index i = 0; i < x0.size(); ++i) x0(i) = lo(i) + (hi(i) - lo(i)) * u(rng);
        out.push_back(simulate(spec, x0, steps, base_seed + e, noise_sigma, discard));
    }
    return out;
}

/// Same, over the cube [lo, hi]^d.
inline std::vector<Trajectory> simulate_episodes(const SystemSpec& spec, std::size_t count, Eigen::Index steps,
                                                 double lo, double hi, std::uint64_t base_seed,
                                                 double noise_sigma = 0.0, Eigen::Index discard = 0)
{
    const Eigen::Index d = spec.state_dim();
    return simulate_episodes(spec, count, steps, Vector::Constant(d, lo), Vector::Constant(d, hi), base_seed,
                             noise_sigma, discard);
}

inline EpisodeList as_episodes(const std::vector<Trajectory>& trs)
{
    EpisodeList eps;
    for (const auto& t : trs) eps.push_back(t.series());
    return eps;
}

enum class BasinLabel { PlusOne, MinusOne, Undecided };

inline std::string to_string(BasinLabel b)
{
    switch (b) {
    case BasinLabel::PlusOne: return "+1";
    case BasinLabel::MinusOne: return "-1";
    case BasinLabel::Undecided: return "undecided";
    }
    return "?";
}

///
/// Ground-truth basin of attraction of the Duffing oscillator: integrate
/// until the state is within `tol` of (+1, 0) or (-1, 0). Points that do not
/// settle within `max_time` (stable manifold of the saddle) are Undecided.
///
inline BasinLabel duffing_basin_label(const Vector& x0, const SystemSpec& spec = duffing(), double tol = 1e-3,
                                      double max_time = 400.0)
{
    require(x0.size() == 2, "duffing_basin_label: state must be 2-dimensional");
    const Rhs f = vector_field(spec);
    const double h = 0.01;
    Vector x = x0;
    const auto n = static_cast<long>(max_time / h);
    for (long i = 0; i <= n; ++i) {
        if (std::hypot(x(0) - 1.0, x(1)) < tol) return BasinLabel::PlusOne;
        if (std::hypot(x(0) + 1.0, x(1)) < tol) return BasinLabel::MinusOne;
        x = rk4_step(f, x, h);
    }
    return BasinLabel::Undecided;
}

// ---------------------------------------------------------------------------
// Synthetic amplitude collapses
// ---------------------------------------------------------------------------

///
/// Sinusoid whose amplitude grows geometrically from `amin` and falls back
/// to `amin` as soon as it exceeds `amax`. Each growth phase draws its rate
/// uniformly from growth * [1 - spread, 1 + spread].
///
struct CollapseConfig
{
    Eigen::Index length = 3000;
    double period = 8.0;  ///< samples per oscillation
    double amin = 0.05;
    double amax = 1.0;
    double growth = 0.03;
    double growth_spread = 0.3;
    double noise_sigma = 0.002;
};

struct CollapseSeries
{
    TimeSeries series;
    std::vector<int> events;  ///< 1 at the first sample after each collapse
};

inline CollapseSeries amplitude_collapse_series(const CollapseConfig& c, std::uint64_t seed)
{
    require(c.length >= 2 && c.period > 0.0, "amplitude_collapse_series: bad length or period");
    require(c.amin > 0.0 && c.amax > c.amin, "amplitude_collapse_series: need 0 < amin < amax");
    require(c.growth > 0.0 && c.growth_spread >= 0.0 && c.growth_spread < 1.0,
            "amplitude_collapse_series: bad growth settings");
    require(c.noise_sigma >= 0.0, "amplitude_collapse_series: noise_sigma must be >= 0");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto rate = [&] { return c.growth * (1.0 - c.growth_spread + 2.0 * c.growth_spread * u(rng)); };

    CollapseSeries out;
    out.series.values.resize(c.length, 1);
    out.series.delta_t = 1.0;
    out.events.assign(static_cast<std::size_t>(c.length), 0);
    double a = c.amin, phase = 0.0, g = rate();
    for (Eigen::Index t = 0; t < c.length; ++t) {
        out.series.values(t, 0) = a * std::sin(phase) + c.noise_sigma * normal(rng);
        phase += 2.0 * std::numbers::pi / c.period;
        a *= 1.0 + g;
        if (a > c.amax) {
            a = c.amin;
            if (t + 1 < c.length) out.events[static_cast<std::size_t>(t + 1)] = 1;
            g = rate();
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

inline nlohmann::json spec_to_json(const SystemSpec& s)
{
    nlohmann::json j{{"kind", to_string(s.kind)}, {"params", s.params}, {"dt", s.dt}, {"substep", s.substep},
                     {"observed", s.observed}};
    if (s.kind == SystemKind::LinearMap) {
        std::vector<std::vector<double>> rows;
        for (Eigen::Index i = 0; i < s.linear.rows(); ++i) {
            rows.emplace_back();
            for (Eigen::Index c = 0; c < s.linear.cols(); ++c) rows.back().push_back(s.linear(i, c));
        }
        j["matrix"] = rows;
    }
    return j;
}

inline SystemSpec spec_from_json(const nlohmann::json& j)
{
    SystemSpec s;
    s.kind = system_kind_from_string(j.at("kind").get<std::string>());
    s.params = j.at("params").get<std::map<std::string, double>>();
    s.dt = j.at("dt").get<double>();
    s.substep = j.at("substep").get<double>();
    s.observed = j.at("observed").get<std::vector<Eigen::Index>>();
    if (s.kind == SystemKind::LinearMap) {
        auto rows = j.at("matrix").get<std::vector<std::vector<double>>>();
        s.linear.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size()));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].size() != rows.size()) throw ParseError("linear map matrix must be square");
            for (std::size_t c = 0; c < rows.size(); ++c)
                s.linear(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
        }
    }
    s.validate();
    return s;
}

/// Manifest sufficient to regenerate a trajectory bit-exactly.
inline nlohmann::json manifest(const Trajectory& t)
{
    return {{"spec", spec_to_json(t.spec)},
            {"x0", std::vector<double>(t.x0.data(), t.x0.data() + t.x0.size())},
            {"steps", t.states.rows()},
            {"seed", t.seed},
            {"noise_sigma", t.noise_sigma},
            {"discard", t.discard},
            {"dt", t.dt}};
}

inline Trajectory regenerate(const nlohmann::json& m)
{
    auto x0v = m.at("x0").get<std::vector<double>>();
    Vector x0 = Eigen::Map<Vector>(x0v.data(), static_cast<Eigen::Index>(x0v.size()));
    return simulate(spec_from_json(m.at("spec")), x0, m.at("steps").get<Eigen::Index>(), m.at("seed").get<std::uint64_t>(),
                    m.at("noise_sigma").get<double>(), m.at("discard").get<Eigen::Index>());
}

/// CSV with a "# delta_t=" line, header t,x1..xd (observed components),
/// 17 significant digits.
inline void write_csv(std::ostream& os, const Trajectory& t)
{
    os << std::setprecision(17) << "# delta_t=" << t.dt << "\n";
    os << "t";
    for (Eigen::Index c = 0; c < t.observed.cols(); ++c) os << ",x" << (c + 1);
    os << "\n";
    for (Eigen::Index i = 0; i < t.observed.rows(); ++i) {
        os << static_cast<double>(i) * t.dt;
        for (Eigen::Index c = 0; c < t.observed.cols(); ++c) os << "," << t.observed(i, c);
        os << "\n";
    }
}

} // namespace lkis::dynamics

#endif // LKIS_DYNAMICS_HPP
