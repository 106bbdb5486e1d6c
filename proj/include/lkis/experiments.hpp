///
/// \file experiments.hpp
///
/// End-to-end experiment recipes (simulate or load, train, fit, measure) and
/// their artifacts. Every recipe is deterministic for a given config.
///
#ifndef LKIS_EXPERIMENTS_HPP
#define LKIS_EXPERIMENTS_HPP

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmd.hpp"
#include "dynamics.hpp"
#include "io.hpp"
#include "lkis_model.hpp"
#include "metrics.hpp"

#ifndef LKIS_VERSION
#define LKIS_VERSION "0.1.0"
#endif

namespace lkis::experiments {

inline constexpr const char* kLibraryVersion = LKIS_VERSION;

/// Invalid or inconsistent configuration (reported before any work starts).
class ConfigError : public Error
{
public:
    using Error::Error;
};

/// Failure inside a running experiment; `stage` names the step.
class ExperimentError : public Error
{
public:
    ExperimentError(std::string stage_name, const std::string& what)
        : Error(stage_name + ": " + what), stage(std::move(stage_name))
    {
    }

    std::string stage;
};

enum class ExperimentKind { EigRecovery, LimitCycleSpectrum, Basins, Prediction, Detection };

inline std::string to_string(ExperimentKind k)
{
    switch (k) {
    case ExperimentKind::EigRecovery: return "eig_recovery";
    case ExperimentKind::LimitCycleSpectrum: return "limit_cycle";
    case ExperimentKind::Basins: return "basins";
    case ExperimentKind::Prediction: return "prediction";
    case ExperimentKind::Detection: return "detection";
    }
    return "?";
}

inline ExperimentKind experiment_kind_from_string(const std::string& s)
{
    for (auto k : {ExperimentKind::EigRecovery, ExperimentKind::LimitCycleSpectrum, ExperimentKind::Basins,
                   ExperimentKind::Prediction, ExperimentKind::Detection})
        if (to_string(k) == s) return k;
    throw ConfigError("unknown experiment '" + s +
                      "' (expected eig_recovery, limit_cycle, basins, prediction, detection)");
}

struct DataConfig
{
    /// fixed_point, fhn, duffing, lorenz, rossler or collapse (synthetic);
    /// ignored when csv_path is set.
    std::string system = "fixed_point";
    std::string csv_path;
    /// Sample interval; for CSV it overrides the file header, for continuous
    /// systems it replaces the default sampling step. 0 = default.
    double delta_t = 0.0;
    std::size_t episodes = 1;
    Eigen::Index length = 1000;
    Eigen::Index discard = 0;
    /// Initial states uniform in [-w_i, w_i]; one entry per state component
    /// (a single entry is broadcast).
    std::vector<double> ic_half_width{1.0};
    double noise_sigma = 0.0;
    dynamics::CollapseConfig collapse{};
};

struct ExperimentConfig
{
    ExperimentKind kind = ExperimentKind::EigRecovery;
    DataConfig data;
    Hyperparameters model;
    TrainConfig train;
    /// Chronological split for single-series experiments.
    double train_fraction = 0.4;
    double validation_fraction = 0.2;
    double test_fraction = 0.4;
    Eigen::Index horizon = 30;
    std::vector<Eigen::Index> hankel_delays{1, 2, 3, 4, 5, 6, 8, 10, 12, 16};
    /// Candidate model lags for prediction, chosen like the Hankel delay.
    /// Empty means model.k only.
    std::vector<Eigen::Index> lkis_lags;
    Eigen::Index tolerance_window = 5;
    Eigen::Index label_window = 50;
    double label_drop = 0.5;
    metrics::GridSpec grid{};
    double boundary_margin = 0.2;
    std::string output_dir;
    std::uint64_t seed = 0;

    /// Throws ConfigError; checks referenced paths exist.
    void validate() const
    {
        auto fail = [](const std::string& m) { throw ConfigError(m); };
        if (train_fraction <= 0.0 || validation_fraction < 0.0 || test_fraction < 0.0)
            fail("split fractions must be non-negative and train_fraction > 0");
        if (train_fraction + validation_fraction + test_fraction > 1.0 + 1e-12) fail("split fractions sum to more than 1");
        if (horizon < 1) fail("horizon must be >= 1");
        if (hankel_delays.empty()) fail("hankel_delays must not be empty");
        for (auto d : hankel_delays)
            if (d < 1) fail("hankel delays must be >= 1");
        for (auto d : lkis_lags)
            if (d < 1) fail("lkis lags must be >= 1");
        if (tolerance_window < 0) fail("tolerance_window must be >= 0");
        if (label_window < 1 || !(label_drop > 0.0 && label_drop < 1.0)) fail("bad event labeling rule");
        if (grid.nx < 2 || grid.ny < 2 || !(grid.hi > grid.lo)) fail("bad basin grid");
        if (boundary_margin < 0.0) fail("boundary_margin must be >= 0");
        if (data.length < 2) fail("data.length must be >= 2");
        if (data.episodes < 1) fail("data.episodes must be >= 1");
        if (data.discard < 0) fail("data.discard must be >= 0");
        if (data.noise_sigma < 0.0) fail("data.noise_sigma must be >= 0");
        if (data.delta_t < 0.0) fail("data.delta_t must be >= 0");
        if (data.ic_half_width.empty()) fail("data.ic_half_width must not be empty");
        if (model.k < 1 || model.n < 1 || model.p < 0 || model.alpha < 0.0 || model.l1_phi < 0.0 ||
            model.hidden_layers < 0 || model.hidden_size < 0)
            fail("bad model hyperparameters");
        try {
            train.validate();
        } catch (const Error& e) {
            fail(e.what());
        }
        if (!data.csv_path.empty()) {
            if (!std::filesystem::exists(data.csv_path)) fail("data file '" + data.csv_path + "' does not exist");
        } else if (data.system != "collapse") {
            try {
                (void)dynamics::system_kind_from_string(data.system);
            } catch (const Error& e) {
                fail(e.what());
            }
        }
        if (kind == ExperimentKind::Basins && (data.csv_path.size() || data.system != "duffing"))
            fail("basins needs the duffing system");
        if (kind == ExperimentKind::EigRecovery && (data.csv_path.size() || data.system != "fixed_point"))
            fail("eig_recovery needs the fixed_point system");
    }
};

// ---------------------------------------------------------------------------
// Config serialization
// ---------------------------------------------------------------------------

inline nlohmann::json config_to_json(const ExperimentConfig& c)
{
    const auto& d = c.data;
    const auto& m = c.model;
    const auto& t = c.train;
    return {
        {"kind", to_string(c.kind)},
        {"data",
         {{"system", d.system},
          {"csv_path", d.csv_path},
          {"delta_t", d.delta_t},
          {"episodes", d.episodes},
          {"length", d.length},
          {"discard", d.discard},
          {"ic_half_width", d.ic_half_width},
          {"noise_sigma", d.noise_sigma},
          {"collapse",
           {{"length", d.collapse.length},
            {"period", d.collapse.period},
            {"amin", d.collapse.amin},
            {"amax", d.collapse.amax},
            {"growth", d.collapse.growth},
            {"growth_spread", d.collapse.growth_spread},
            {"noise_sigma", d.collapse.noise_sigma}}}}},
        {"model",
         {{"k", m.k},
          {"p", m.p},
          {"n", m.n},
          {"alpha", m.alpha},
          {"l1_phi", m.l1_phi},
          {"hidden_layers", m.hidden_layers},
          {"hidden_size", m.hidden_size}}},
        {"train",
         {{"batch_size", t.batch_size},
          {"max_epochs", t.max_epochs},
          {"optimizer", nn::to_string(t.optimizer.kind)},
          {"learning_rate", t.optimizer.learning_rate},
          {"momentum", t.optimizer.momentum},
          {"beta1", t.optimizer.beta1},
          {"beta2", t.optimizer.beta2},
          {"epsilon", t.optimizer.epsilon},
          {"lr_decay", t.lr_decay},
          {"validation_fraction", t.validation_fraction},
          {"patience", t.patience},
          {"monitor_full_batch", t.monitor_full_batch},
          {"standardize", t.standardize}}},
        {"split", {{"train", c.train_fraction}, {"validation", c.validation_fraction}, {"test", c.test_fraction}}},
        {"horizon", c.horizon},
        {"hankel_delays", c.hankel_delays},
        {"lkis_lags", c.lkis_lags},
        {"tolerance_window", c.tolerance_window},
        {"label_window", c.label_window},
        {"label_drop", c.label_drop},
        {"grid", {{"lo", c.grid.lo}, {"hi", c.grid.hi}, {"nx", c.grid.nx}, {"ny", c.grid.ny}}},
        {"boundary_margin", c.boundary_margin},
        {"output_dir", c.output_dir},
        {"seed", c.seed}};
}

///
/// Inverse of config_to_json. Missing keys keep the values of `base`;
/// unknown keys are rejected.
///
inline ExperimentConfig config_from_json(const nlohmann::json& j, ExperimentConfig base = {})
{
    auto check_keys = [](const nlohmann::json& obj, const nlohmann::json& ref, const std::string& where) {
        if (!obj.is_object()) throw ConfigError(where + ": expected an object");
        for (auto it = obj.begin(); it != obj.end(); ++it)
            if (!ref.contains(it.key())) throw ConfigError("unknown config key '" + where + it.key() + "'");
    };
    const nlohmann::json ref = config_to_json(base);
    try {
        check_keys(j, ref, "");
        for (const char* sec : {"data", "model", "train", "split", "grid"})
            if (j.contains(sec)) check_keys(j.at(sec), ref.at(sec), std::string(sec) + ".");
        if (j.contains("data") && j.at("data").contains("collapse"))
            check_keys(j.at("data").at("collapse"), ref.at("data").at("collapse"), "data.collapse.");

        nlohmann::json merged = ref;
        merged.merge_patch(j);
        ExperimentConfig c = base;
        c.kind = experiment_kind_from_string(merged.at("kind").get<std::string>());
        const auto& d = merged.at("data");
        c.data.system = d.at("system").get<std::string>();
        c.data.csv_path = d.at("csv_path").get<std::string>();
        c.data.delta_t = d.at("delta_t").get<double>();
        c.data.episodes = d.at("episodes").get<std::size_t>();
        c.data.length = d.at("length").get<Eigen::Index>();
        c.data.discard = d.at("discard").get<Eigen::Index>();
        c.data.ic_half_width = d.at("ic_half_width").get<std::vector<double>>();
        c.data.noise_sigma = d.at("noise_sigma").get<double>();
        const auto& cc = d.at("collapse");
        c.data.collapse.length = cc.at("length").get<Eigen::Index>();
        c.data.collapse.period = cc.at("period").get<double>();
        c.data.collapse.amin = cc.at("amin").get<double>();
        c.data.collapse.amax = cc.at("amax").get<double>();
        c.data.collapse.growth = cc.at("growth").get<double>();
        c.data.collapse.growth_spread = cc.at("growth_spread").get<double>();
        c.data.collapse.noise_sigma = cc.at("noise_sigma").get<double>();
        const auto& m = merged.at("model");
        c.model.k = m.at("k").get<Eigen::Index>();
        c.model.p = m.at("p").get<Eigen::Index>();
        c.model.n = m.at("n").get<Eigen::Index>();
        c.model.alpha = m.at("alpha").get<double>();
        c.model.l1_phi = m.at("l1_phi").get<double>();
        c.model.hidden_layers = m.at("hidden_layers").get<int>();
        c.model.hidden_size = m.at("hidden_size").get<Eigen::Index>();
        const auto& t = merged.at("train");
        c.train.batch_size = t.at("batch_size").get<Eigen::Index>();
        c.train.max_epochs = t.at("max_epochs").get<int>();
        c.train.optimizer.kind = nn::optimizer_kind_from_string(t.at("optimizer").get<std::string>());
        c.train.optimizer.learning_rate = t.at("learning_rate").get<double>();
        c.train.optimizer.momentum = t.at("momentum").get<double>();
        c.train.optimizer.beta1 = t.at("beta1").get<double>();
        c.train.optimizer.beta2 = t.at("beta2").get<double>();
        c.train.optimizer.epsilon = t.at("epsilon").get<double>();
        c.train.lr_decay = t.at("lr_decay").get<double>();
        c.train.validation_fraction = t.at("validation_fraction").get<double>();
        c.train.patience = t.at("patience").get<int>();
        c.train.monitor_full_batch = t.at("monitor_full_batch").get<bool>();
        c.train.standardize = t.at("standardize").get<bool>();
        const auto& s = merged.at("split");
        c.train_fraction = s.at("train").get<double>();
        c.validation_fraction = s.at("validation").get<double>();
        c.test_fraction = s.at("test").get<double>();
        c.horizon = merged.at("horizon").get<Eigen::Index>();
        c.hankel_delays = merged.at("hankel_delays").get<std::vector<Eigen::Index>>();
        c.lkis_lags = merged.at("lkis_lags").get<std::vector<Eigen::Index>>();
        c.tolerance_window = merged.at("tolerance_window").get<Eigen::Index>();
        c.label_window = merged.at("label_window").get<Eigen::Index>();
        c.label_drop = merged.at("label_drop").get<double>();
        const auto& g = merged.at("grid");
        c.grid.lo = g.at("lo").get<double>();
        c.grid.hi = g.at("hi").get<double>();
        c.grid.nx = g.at("nx").get<Eigen::Index>();
        c.grid.ny = g.at("ny").get<Eigen::Index>();
        c.boundary_margin = merged.at("boundary_margin").get<double>();
        c.output_dir = merged.at("output_dir").get<std::string>();
        c.seed = merged.at("seed").get<std::uint64_t>();
        return c;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

/// FNV-1a over the canonical JSON of the config, excluding output_dir.
inline std::string config_hash(const ExperimentConfig& c)
{
    nlohmann::json j = config_to_json(c);
    j.erase("output_dir");
    const std::string s = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

// ---------------------------------------------------------------------------
// Defaults per experiment
// ---------------------------------------------------------------------------

///
/// Desk-scale settings for each experiment; these are the configurations the
/// acceptance suite runs.
///
inline ExperimentConfig default_config(ExperimentKind kind)
{
    ExperimentConfig c;
    c.kind = kind;
    c.train.batch_size = 200;
    c.train.optimizer.learning_rate = 1e-2;
    switch (kind) {
    case ExperimentKind::EigRecovery:
        c.data.system = "fixed_point";
        c.data.episodes = 150;
        c.data.length = 8;
        c.data.ic_half_width = {5.0, 10.0};
        c.model.k = 3;
        c.model.p = 4;
        c.model.n = 4;
        c.model.alpha = 0.1;
        c.train.max_epochs = 1500;
        break;
    case ExperimentKind::LimitCycleSpectrum:
        c.data.system = "fhn";
        c.data.length = 2000;
        c.data.discard = 400;
        c.model.k = 8;
        c.model.p = 16;
        c.model.n = 16;
        c.model.hidden_size = 64;
        c.train.max_epochs = 1000;
        c.train.monitor_full_batch = true;
        c.train.standardize = true;
        break;
    case ExperimentKind::Basins:
        c.data.system = "duffing";
        c.data.episodes = 200;
        c.data.length = 100;
        c.data.ic_half_width = {2.0};
        c.model.k = 1;
        c.model.p = 2;
        c.model.n = 20;
        c.train.max_epochs = 100;
        c.train.standardize = true;
        break;
    case ExperimentKind::Prediction:
        c.data.system = "lorenz";
        c.data.length = 25000;  // 10k / 5k / 10k
        c.data.discard = 1000;
        c.model.k = 16;
        c.model.p = 7;
        c.model.n = 32;
        c.lkis_lags = {8, 16, 32};
        c.train.max_epochs = 100;
        c.train.standardize = true;
        break;
    case ExperimentKind::Detection:
        c.data.system = "collapse";
        c.train_fraction = 0.5;
        c.validation_fraction = 0.0;
        c.test_fraction = 0.5;
        c.model.k = 8;
        c.model.p = 8;
        c.model.n = 6;
        c.model.alpha = 0.1;
        c.train.max_epochs = 100;
        c.train.standardize = true;
        break;
    }
    return c;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct MetricReport
{
    std::string experiment;
    std::map<std::string, double> metrics;
    std::map<std::string, std::vector<double>> curves;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string library_version = kLibraryVersion;
    std::string started;
    std::string finished;

    double at(const std::string& name) const
    {
        auto it = metrics.find(name);
        if (it == metrics.end()) throw Error("metric '" + name + "' not in report");
        return it->second;
    }
};

inline nlohmann::json report_to_json(const MetricReport& r)
{
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [k, v] : r.metrics) m[k] = v;
    nlohmann::json c = nlohmann::json::object();
    for (const auto& [k, v] : r.curves) c[k] = v;
    return {{"experiment", r.experiment}, {"metrics", m},        {"curves", c},
            {"seed", r.seed},             {"config_hash", r.config_hash}, {"library_version", r.library_version},
            {"started", r.started},       {"finished", r.finished}};
}

namespace detail {

inline std::string utc_now()
{
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

/// Writes files into the output directory; a no-op when none is set.
class Artifacts
{
public:
    explicit Artifacts(std::string dir) : dir_(std::move(dir))
    {
        if (!dir_.empty()) std::filesystem::create_directories(dir_);
    }

    bool enabled() const { return !dir_.empty(); }

    template <typename F>
    void write(const std::string& name, F&& fill) const
    {
        if (!enabled()) return;
        const auto path = std::filesystem::path(dir_) / name;
        std::ofstream f(path);
        if (!f) throw Error("cannot write '" + path.string() + "'");
        f << std::setprecision(17);
        fill(f);
        if (!f) throw Error("write failed for '" + path.string() + "'");
    }

    void json(const std::string& name, const nlohmann::json& j) const
    {
        write(name, [&](std::ostream& os) { os << j.dump(2) << "\n"; });
    }

private:
    std::string dir_;
};

/// Runs `f`, converting any library error into an ExperimentError for `stage`.
template <typename F>
auto stage(const std::string& name, F&& f) -> decltype(f())
{
    try {
        return f();
    } catch (const ExperimentError&) {
        throw;
    } catch (const std::exception& e) {
        throw ExperimentError(name, e.what());
    }
}

inline Vector box(const DataConfig& d, Eigen::Index dim)
{
    Vector w(dim);
    for (Eigen::Index i = 0; i < dim; ++i)
        w(i) = d.ic_half_width[d.ic_half_width.size() == 1 ? 0 : static_cast<std::size_t>(i)];
    return w;
}

inline dynamics::SystemSpec system_spec(const DataConfig& d)
{
    const auto kind = dynamics::system_kind_from_string(d.system);
    dynamics::SystemSpec s;
    switch (kind) {
    case dynamics::SystemKind::FixedPointMap: s = dynamics::fixed_point_map(); break;
    case dynamics::SystemKind::FitzHughNagumo: s = dynamics::fitzhugh_nagumo(); break;
    case dynamics::SystemKind::Duffing: s = dynamics::duffing(); break;
    case dynamics::SystemKind::Lorenz: s = dynamics::lorenz(); break;
    case dynamics::SystemKind::Rossler: s = dynamics::rossler(); break;
    case dynamics::SystemKind::LinearMap: throw ConfigError("the linear system needs a matrix; not available here");
    }
    if (d.delta_t > 0.0 && s.continuous()) s.dt = d.delta_t;
    return s;
}

struct Data
{
    EpisodeList episodes;
    std::vector<dynamics::Trajectory> trajectories;  ///< when simulated
    std::vector<int> events;                          ///< synthetic collapse ground truth
    nlohmann::json manifest;
};

inline Data acquire(const ExperimentConfig& c, std::optional<double> noise_override = std::nullopt)
{
    Data out;
    const auto& d = c.data;
    if (!d.csv_path.empty()) {
        io::LoadOptions opt;
        if (d.delta_t > 0.0) opt.delta_t = d.delta_t;
        out.episodes = io::load_series_file(d.csv_path, opt);
        out.manifest = {{"source", "csv"}, {"path", d.csv_path}};
        return out;
    }
    if (d.system == "collapse") {
        auto cs = dynamics::amplitude_collapse_series(d.collapse, c.seed);
        out.episodes = {cs.series};
        out.events = std::move(cs.events);
        out.manifest = {{"source", "collapse"}, {"seed", c.seed}};
        return out;
    }
    const auto spec = system_spec(d);
    const Vector w = box(d, spec.state_dim());
    const double noise = noise_override.value_or(d.noise_sigma);
    out.trajectories = dynamics::simulate_episodes(spec, d.episodes, d.length, -w, w, c.seed, noise, d.discard);
    out.episodes = dynamics::as_episodes(out.trajectories);
    nlohmann::json ms = nlohmann::json::array();
    for (const auto& t : out.trajectories) ms.push_back(dynamics::manifest(t));
    out.manifest = {{"source", "simulated"}, {"trajectories", ms}};
    return out;
}

/// Chronological train/validation/test split of one series.
struct Split
{
    TimeSeries train, validation, test;
    Eigen::Index test_offset = 0;
};

inline Split split_series(const TimeSeries& s, const ExperimentConfig& c)
{
    const auto len = static_cast<double>(s.length());
    const auto ntr = static_cast<Eigen::Index>(std::llround(c.train_fraction * len));
    const auto nva = static_cast<Eigen::Index>(std::llround(c.validation_fraction * len));
    const auto nte = std::min(s.length() - ntr - nva, static_cast<Eigen::Index>(std::llround(c.test_fraction * len)));
    require(ntr > c.model.k && nte > 0, "split leaves too little data (series length " + std::to_string(s.length()) + ")");
    Split out;
    out.train = {s.values.topRows(ntr), s.delta_t};
    out.validation = {s.values.middleRows(ntr, nva), s.delta_t};
    out.test = {s.values.middleRows(ntr + nva, nte), s.delta_t};
    out.test_offset = ntr + nva;
    return out;
}

inline void write_loss_curve(std::ostream& os, const LossReport& r)
{
    os << "step,epoch,batch_rss,batch_rec,full_batch_rss,validation_loss\n";
    for (const auto& s : r.steps) {
        os << s.step << "," << s.epoch << "," << s.batch_rss << "," << s.batch_rec << ",";
        if (s.full_batch_rss) os << *s.full_batch_rss;
        os << ",";
        if (s.validation_loss) os << *s.validation_loss;
        os << "\n";
    }
}

inline void write_vector_csv(std::ostream& os, const std::string& header, const Vector& v, Eigen::Index first = 1)
{
    os << header << "\n";
    for (Eigen::Index i = 0; i < v.size(); ++i) os << (first + i) << "," << v(i) << "\n";
}

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline void add_eigen_errors(MetricReport& r, const std::string& prefix, const metrics::EigenMatch& m)
{
    r.metrics[prefix + "_max_error"] = m.max_error;
    for (std::size_t i = 0; i < m.errors.size(); ++i) r.metrics[prefix + "_error_" + std::to_string(i)] = m.errors[i];
}

} // namespace detail

// ---------------------------------------------------------------------------
// Recipes
// ---------------------------------------------------------------------------

/// Everything a recipe produced, for callers that need more than metrics.
struct Outcome
{
    MetricReport report;
    std::optional<LkisModel> model;
    std::optional<LossReport> loss;
    std::optional<dmd::DmdResult> result;
    std::optional<metrics::BasinMap> basins;
    std::optional<metrics::DetectionScores> scores;
};

namespace detail {

inline Outcome eig_recovery(const ExperimentConfig& c, const Artifacts& out)
{
    Outcome o;
    const Data data = stage("data", [&] { return acquire(c); });
    const Data clean = stage("data", [&] { return acquire(c, 0.0); });
    auto tr = stage("train", [&] { return train(data.episodes, c.model, c.train); });
    const auto lk = stage("fit", [&] { return dmd::fit_model(tr.model, data.episodes); });

    EpisodeList states, clean_states;
    for (const auto& t : data.trajectories) states.push_back(t.series());
    for (const auto& t : clean.trajectories) clean_states.push_back(t.series());
    const auto dict = dmd::fixed_point_dictionary();
    const auto ed = stage("fit", [&] { return dmd::extended_dmd(states, dict); });
    const auto ed_clean = stage("fit", [&] { return dmd::extended_dmd(clean_states, dict); });
    const auto hk = stage("fit", [&] { return dmd::hankel_dmd(data.episodes, 2); });

    const auto spec = system_spec(c.data);
    const double lam = spec.param("lambda"), mu = spec.param("mu");
    const std::vector<Complex> full{1.0, lam, lam * lam, mu}, dict_truth{lam, lam * lam, mu};
    stage("metrics", [&] {
        add_eigen_errors(o.report, "lkis", metrics::match_eigenvalues(lk.eigenvalues(), full));
        add_eigen_errors(o.report, "edmd", metrics::match_eigenvalues(ed.eigenvalues(), dict_truth));
        add_eigen_errors(o.report, "edmd_clean", metrics::match_eigenvalues(ed_clean.eigenvalues(), dict_truth));
        add_eigen_errors(o.report, "hankel", metrics::match_eigenvalues(hk.eigenvalues(), full));
        o.report.metrics["noise_sigma"] = c.data.noise_sigma;
        o.report.metrics["best_epoch"] = tr.report.best_epoch;
        return 0;
    });
    stage("write", [&] {
        out.write("eigenvalues_lkis.csv", [&](std::ostream& os) { dmd::write_eigenvalues_csv(os, lk.eigenvalues()); });
        out.write("eigenvalues_edmd.csv", [&](std::ostream& os) { dmd::write_eigenvalues_csv(os, ed.eigenvalues()); });
        out.write("eigenvalues_hankel.csv", [&](std::ostream& os) { dmd::write_eigenvalues_csv(os, hk.eigenvalues()); });
        return 0;
    });
    o.model = tr.model;
    o.loss = tr.report;
    o.result = lk;
    return o;
}

inline Outcome limit_cycle(const ExperimentConfig& c, const Artifacts& out)
{
    Outcome o;
    const Data data = stage("data", [&] { return acquire(c); });
    TrainConfig tc = c.train;
    tc.monitor_full_batch = true;
    auto tr = stage("train", [&] { return train(data.episodes, c.model, tc); });
    const auto lk = stage("fit", [&] { return dmd::fit_model(tr.model, data.episodes); });
    const auto hk = stage("fit", [&] { return dmd::hankel_dmd(data.episodes, 8); });
    stage("metrics", [&] {
        auto& m = o.report.metrics;
        double near = 0.0;
        for (const auto& l : lk.eigenvalues())
            if (std::abs(l) >= 0.95 && std::abs(l) <= 1.05) near += 1.0;
        m["near_unit_count"] = near;
        m["hankel_min_abs"] = hk.eigenvalues().cwiseAbs().minCoeff();
        const auto curve = tr.report.full_batch_curve();
        require(curve.size() >= 4, "need at least 4 epochs for the loss quartiles");
        const std::size_t q = curve.size() / 4;
        double q1 = 0.0, q4 = 0.0;
        for (std::size_t i = 0; i < q; ++i) {
            q1 += curve[i];
            q4 += curve[curve.size() - 1 - i];
        }
        m["rss_first"] = curve.front();
        m["rss_last"] = curve.back();
        m["rss_min"] = *std::min_element(curve.begin(), curve.end());
        m["rss_drop"] = curve.front() / curve.back();
        m["rss_q1_mean"] = q1 / static_cast<double>(q);
        m["rss_q4_mean"] = q4 / static_cast<double>(q);
        o.report.curves["full_batch_rss"] = curve;
        return 0;
    });
    stage("write", [&] {
        out.write("eigenvalues_lkis.csv", [&](std::ostream& os) { dmd::write_eigenvalues_csv(os, lk.eigenvalues()); });
        out.write("eigenvalues_hankel.csv", [&](std::ostream& os) { dmd::write_eigenvalues_csv(os, hk.eigenvalues()); });
        return 0;
    });
    o.model = tr.model;
    o.loss = tr.report;
    o.result = lk;
    return o;
}

inline Outcome basins(const ExperimentConfig& c, const Artifacts& out)
{
    Outcome o;
    const Data data = stage("data", [&] { return acquire(c); });
    auto tr = stage("train", [&] { return train(data.episodes, c.model, c.train); });
    const auto lk = stage("fit", [&] { return dmd::fit_model(tr.model, data.episodes); });
    const auto spec = system_spec(c.data);
    auto map = stage("metrics", [&] { return metrics::basin_map(tr.model, lk, c.grid, spec); });
    stage("metrics", [&] {
        auto& m = o.report.metrics;
        const CVector lc = dmd::to_continuous(lk);
        m["max_re_lambda_c"] = lc.real().maxCoeff();
        m["agreement"] = map.agreement(c.boundary_margin);
        m["shuffled_agreement"] = map.shuffled_agreement(c.boundary_margin, c.seed);
        m["selected_mode"] = static_cast<double>(map.mode);
        m["selected_lambda_c_re"] = map.eigenvalue_c.real();
        m["selected_lambda_c_im"] = map.eigenvalue_c.imag();
        double undecided = 0.0;
        for (const auto& p : map.points) undecided += p.truth == dynamics::BasinLabel::Undecided ? 1.0 : 0.0;
        m["undecided_points"] = undecided;
        return 0;
    });
    stage("write", [&] {
        out.write("eigenvalues_lkis.csv", [&](std::ostream& os) { dmd::write_eigenvalues_csv(os, lk.eigenvalues()); });
        out.write("eigenvalues_continuous.csv",
                  [&](std::ostream& os) { dmd::write_eigenvalues_csv(os, dmd::to_continuous(lk)); });
        out.write("basins.csv", [&](std::ostream& os) {
            os << "x,y,truth,predicted,value_re,value_im,boundary_distance\n";
            for (const auto& p : map.points)
                os << p.x << "," << p.y << "," << dynamics::to_string(p.truth) << "," << dynamics::to_string(p.predicted)
                   << "," << p.value.real() << "," << p.value.imag() << "," << p.boundary_distance << "\n";
        });
        return 0;
    });
    o.model = tr.model;
    o.loss = tr.report;
    o.result = lk;
    o.basins = std::move(map);
    return o;
}

inline Outcome prediction(const ExperimentConfig& c, const Artifacts& out)
{
    Outcome o;
    const Data data = stage("data", [&] { return acquire(c); });
    const Split sp = stage("data", [&] { return split_series(data.episodes.front(), c); });
    // Model lag chosen by validation RMSE at the full horizon when there are
    // several candidates.
    std::vector<Eigen::Index> lags = c.lkis_lags;
    if (lags.empty()) lags = {c.model.k};
    TrainResult tr;
    dmd::DmdResult lk;
    double best_val = std::numeric_limits<double>::infinity();
    for (auto k : lags) {
        Hyperparameters hp = c.model;
        hp.k = k;
        const EpisodeList val = sp.validation.length() > k ? EpisodeList{sp.validation} : EpisodeList{};
        auto cand = stage("train", [&] { return train(EpisodeList{sp.train}, hp, c.train, val); });
        auto res = stage("fit", [&] { return dmd::fit_model(cand.model, EpisodeList{sp.train}); });
        double e = 0.0;
        if (lags.size() > 1) {
            if (sp.validation.length() <= c.horizon + k) continue;
            e = stage("fit", [&] { return metrics::rmse_by_horizon(cand.model, res, sp.validation, c.horizon)(c.horizon - 1); });
            if (!std::isfinite(e)) continue;
        }
        if (e < best_val || tr.report.best_epoch < 0) {
            best_val = e;
            tr = std::move(cand);
            lk = std::move(res);
        }
        if (lags.size() == 1) break;
    }
    if (tr.report.best_epoch < 0) throw ExperimentError("fit", "no usable model lag for the validation split");

    // Hankel baseline: delay chosen by validation RMSE at the full horizon.
    Eigen::Index best_delay = c.hankel_delays.front();
    stage("fit", [&] {
        if (sp.validation.length() <= c.horizon + 1) return 0;
        double best = std::numeric_limits<double>::infinity();
        for (auto d : c.hankel_delays) {
            if (sp.validation.length() <= c.horizon + d || sp.train.length() <= d) continue;
            dmd::HankelObservables h{d, sp.train.dim()};
            const auto res = dmd::fit_model(h, EpisodeList{sp.train});
            const double e = metrics::rmse_by_horizon(h, res, sp.validation, c.horizon)(c.horizon - 1);
            if (e < best) {
                best = e;
                best_delay = d;
            }
        }
        return 0;
    });
    const dmd::HankelObservables hobs{best_delay, sp.train.dim()};
    const auto hk = stage("fit", [&] { return dmd::fit_model(hobs, EpisodeList{sp.train}); });

    Vector lr, hr, pr;
    stage("metrics", [&] {
        lr = metrics::rmse_by_horizon(tr.model, lk, sp.test, c.horizon);
        hr = metrics::rmse_by_horizon(hobs, hk, sp.test, c.horizon);
        pr = metrics::persistence_rmse(sp.test, c.model.k, c.horizon);
        auto& m = o.report.metrics;
        const std::string h = std::to_string(c.horizon);
        m["lkis_rmse_h1"] = lr(0);
        m["lkis_rmse_h" + h] = lr(c.horizon - 1);
        m["hankel_rmse_h1"] = hr(0);
        m["hankel_rmse_h" + h] = hr(c.horizon - 1);
        m["persistence_rmse_h" + h] = pr(c.horizon - 1);
        m["hankel_delay"] = static_cast<double>(best_delay);
        m["lkis_lag"] = static_cast<double>(tr.model.k());
        o.report.curves["lkis_rmse"] = to_std(lr);
        o.report.curves["hankel_rmse"] = to_std(hr);
        o.report.curves["persistence_rmse"] = to_std(pr);
        return 0;
    });
    stage("write", [&] {
        out.write("rmse.csv", [&](std::ostream& os) {
            os << "horizon,lkis,hankel,persistence\n";
            for (Eigen::Index i = 0; i < lr.size(); ++i) os << (i + 1) << "," << lr(i) << "," << hr(i) << "," << pr(i) << "\n";
        });
        out.write("predictions.csv", [&](std::ostream& os) {
            // Forecasts `horizon` steps ahead of every start, first component.
            const Eigen::Index k = tr.model.k();
            const Eigen::Index starts = metrics::forecast_starts(sp.test.length(), k, c.horizon);
            const Matrix w = delay_windows(sp.test.values, k).topRows(starts);
            const auto steps = dmd::predict_windows(tr.model, lk, w, c.horizon);
            const Matrix& f = steps.back();
            os << "t,truth,forecast\n";
            for (Eigen::Index j = 0; j < starts; ++j) {
                const Eigen::Index t = k - 1 + c.horizon + j;
                os << static_cast<double>(sp.test_offset + t) * sp.test.delta_t << "," << sp.test.values(t, 0) << ","
                   << f(j, 0) << "\n";
            }
        });
        out.write("eigenvalues_lkis.csv", [&](std::ostream& os) { dmd::write_eigenvalues_csv(os, lk.eigenvalues()); });
        out.write("eigenvalues_hankel.csv", [&](std::ostream& os) { dmd::write_eigenvalues_csv(os, hk.eigenvalues()); });
        return 0;
    });
    o.model = tr.model;
    o.loss = tr.report;
    o.result = lk;
    return o;
}

inline Outcome detection(const ExperimentConfig& c, const Artifacts& out)
{
    Outcome o;
    const Data data = stage("data", [&] { return acquire(c); });
    const Split sp = stage("data", [&] { return split_series(data.episodes.front(), c); });
    const EpisodeList val = sp.validation.length() > c.model.k ? EpisodeList{sp.validation} : EpisodeList{};
    auto tr = stage("train", [&] { return train(EpisodeList{sp.train}, c.model, c.train, val); });
    const auto lk = stage("fit", [&] { return dmd::fit_model(tr.model, EpisodeList{sp.train}); });
    auto sc = stage("metrics", [&] { return metrics::detect_unstable(tr.model, lk, sp.test); });

    const std::vector<int> rule = metrics::label_amplitude_collapses(sp.test.values.col(0), c.label_window, c.label_drop);
    std::vector<int> labels = rule;
    if (!data.events.empty())
        labels.assign(data.events.begin() + sp.test_offset, data.events.begin() + sp.test_offset + sp.test.length());
    stage("metrics", [&] {
        auto& m = o.report.metrics;
        Vector re_abs = sc.real_part.cwiseAbs();
        m["auc"] = metrics::auc(sc.magnitude, labels, c.tolerance_window);
        m["auc_real_abs"] = metrics::auc(re_abs, labels, c.tolerance_window);
        m["events"] = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
        if (!data.events.empty()) {
            m["rule_labels"] = static_cast<double>(std::count(rule.begin(), rule.end(), 1));
            if (std::count(rule.begin(), rule.end(), 1) > 0) m["auc_rule_labels"] = metrics::auc(sc.magnitude, rule, c.tolerance_window);
        }
        m["mode_abs"] = std::abs(sc.eigenvalue);
        return 0;
    });
    stage("write", [&] {
        out.write("scores.csv", [&](std::ostream& os) {
            os << "t,score,score_real,label\n";
            for (Eigen::Index t = 0; t < sp.test.length(); ++t) {
                os << static_cast<double>(sp.test_offset + t) * sp.test.delta_t << ",";
                if (t >= sc.first_valid) os << sc.magnitude(t) << "," << sc.real_part(t);
                else os << ",";
                os << "," << labels[static_cast<std::size_t>(t)] << "\n";
            }
        });
        out.write("eigenvalues_lkis.csv", [&](std::ostream& os) { dmd::write_eigenvalues_csv(os, lk.eigenvalues()); });
        return 0;
    });
    o.model = tr.model;
    o.loss = tr.report;
    o.result = lk;
    o.scores = std::move(sc);
    return o;
}

} // namespace detail

///
/// Run one experiment. Validates the config first (ConfigError, nothing
/// written), then writes manifest.json, the recipe's CSVs, model.json,
/// dmd.json, loss_curve.csv and metrics.json into output_dir (if set). A
/// failing stage leaves error.json plus whatever was written before it and
/// throws ExperimentError. The training seed is the base seed.
///
inline Outcome run_outcome(const ExperimentConfig& config)
{
    config.validate();
    // Training shuffles and initial weights follow the base seed.
    ExperimentConfig c = config;
    c.train.seed = config.seed;
    const detail::Artifacts out(c.output_dir);
    const std::string hash = config_hash(c);
    const std::string started = detail::utc_now();
    out.json("manifest.json", {{"config", config_to_json(c)},
                               {"config_hash", hash},
                               {"seed", c.seed},
                               {"library_version", kLibraryVersion}});
    try {
        Outcome o;
        switch (c.kind) {
        case ExperimentKind::EigRecovery: o = detail::eig_recovery(c, out); break;
        case ExperimentKind::LimitCycleSpectrum: o = detail::limit_cycle(c, out); break;
        case ExperimentKind::Basins: o = detail::basins(c, out); break;
        case ExperimentKind::Prediction: o = detail::prediction(c, out); break;
        case ExperimentKind::Detection: o = detail::detection(c, out); break;
        }
        o.report.experiment = to_string(c.kind);
        o.report.seed = c.seed;
        o.report.config_hash = hash;
        o.report.started = started;
        o.report.finished = detail::utc_now();
        detail::stage("write", [&] {
            if (o.model) out.json("model.json", model_to_json(*o.model));
            if (o.result) out.json("dmd.json", dmd::result_to_json(*o.result));
            if (o.loss) out.write("loss_curve.csv", [&](std::ostream& os) { detail::write_loss_curve(os, *o.loss); });
            out.json("metrics.json", report_to_json(o.report));
            return 0;
        });
        for (const auto& [name, v] : o.report.metrics)
            if (!std::isfinite(v)) throw ExperimentError("metrics", "metric '" + name + "' is not finite");
        return o;
    } catch (const ExperimentError& e) {
        try {
            out.json("error.json", {{"stage", e.stage}, {"message", e.what()}, {"config_hash", hash}});
        } catch (...) {
        }
        throw;
    }
}

inline MetricReport run(const ExperimentConfig& c) { return run_outcome(c).report; }

} // namespace lkis::experiments

#endif // LKIS_EXPERIMENTS_HPP
