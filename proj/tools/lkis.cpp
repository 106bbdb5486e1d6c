// Command-line front end: simulate, train, dmd, predict, detect, basins, run.
//
// Exit codes: 0 success, 1 experiment/runtime error, 2 configuration error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <lkis/dmd.hpp>
#include <lkis/dynamics.hpp>
#include <lkis/experiments.hpp>
#include <lkis/io.hpp>
#include <lkis/lkis_model.hpp>
#include <lkis/metrics.hpp>

namespace {

using namespace lkis;
namespace ex = lkis::experiments;

constexpr int kOk = 0;
constexpr int kRunError = 1;
constexpr int kConfigError = 2;

nlohmann::json read_json(const std::string& path)
{
    std::ifstream f(path);
    if (!f) throw ex::ConfigError("cannot open '" + path + "'");
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
        throw ex::ConfigError("'" + path + "' is not valid JSON: " + e.what());
    }
}

void write_json(const std::string& path, const nlohmann::json& j)
{
    if (path.empty() || path == "-") {
        std::cout << j.dump(2) << "\n";
        return;
    }
    std::ofstream f(path);
    if (!f) throw Error("cannot write '" + path + "'");
    f << j.dump(2) << "\n";
}

/// Output stream for a path, "-" or empty meaning stdout.
class Sink
{
public:
    explicit Sink(const std::string& path)
    {
        if (!path.empty() && path != "-") {
            file_.open(path);
            if (!file_) throw Error("cannot write '" + path + "'");
        }
    }
    std::ostream& get() { return file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout; }

private:
    std::ofstream file_;
};

EpisodeList load(const std::string& path, double dt)
{
    if (!std::filesystem::exists(path)) throw ex::ConfigError("data file '" + path + "' does not exist");
    io::LoadOptions opt;
    if (dt > 0.0) opt.delta_t = dt;
    return io::load_series_file(path, opt);
}

// --- simulate ---------------------------------------------------------------

struct SimulateArgs
{
    std::string system = "fixed_point";
    Eigen::Index steps = 1000;
    std::vector<double> x0;
    std::vector<double> half_width{1.0};
    std::size_t episodes = 1;
    std::uint64_t seed = 0;
    double noise = 0.0;
    Eigen::Index discard = 0;
    double dt = 0.0;
    std::string out;
    std::string manifest;
};

int cmd_simulate(const SimulateArgs& a)
{
    ex::DataConfig d;
    d.system = a.system;
    d.delta_t = a.dt;
    const auto spec = ex::detail::system_spec(d);
    std::vector<dynamics::Trajectory> trs;
    if (!a.x0.empty()) {
        if (static_cast<Eigen::Index>(a.x0.size()) != spec.state_dim())
            throw ex::ConfigError("--x0 needs " + std::to_string(spec.state_dim()) + " values");
        Vector x0 = Eigen::Map<const Vector>(a.x0.data(), static_cast<Eigen::Index>(a.x0.size()));
        trs.push_back(dynamics::simulate(spec, x0, a.steps, a.seed, a.noise, a.discard));
    } else {
        d.ic_half_width = a.half_width;
        if (a.half_width.size() != 1 && static_cast<Eigen::Index>(a.half_width.size()) != spec.state_dim())
            throw ex::ConfigError("--ic-half-width needs 1 or " + std::to_string(spec.state_dim()) + " values");
        const Vector w = ex::detail::box(d, spec.state_dim());
        trs = dynamics::simulate_episodes(spec, a.episodes, a.steps, -w, w, a.seed, a.noise, a.discard);
    }
    Sink sink(a.out);
    if (trs.size() == 1) dynamics::write_csv(sink.get(), trs.front());
    else io::write_series(sink.get(), dynamics::as_episodes(trs));
    if (!a.manifest.empty()) {
        nlohmann::json m = nlohmann::json::array();
        for (const auto& t : trs) m.push_back(dynamics::manifest(t));
        write_json(a.manifest, trs.size() == 1 ? m.front() : m);
    }
    return kOk;
}

// --- train ------------------------------------------------------------------

struct TrainArgs
{
    std::string data;
    double dt = 0.0;
    Hyperparameters hp;
    TrainConfig cfg;
    std::string optimizer = "adam";
    std::string out = "model.json";
    std::string report;
};

int cmd_train(TrainArgs a)
{
    const auto eps = load(a.data, a.dt);
    a.cfg.optimizer.kind = nn::optimizer_kind_from_string(a.optimizer);
    const auto res = train(eps, a.hp, a.cfg);
    write_json(a.out, model_to_json(res.model));
    if (!a.report.empty()) write_json(a.report, report_to_json(res.report));
    std::cerr << "best epoch " << res.report.best_epoch << ", loss " << res.report.best_validation << "\n";
    return kOk;
}

// --- dmd --------------------------------------------------------------------

struct DmdArgs
{
    std::string data;
    double dt = 0.0;
    std::string model;
    Eigen::Index hankel_delay = 0;
    std::string out;
    std::string eigs;
    bool continuous = false;
};

int cmd_dmd(const DmdArgs& a)
{
    const auto eps = load(a.data, a.dt);
    dmd::DmdResult res;
    if (!a.model.empty()) {
        res = dmd::fit_model(model_from_json(read_json(a.model)), eps);
    } else {
        if (a.hankel_delay < 1) throw ex::ConfigError("give --model or --hankel-delay");
        res = dmd::hankel_dmd(eps, a.hankel_delay);
    }
    if (!a.out.empty()) write_json(a.out, dmd::result_to_json(res));
    Sink sink(a.eigs);
    dmd::write_eigenvalues_csv(sink.get(), a.continuous ? dmd::to_continuous(res) : res.eigenvalues());
    return kOk;
}

// --- predict / detect / basins ---------------------------------------------

struct FittedArgs
{
    std::string model;
    std::string dmd;
    std::string data;
    double dt = 0.0;
    std::string out;
};

struct Fitted
{
    LkisModel model;
    dmd::DmdResult res;
};

Fitted load_fitted(const FittedArgs& a)
{
    Fitted f{model_from_json(read_json(a.model)), dmd::result_from_json(read_json(a.dmd))};
    if (f.res.size() != f.model.n()) throw ex::ConfigError("DMD result does not belong to this model");
    return f;
}

int cmd_predict(const FittedArgs& a, Eigen::Index horizon)
{
    const auto f = load_fitted(a);
    const auto eps = load(a.data, a.dt);
    const TimeSeries& s = eps.back();
    if (s.length() < f.model.k()) throw ex::ConfigError("history shorter than the model window k");
    const Matrix out = dmd::predict(f.model, f.res, s.values.bottomRows(f.model.k()), horizon);
    Sink sink(a.out);
    auto& os = sink.get();
    os << std::setprecision(17) << "step";
    for (Eigen::Index c = 0; c < out.cols(); ++c) os << ",y" << (c + 1);
    os << "\n";
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        os << (i + 1);
        for (Eigen::Index c = 0; c < out.cols(); ++c) os << "," << out(i, c);
        os << "\n";
    }
    return kOk;
}

struct DetectArgs
{
    Eigen::Index window = 50;
    double drop = 0.5;
    Eigen::Index tolerance = 5;
    bool real_part = false;
};

int cmd_detect(const FittedArgs& a, const DetectArgs& d)
{
    const auto f = load_fitted(a);
    const auto eps = load(a.data, a.dt);
    const TimeSeries& s = eps.front();
    const auto sc = metrics::detect_unstable(f.model, f.res, s);
    const auto labels = metrics::label_amplitude_collapses(s.values.col(0), d.window, d.drop);
    const Vector score = d.real_part ? Vector(sc.real_part) : Vector(sc.magnitude);
    Sink sink(a.out);
    auto& os = sink.get();
    os << std::setprecision(17) << "t,score,label\n";
    for (Eigen::Index t = 0; t < s.length(); ++t) {
        os << static_cast<double>(t) * s.delta_t << ",";
        if (t >= sc.first_valid) os << score(t);
        os << "," << labels[static_cast<std::size_t>(t)] << "\n";
    }
    try {
        std::cerr << "auc " << metrics::auc(sc.magnitude, labels, d.tolerance) << " (tolerance " << d.tolerance << ")\n";
    } catch (const InvalidArgument& e) {
        std::cerr << "auc not available: " << e.what() << "\n";
    }
    return kOk;
}

int cmd_basins(const FittedArgs& a, Eigen::Index resolution, double margin)
{
    const auto f = load_fitted(a);
    metrics::GridSpec g;
    g.nx = g.ny = resolution;
    const auto map = metrics::basin_map(f.model, f.res, g);
    Sink sink(a.out);
    auto& os = sink.get();
    os << std::setprecision(17) << "x,y,truth,predicted,value_re,value_im,boundary_distance\n";
    for (const auto& p : map.points)
        os << p.x << "," << p.y << "," << dynamics::to_string(p.truth) << "," << dynamics::to_string(p.predicted) << ","
           << p.value.real() << "," << p.value.imag() << "," << p.boundary_distance << "\n";
    std::cerr << "agreement " << map.agreement(margin) << " (margin " << margin << ")\n";
    return kOk;
}

// --- run --------------------------------------------------------------------

///
/// Builds the experiment config: defaults for the kind, then the config
/// file, then any flag given on the command line.
///
struct RunArgs
{
    std::string config;
    std::string kind;
    std::string out;
    nlohmann::json overrides = nlohmann::json::object();
};

ex::ExperimentConfig resolve_run_config(const RunArgs& a)
{
    nlohmann::json file = a.config.empty() ? nlohmann::json::object() : read_json(a.config);
    std::string kind = a.kind;
    if (kind.empty()) kind = file.value("kind", std::string("eig_recovery"));
    auto c = ex::default_config(ex::experiment_kind_from_string(kind));
    c = ex::config_from_json(file, c);
    c = ex::config_from_json(a.overrides, c);
    c.kind = ex::experiment_kind_from_string(kind);
    if (!a.out.empty()) c.output_dir = a.out;
    return c;
}

int cmd_run(const RunArgs& a)
{
    const auto c = resolve_run_config(a);
    const auto report = ex::run(c);
    std::cout << ex::report_to_json(report).dump(2) << "\n";
    return kOk;
}

/// Registers a flag that, when given, patches `path` in the override JSON.
template <typename T>
void override_opt(CLI::App* app, RunArgs& args, const std::string& flag, const nlohmann::json::json_pointer& path,
                  const std::string& help)
{
    app->add_option_function<T>(
        flag, [&args, path](const T& v) { args.overrides[path] = v; }, help);
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Learning Koopman invariant subspaces: simulation, training, DMD and evaluation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(ex::kLibraryVersion));

    // simulate
    SimulateArgs sim;
    auto* s = app.add_subcommand("simulate", "Simulate a benchmark system to CSV");
    s->add_option("--system", sim.system, "fixed_point, fhn, duffing, lorenz or rossler")->capture_default_str();
    s->add_option("--steps", sim.steps, "Samples per trajectory")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--x0", sim.x0, "Initial state (otherwise drawn from the box)");
    s->add_option("--ic-half-width", sim.half_width, "Initial states uniform in [-w, w] per component");
    s->add_option("--episodes", sim.episodes, "Number of trajectories")->capture_default_str();
    s->add_option("--seed", sim.seed, "Base seed")->capture_default_str();
    s->add_option("--noise", sim.noise, "Observation noise sigma")->capture_default_str()->check(CLI::NonNegativeNumber);
    s->add_option("--discard", sim.discard, "Burn-in samples")->capture_default_str()->check(CLI::NonNegativeNumber);
    s->add_option("--dt", sim.dt, "Sample interval for continuous systems (0 = default)");
    s->add_option("-o,--out", sim.out, "Output CSV (default stdout)");
    s->add_option("--manifest", sim.manifest, "Write a JSON manifest for bit-exact regeneration");

    // train
    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train an LKIS model on a CSV series");
    t->add_option("--data", tr.data, "Input CSV")->required();
    t->add_option("--dt", tr.dt, "Sample interval (overrides the file header)");
    t->add_option("-k,--lag", tr.hp.k, "Maximum lag k")->capture_default_str();
    t->add_option("-p,--embed-dim", tr.hp.p, "Embedded dimension p (0 = min(kr, 2r+1))")->capture_default_str();
    t->add_option("-n,--observables", tr.hp.n, "Number of observables n")->capture_default_str();
    t->add_option("--alpha", tr.hp.alpha, "Reconstruction weight")->capture_default_str();
    t->add_option("--l1", tr.hp.l1_phi, "L1 weight on the embedder")->capture_default_str();
    t->add_option("--hidden-layers", tr.hp.hidden_layers, "Hidden layers per network")->capture_default_str();
    t->add_option("--hidden-size", tr.hp.hidden_size, "Hidden width (0 = mean of in and out)")->capture_default_str();
    t->add_option("--batch", tr.cfg.batch_size, "Mini-batch size")->capture_default_str();
    t->add_option("--epochs", tr.cfg.max_epochs, "Maximum epochs")->capture_default_str();
    t->add_option("--lr", tr.cfg.optimizer.learning_rate, "Learning rate")->capture_default_str();
    t->add_option("--optimizer", tr.optimizer, "sgd, sgd-momentum or adam")->capture_default_str();
    t->add_option("--lr-decay", tr.cfg.lr_decay, "Per-epoch learning-rate factor")->capture_default_str();
    t->add_option("--validation-fraction", tr.cfg.validation_fraction, "Held-out fraction")->capture_default_str();
    t->add_option("--patience", tr.cfg.patience, "Early-stopping patience (0 = off)")->capture_default_str();
    t->add_option("--seed", tr.cfg.seed, "Seed")->capture_default_str();
    t->add_flag("--standardize", tr.cfg.standardize, "Standardize measurements");
    t->add_flag("--monitor", tr.cfg.monitor_full_batch, "Record full-batch RSS each epoch");
    t->add_option("-o,--out", tr.out, "Model JSON")->capture_default_str();
    t->add_option("--report", tr.report, "Loss report JSON");

    // dmd
    DmdArgs dm;
    auto* d = app.add_subcommand("dmd", "Fit DMD on model observables or a Hankel embedding");
    d->add_option("--data", dm.data, "Input CSV")->required();
    d->add_option("--dt", dm.dt, "Sample interval");
    d->add_option("--model", dm.model, "Model JSON");
    d->add_option("--hankel-delay", dm.hankel_delay, "Use raw delays instead of a model");
    d->add_option("-o,--out", dm.out, "DmdResult JSON");
    d->add_option("--eigs", dm.eigs, "Eigenvalue CSV (default stdout)");
    d->add_flag("--continuous", dm.continuous, "Report continuous-time eigenvalues");

    // predict
    FittedArgs pa;
    Eigen::Index horizon = 30;
    auto* p = app.add_subcommand("predict", "Forecast from the last k samples of a series");
    for (auto* sub : {p}) {
        sub->add_option("--model", pa.model, "Model JSON")->required();
        sub->add_option("--dmd", pa.dmd, "DmdResult JSON")->required();
        sub->add_option("--data", pa.data, "History CSV")->required();
        sub->add_option("--dt", pa.dt, "Sample interval");
        sub->add_option("-o,--out", pa.out, "Output CSV (default stdout)");
    }
    p->add_option("--horizon", horizon, "Steps ahead")->capture_default_str()->check(CLI::PositiveNumber);

    // detect
    FittedArgs da;
    DetectArgs det;
    auto* dt = app.add_subcommand("detect", "Score a series by the fastest-decaying eigenfunction");
    dt->add_option("--model", da.model, "Model JSON")->required();
    dt->add_option("--dmd", da.dmd, "DmdResult JSON")->required();
    dt->add_option("--data", da.data, "Series CSV")->required();
    dt->add_option("--dt", da.dt, "Sample interval");
    dt->add_option("-o,--out", da.out, "Scores CSV (default stdout)");
    dt->add_option("--label-window", det.window, "Amplitude window for event labels")->capture_default_str();
    dt->add_option("--label-drop", det.drop, "Relative amplitude drop for an event")->capture_default_str();
    dt->add_option("--tolerance", det.tolerance, "AUC tolerance window")->capture_default_str();
    dt->add_flag("--real-part", det.real_part, "Write Re(phi) instead of |phi|");

    // basins
    FittedArgs ba;
    Eigen::Index resolution = 21;
    double margin = 0.2;
    auto* b = app.add_subcommand("basins", "Duffing basin map from a trained model");
    b->add_option("--model", ba.model, "Model JSON")->required();
    b->add_option("--dmd", ba.dmd, "DmdResult JSON")->required();
    b->add_option("--resolution", resolution, "Grid points per axis over [-2, 2]")->capture_default_str();
    b->add_option("--margin", margin, "Distance from the boundary for the agreement score")->capture_default_str();
    b->add_option("-o,--out", ba.out, "Output CSV (default stdout)");

    // run
    RunArgs ra;
    auto* r = app.add_subcommand("run", "Run an experiment end to end");
    r->add_option("--config", ra.config, "JSON config file");
    r->add_option("--kind", ra.kind, "eig_recovery, limit_cycle, basins, prediction or detection");
    r->add_option("-o,--out", ra.out, "Output directory");
    using ptr = nlohmann::json::json_pointer;
    override_opt<std::uint64_t>(r, ra, "--seed", ptr("/seed"), "Base seed");
    override_opt<std::string>(r, ra, "--system", ptr("/data/system"), "Named system");
    override_opt<std::string>(r, ra, "--data", ptr("/data/csv_path"), "CSV input instead of a simulation");
    override_opt<double>(r, ra, "--dt", ptr("/data/delta_t"), "Sample interval");
    override_opt<std::size_t>(r, ra, "--episodes", ptr("/data/episodes"), "Episodes to simulate");
    override_opt<Eigen::Index>(r, ra, "--length", ptr("/data/length"), "Samples per episode");
    override_opt<Eigen::Index>(r, ra, "--discard", ptr("/data/discard"), "Burn-in samples");
    override_opt<std::vector<double>>(r, ra, "--ic-half-width", ptr("/data/ic_half_width"), "Initial-state box");
    override_opt<double>(r, ra, "--noise", ptr("/data/noise_sigma"), "Observation noise sigma");
    override_opt<Eigen::Index>(r, ra, "--lag", ptr("/model/k"), "Maximum lag k");
    override_opt<Eigen::Index>(r, ra, "--embed-dim", ptr("/model/p"), "Embedded dimension p");
    override_opt<Eigen::Index>(r, ra, "--observables", ptr("/model/n"), "Number of observables n");
    override_opt<double>(r, ra, "--alpha", ptr("/model/alpha"), "Reconstruction weight");
    override_opt<double>(r, ra, "--l1", ptr("/model/l1_phi"), "L1 weight on the embedder");
    override_opt<int>(r, ra, "--hidden-layers", ptr("/model/hidden_layers"), "Hidden layers per network");
    override_opt<Eigen::Index>(r, ra, "--hidden-size", ptr("/model/hidden_size"), "Hidden width");
    override_opt<Eigen::Index>(r, ra, "--batch", ptr("/train/batch_size"), "Mini-batch size");
    override_opt<int>(r, ra, "--epochs", ptr("/train/max_epochs"), "Maximum epochs");
    override_opt<double>(r, ra, "--lr", ptr("/train/learning_rate"), "Learning rate");
    override_opt<std::string>(r, ra, "--optimizer", ptr("/train/optimizer"), "sgd, sgd-momentum or adam");
    override_opt<double>(r, ra, "--train-fraction", ptr("/split/train"), "Training share of a single series");
    override_opt<double>(r, ra, "--validation-fraction", ptr("/split/validation"), "Validation share");
    override_opt<double>(r, ra, "--test-fraction", ptr("/split/test"), "Test share");
    override_opt<Eigen::Index>(r, ra, "--horizon", ptr("/horizon"), "Forecast horizon");
    override_opt<Eigen::Index>(r, ra, "--tolerance", ptr("/tolerance_window"), "AUC tolerance window");
    override_opt<Eigen::Index>(r, ra, "--grid", ptr("/grid/nx"), "Basin grid points along x");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        (void)app.exit(e);
        return kConfigError;
    }

    try {
        if (*s) return cmd_simulate(sim);
        if (*t) return cmd_train(tr);
        if (*d) return cmd_dmd(dm);
        if (*p) return cmd_predict(pa, horizon);
        if (*dt) return cmd_detect(da, det);
        if (*b) return cmd_basins(ba, resolution, margin);
        if (*r) {
            if (ra.overrides.contains("grid")) ra.overrides["grid"]["ny"] = ra.overrides["grid"]["nx"];
            return cmd_run(ra);
        }
    } catch (const ex::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const ex::ExperimentError& e) {
        std::cerr << "experiment failed in stage '" << e.stage << "': " << e.what() << "\n";
        return kRunError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRunError;
    }
    return kConfigError;
}
