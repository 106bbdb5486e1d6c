#include <lkis/experiments.hpp>

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>
#include <unistd.h>

using namespace lkis;
using namespace lkis::experiments;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name)
{
    const auto p = fs::temp_directory_path() / ("lkis_test_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    return p;
}

ExperimentConfig small_eig_config()
{
    auto c = default_config(ExperimentKind::EigRecovery);
    c.data.episodes = 20;
    c.train.max_epochs = 3;
    return c;
}

nlohmann::json read_json(const fs::path& p)
{
    std::ifstream f(p);
    return nlohmann::json::parse(f);
}

int cli(const std::string& args)
{
    const std::string cmd = std::string(LKIS_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST(Config, JsonRoundTrip)
{
    for (auto k : {ExperimentKind::EigRecovery, ExperimentKind::LimitCycleSpectrum, ExperimentKind::Basins,
                   ExperimentKind::Prediction, ExperimentKind::Detection}) {
        const auto c = default_config(k);
        EXPECT_NO_THROW(c.validate());
        const auto back = config_from_json(nlohmann::json::parse(config_to_json(c).dump()));
        EXPECT_EQ(config_to_json(back), config_to_json(c));
        EXPECT_EQ(config_hash(back), config_hash(c));
    }
}

TEST(Config, HashIgnoresOutputDirOnly)
{
    auto a = small_eig_config(), b = a;
    b.output_dir = "/somewhere/else";
    EXPECT_EQ(config_hash(a), config_hash(b));
    b.seed = 1;
    EXPECT_NE(config_hash(a), config_hash(b));
    EXPECT_EQ(config_hash(a).size(), 16u);
}

TEST(Config, PartialJsonKeepsBase)
{
    const auto base = default_config(ExperimentKind::Prediction);
    const auto c = config_from_json(nlohmann::json{{"seed", 3}, {"model", {{"n", 12}}}}, base);
    EXPECT_EQ(c.seed, 3u);
    EXPECT_EQ(c.model.n, 12);
    EXPECT_EQ(c.model.k, base.model.k);
    EXPECT_EQ(c.data.system, base.data.system);
}

TEST(Config, UnknownKeysRejected)
{
    EXPECT_THROW(config_from_json(nlohmann::json{{"sed", 3}}), ConfigError);
    EXPECT_THROW(config_from_json(nlohmann::json{{"model", {{"width", 3}}}}), ConfigError);
    EXPECT_THROW(config_from_json(nlohmann::json{{"kind", "nope"}}), ConfigError);
    EXPECT_THROW(config_from_json(nlohmann::json{{"horizon", "long"}}), ConfigError);
}

TEST(Config, ValidationErrors)
{
    auto c = small_eig_config();
    c.horizon = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_eig_config();
    c.data.system = "duffing";
    EXPECT_THROW(c.validate(), ConfigError);
    c = default_config(ExperimentKind::Prediction);
    c.train_fraction = 0.8;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Run, MissingCsvFailsBeforeAnyWork)
{
    auto c = default_config(ExperimentKind::Prediction);
    c.data.csv_path = "/nonexistent/lorenz.csv";
    c.output_dir = fresh_dir("missing").string();
    try {
        (void)run(c);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/lorenz.csv"), std::string::npos);
    }
    EXPECT_FALSE(fs::exists(c.output_dir));
}

TEST(Run, DeterministicAndWritesArtifacts)
{
    auto c = small_eig_config();
    const fs::path dir = fresh_dir("eig");
    c.output_dir = dir.string();
    const auto a = run(c);
    c.output_dir.clear();
    const auto b = run(c);
    EXPECT_EQ(a.metrics, b.metrics);
    EXPECT_EQ(a.config_hash, b.config_hash);
    EXPECT_EQ(a.experiment, "eig_recovery");
    for (const char* key : {"lkis_max_error", "edmd_max_error", "edmd_clean_max_error", "hankel_max_error"})
        EXPECT_TRUE(a.metrics.count(key)) << key;

    for (const char* f : {"manifest.json", "metrics.json", "model.json", "dmd.json", "loss_curve.csv",
                          "eigenvalues_lkis.csv", "eigenvalues_edmd.csv", "eigenvalues_hankel.csv"})
        EXPECT_TRUE(fs::exists(dir / f)) << f;
    const auto manifest = read_json(dir / "manifest.json");
    EXPECT_EQ(manifest.at("config_hash"), a.config_hash);
    EXPECT_EQ(manifest.at("library_version"), kLibraryVersion);
    // the manifest's config replays to the same metrics
    auto replay = config_from_json(manifest.at("config"));
    replay.output_dir.clear();
    EXPECT_EQ(run(replay).metrics, a.metrics);
    fs::remove_all(dir);
}

TEST(Run, StageFailureLeavesErrorFile)
{
    const fs::path dir = fresh_dir("stage");
    fs::create_directories(dir);
    {
        std::ofstream f(dir / "tiny.csv");
        f << "# delta_t=1\n1\n2\n3\n4\n5\n";
    }
    auto c = default_config(ExperimentKind::Prediction);
    c.data.csv_path = (dir / "tiny.csv").string();
    c.output_dir = (dir / "out").string();
    try {
        (void)run(c);
        FAIL();
    } catch (const ExperimentError& e) {
        EXPECT_EQ(e.stage, "data");
    }
    const auto err = read_json(dir / "out" / "error.json");
    EXPECT_EQ(err.at("stage"), "data");
    EXPECT_TRUE(fs::exists(dir / "out" / "manifest.json"));
    EXPECT_FALSE(fs::exists(dir / "out" / "metrics.json"));
    fs::remove_all(dir);
}

TEST(Cli, ExitCodes)
{
    EXPECT_EQ(cli("--version"), 0);
    EXPECT_EQ(cli(""), 2);
    EXPECT_EQ(cli("run --kind nonsense"), 2);
    EXPECT_EQ(cli("train --data /nonexistent/file.csv"), 2);
    const fs::path dir = fresh_dir("cli");
    fs::create_directories(dir);
    {
        std::ofstream f(dir / "tiny.csv");
        f << "# delta_t=1\n1\n2\n3\n";
    }
    EXPECT_EQ(cli("run --kind prediction --data " + (dir / "tiny.csv").string() + " -o " + (dir / "out").string()), 1);
    EXPECT_TRUE(fs::exists(dir / "out" / "error.json"));
    EXPECT_EQ(cli("simulate --system fixed_point --steps 20 -o " + (dir / "fp.csv").string()), 0);
    EXPECT_TRUE(fs::exists(dir / "fp.csv"));
    fs::remove_all(dir);
}
