#include "steerreg/experiment.hpp"

#include <doctest.h>
#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace steerreg;
using namespace steerreg::exp;
namespace fs = std::filesystem;

namespace {

const char* kEquivariant = R"(
[data]
extent = 17
pairs = 2
seed = 5
blobs = 3
labels = 4
[model]
variant = equivariant
[encoder]
channels = 8, 16, 16, 16
strides = 1, 2, 2, 2
ratio = "5:2:1"
first_level_ratio = "1:1"
[loss]
window = 5
[optim]
steps = 3
seed = 2
[sweep]
angles = 0
)";

std::string read(const fs::path& p) {
    std::ifstream f(p);
    std::stringstream s;
    s << f.rdbuf();
    return s.str();
}

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("steerreg_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(STEERREG_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_config(const fs::path& dir, const std::string& name, const std::string& text) {
    std::ofstream(dir / name) << text;
    return dir / name;
}

}  // namespace

TEST_CASE("ini parsing") {
    const IniFile ini = IniFile::parse("# comment\n[a]\n; another\nx = 1\ny=\"two words\"\n\n[b]\nz = 3\n");
    CHECK(ini.sections.at("a").at("x") == "1");
    CHECK(ini.sections.at("a").at("y") == "two words");
    CHECK(ini.sections.at("b").at("z") == "3");
    CHECK_THROWS_AS(IniFile::parse("x = 1\n"), ConfigError);
    CHECK_THROWS_AS(IniFile::parse("[a]\nx = 1\nx = 2\n"), ConfigError);
    CHECK_THROWS_AS(IniFile::parse("[a]\njust text\n"), ConfigError);
    CHECK_THROWS_AS(IniFile::parse("[a\nx = 1\n"), ConfigError);
}

TEST_CASE("experiment configs") {
    const ExperimentConfig d = ExperimentConfig::parse("");
    CHECK(d.data.extent == 33);
    CHECK(d.n_pairs == 10);
    CHECK(d.model.variant == reg::Variant::standard);
    CHECK(d.train.steps == 2000);
    CHECK(d.train.lr == 1e-3);
    CHECK(d.train.loss.ncc_window == 9);
    CHECK(ExperimentConfig::parse("[data]\nextent = 25\nblobs = 3\nlabels = 4\n").train.loss.ncc_window == 5);
    CHECK(ExperimentConfig::parse("[data]\nextent = 25\nblobs = 3\nlabels = 4\n[loss]\nwindow = 7\n").train.loss.ncc_window == 7);

    const ExperimentConfig e = ExperimentConfig::parse(kEquivariant);
    CHECK(e.model.variant == reg::Variant::equivariant);
    CHECK(e.model.deep_ratio == layers::Ratio{5, 2, 1});
    CHECK(e.model.first_ratio == layers::Ratio{1, 1, 0});
    CHECK(e.train.steps == 3);
    CHECK(e.model.seed == 2);
    CHECK(e.sweep.angles == std::vector<double>{0.0});

    CHECK_THROWS_AS(ExperimentConfig::parse("[model]\nvariant = equivariant\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("[encoder]\nratio = 5:2:1\nfirst_level_ratio = 1:1\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("[data]\nmystery = 1\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("[nowhere]\nx = 1\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("[encoder]\nstrides = 1, 3, 2, 2\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("[sweep]\nfractions = 1, 0.3\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("[optim]\nsteps = many\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("[loss]\nwindow = 4\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("[data]\nlabels = 40\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::load("/nonexistent/steerreg.ini"), ConfigError);
}

TEST_CASE("config hashes cover results, not paths or formatting") {
    const ExperimentConfig a = ExperimentConfig::parse(kEquivariant);
    const ExperimentConfig b = ExperimentConfig::parse(std::string("# header\n") + kEquivariant + "[output]\ndir = elsewhere\n");
    CHECK(a.hash() == b.hash());
    CHECK(a.hash_hex().size() == 16);
    CHECK(a.hash() == ExperimentConfig::parse(kEquivariant).hash());
    std::string changed = kEquivariant;
    changed.replace(changed.find("steps = 3"), 9, "steps = 4");
    CHECK(ExperimentConfig::parse(changed).hash() != a.hash());
    CHECK(hex64(0xabcull) == "0000000000000abc");
}

TEST_CASE("sweep channel totals") {
    SweepSettings s;
    std::vector<int> totals;
    for (const auto& r : s.ratios) {
        const layers::RatioMode mode = sweep_mode(r, 16);
        const auto type = mode == layers::RatioMode::budget ? layers::budget_field_type(16, r)
                                                            : so3::FieldType::from_multiplicities({r[0], r[1], r[2]});
        totals.push_back(type.total_channels());
    }
    CHECK(totals == std::vector<int>{16, 15, 15, 16, 16, 16, 18});
    CHECK(sweep_mode({2, 2, 2}, 16) == layers::RatioMode::literal);
    CHECK(sweep_mode({5, 2, 1}, 16) == layers::RatioMode::budget);

    ExperimentConfig cfg = ExperimentConfig::parse(kEquivariant);
    cfg.train.steps = 0;
    cfg.sweep.seeds = {1};
    const auto rows = ratio_sweep(cfg);
    REQUIRE(rows.size() == 7);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].level_channels.size() == 4);
        CHECK(rows[i].level_channels[1] == totals[i]);
        CHECK(std::isnan(rows[i].dice));
    }
}

TEST_CASE("parameter counts at the VM budget") {
    const ParamCounts c = param_counts(ExperimentConfig::parse(kEquivariant));
    CHECK(c.equivariant_encoder < c.standard_encoder);
    CHECK(c.model_ratio() > 0.5);
    CHECK(c.model_ratio() < 1.0);
    CHECK(c.encoder_ratio() < c.model_ratio());
}

TEST_CASE("pairs and variants") {
    const ExperimentConfig cfg = ExperimentConfig::parse(kEquivariant);
    const auto a = make_pairs(cfg.data, 2), b = make_pairs(cfg.data, 3, 1);
    CHECK(a[1].fixed == b[0].fixed);
    CHECK_FALSE(a[0].fixed == b[0].fixed);
    CHECK(config_pairs(cfg).size() == 2);
    CHECK(pointers(a).size() == 2);

    const reg::ModelConfig st = with_variant(cfg.model, reg::Variant::standard);
    CHECK(st.variant == reg::Variant::standard);
    CHECK(st.channels == cfg.model.channels);
    CHECK(st.deep_ratio == cfg.model.deep_ratio);

    const std::vector<RotationRow> rows{{0, 0, 0.9, 0}, {0, 1, 0.7, 0}, {15, 0, 0.6, 0}, {-15, 0, 0.8, 0}};
    CHECK(dice_drop(rows, 15) == doctest::Approx(0.1));
}

TEST_CASE("octahedral audits of untrained encoders") {
    ExperimentConfig cfg = ExperimentConfig::parse(kEquivariant);
    auto eq = make_model(cfg.model);
    auto st = make_model(with_variant(cfg.model, reg::Variant::standard));
    CHECK(encoder_octahedral_residual(*eq, 17, 1) <= 1e-5);
    CHECK(encoder_octahedral_residual(*st, 17, 1) >= 0.1);
    const EquivarianceReport r = equivariance_report(*eq, cfg.data, 1);
    CHECK(r.layers.size() == 4);
    for (const auto& l : r.layers) CHECK(l.octahedral <= 1e-6);
    CHECK(r.generic_stack.size() == 3);
    CHECK(r.generic_basis.size() == 3);
}

TEST_CASE("command line") {
    const fs::path dir = scratch("main");
    const fs::path cfg = write_config(dir, "eq.ini", kEquivariant);
    const std::string base = "--config " + cfg.string() + " --out ";

    CHECK(run_cli("param-count " + base + (dir / "pc").string()) == 0);
    const auto pc = nlohmann::json::parse(read(dir / "pc" / "param_count.json"));
    const std::string hash = ExperimentConfig::load(cfg).hash_hex();
    CHECK(pc.at("config_hash") == hash);

    // Invalid configuration and bad arguments exit with 2.
    CHECK(run_cli("param-count --config " + write_config(dir, "bad.ini", "[model]\nvariant = equivariant\n").string()) == 2);
    CHECK(run_cli("param-count --config " + (dir / "missing.ini").string()) == 2);
    CHECK(run_cli("no-such-command") == 2);
    CHECK(run_cli("param-count") == 2);
    // Runtime failure (missing checkpoint) exits with 1.
    CHECK(run_cli("eval " + base + (dir / "x").string() + " --checkpoint " + (dir / "none.strg").string()) == 1);

    // Train twice: outputs are reproducible byte for byte.
    REQUIRE(run_cli("train " + base + (dir / "t1").string()) == 0);
    REQUIRE(run_cli("train " + base + (dir / "t2").string()) == 0);
    CHECK(read(dir / "t1" / "checkpoint.strg") == read(dir / "t2" / "checkpoint.strg"));
    CHECK(read(dir / "t1" / "train_curve.csv") == read(dir / "t2" / "train_curve.csv"));
    CHECK(read(dir / "t1" / "train_curve.csv").rfind("# config_hash=" + hash, 0) == 0);

    // rotate-eval at 0 degrees reproduces eval.
    const std::string ckpt = " --checkpoint " + (dir / "t1" / "checkpoint.strg").string();
    REQUIRE(run_cli("eval " + base + (dir / "t1").string() + ckpt) == 0);
    REQUIRE(run_cli("rotate-eval " + base + (dir / "t1").string() + ckpt) == 0);
    for (int p = 0; p < 2; ++p) {
        const auto ev = nlohmann::json::parse(read(dir / "t1" / "eval" / ("pair_00" + std::to_string(p) + ".json")));
        std::istringstream csv(read(dir / "t1" / "rotate_eval.csv"));
        std::string line;
        bool found = false;
        while (std::getline(csv, line)) {
            if (line.rfind("0," + std::to_string(p) + ",", 0) != 0) continue;
            const std::string dice = line.substr(line.find(',', 2) + 1, line.rfind(',') - line.find(',', 2) - 1);
            CHECK(std::stod(dice) == doctest::Approx(ev.at("dice").get<double>()).epsilon(1e-9));
            found = true;
        }
        CHECK(found);
    }

    // A checkpoint of a different structure is refused.
    std::string other = kEquivariant;
    other.replace(other.find("ratio = \"5:2:1\""), 15, "ratio = \"4:4:0\"");
    const fs::path other_cfg = write_config(dir, "other.ini", other);
    CHECK(run_cli("eval --config " + other_cfg.string() + " --out " + (dir / "o").string() + ckpt) == 2);

    CHECK(run_cli("equiv-check " + base + (dir / "t1").string()) == 0);
    const auto eqv = nlohmann::json::parse(read(dir / "t1" / "equivariance.json"));
    CHECK(eqv.at("config_hash") == hash);

    REQUIRE(run_cli("gen-data " + base + (dir / "g").string()) == 0);
    CHECK(fs::exists(dir / "g" / "data" / "pair_000"));
    CHECK(fs::exists(dir / "g" / "data" / "pair_001"));
    REQUIRE(run_cli("dump-basis " + base + (dir / "b").string()) == 0);
    CHECK(fs::exists(dir / "b" / "basis" / "basis.json"));

    // No temporary files are left behind.
    for (const auto& entry : fs::recursive_directory_iterator(dir))
        CHECK(entry.path().filename().string().find(".tmp") == std::string::npos);
    fs::remove_all(dir);
}
