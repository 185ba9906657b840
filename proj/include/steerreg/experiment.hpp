#pragma once

// Experiment configuration and the protocols behind the steerreg commands.

#include "steerreg/registration.hpp"
#include "steerreg/synth.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace steerreg::exp {

/// Invalid configuration; the CLI maps it to exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Flat INI text: [section] headers, key = value lines, '#' or ';' comments.
struct IniFile {
    std::map<std::string, std::map<std::string, std::string>> sections;

    static IniFile parse(std::string_view text);
};

struct SweepSettings {
    std::vector<layers::Ratio> ratios{{16, 0, 0}, {0, 5, 0}, {0, 0, 3}, {4, 4, 0}, {7, 3, 0}, {5, 2, 1}, {2, 2, 2}};
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::vector<double> angles{0, 5, -5, 10, -10, 15, -15};
    std::vector<double> fractions{1.0, 0.5, 0.25, 0.125};
    int train_pairs = 16;
    int test_pairs = 5;
};

struct ExperimentConfig {
    synth::SyntheticSpec data;
    int n_pairs = 10;
    std::filesystem::path data_dir;  // empty: generate pairs in memory
    reg::ModelConfig model;
    bool ratios_given = false;
    reg::TrainConfig train;
    std::filesystem::path output_dir = "out";
    SweepSettings sweep;

    /// Throws ConfigError on unknown keys, bad values, or a variant/ratio mismatch.
    static ExperimentConfig parse(std::string_view text);
    static ExperimentConfig load(const std::filesystem::path& path);

    /// Every field that affects results, one key=value per line.
    std::string canonical() const;
    std::uint64_t hash() const;
    std::string hash_hex() const;
};

std::string hex64(std::uint64_t v);

/// Pair i of a dataset uses seed data.seed + offset + i.
std::vector<synth::VolumePair> make_pairs(const synth::SyntheticSpec& data, int count, std::uint64_t offset = 0);
/// The configured pairs: loaded from data_dir when set, generated otherwise.
std::vector<synth::VolumePair> config_pairs(const ExperimentConfig& cfg);
std::vector<const synth::VolumePair*> pointers(const std::vector<synth::VolumePair>& pairs);

std::unique_ptr<reg::RegistrationModel> make_model(const reg::ModelConfig& cfg);

struct EvalRow {
    std::size_t pair = 0;
    double unregistered_dice = 0.0;
    reg::PairMetrics metrics;
};

struct EvalSummary {
    std::vector<EvalRow> rows;
    double mean_dice = 0.0;
    double mean_unregistered_dice = 0.0;
    double mean_assd = 0.0;
};

EvalSummary evaluate(const reg::RegistrationModel& model, const std::vector<synth::VolumePair>& pairs,
                     const reg::LossConfig& loss);

/// Trains a fresh model; progress lines every log_every steps when log is set.
std::unique_ptr<reg::RegistrationModel> train_model(const reg::ModelConfig& model_cfg,
                                                    const std::vector<const synth::VolumePair*>& pairs,
                                                    const reg::TrainConfig& train_cfg,
                                                    std::vector<reg::TrainRecord>* curve = nullptr,
                                                    std::ostream* log = nullptr, int log_every = 100);

struct LayerResidual {
    std::string name;
    double octahedral = 0.0;  // max relative residual over the 24 rotations
};

struct EquivarianceReport {
    std::vector<LayerResidual> layers;
    double stack_octahedral = 0.0;
    /// Generic rotations about a fixed oblique axis: (angle, residual).
    std::vector<std::pair<double, double>> generic_stack;
    std::vector<std::pair<double, double>> generic_basis;
};

/// Octahedral audit of every gated block and of the whole encoder on a
/// random input of the data extent (must be odd), plus resampled residuals
/// for generic angles: the first encoder level on the first configured pair (inner
/// ball only) and the worst of the nine kernel bases.
EquivarianceReport equivariance_report(const reg::RegistrationModel& model, const synth::SyntheticSpec& data,
                                       std::uint64_t seed);

/// Relative residual of the whole encoder against the 24 octahedral rotations.
double encoder_octahedral_residual(const reg::RegistrationModel& model, int extent, std::uint64_t seed);

struct RotationRow {
    double angle = 0.0;
    std::size_t pair = 0;
    double dice = 0.0;
    double assd = 0.0;
};

/// Rotates only the moving image (and its labels) about the volume center
/// around z, registers with the model and scores against the fixed labels.
std::vector<RotationRow> rotate_eval(const reg::RegistrationModel& model, const std::vector<synth::VolumePair>& pairs,
                                     const std::vector<double>& angles);

/// Mean Dice at 0 degrees minus the mean over the +/- angle.
double dice_drop(const std::vector<RotationRow>& rows, double angle);

struct RatioRow {
    layers::Ratio ratio{};
    layers::RatioMode mode = layers::RatioMode::budget;
    std::vector<int> level_channels;
    std::size_t encoder_parameters = 0;
    std::size_t parameters = 0;
    std::uint64_t seed = 0;
    double dice = 0.0;
};

/// Deep-level field type of a sweep ratio at the given budget: budgeted, or
/// literal when a single copy of the ratio exceeds the budget.
layers::RatioMode sweep_mode(const layers::Ratio& ratio, int budget);

/// Trains one equivariant model per (ratio, seed) on the configured pairs and
/// scores held-out test pairs. steps <= 0 skips training (structure only).
std::vector<RatioRow> ratio_sweep(const ExperimentConfig& cfg, std::ostream* log = nullptr);

struct FractionRow {
    double fraction = 0.0;
    std::size_t train_pairs = 0;
    double standard_dice = 0.0;
    double equivariant_dice = 0.0;
    double gap() const { return equivariant_dice - standard_dice; }
};

/// Nested training subsets of train_pairs pairs, both variants per fraction,
/// scored on the same held-out pairs.
std::vector<FractionRow> sample_efficiency(const ExperimentConfig& cfg, std::ostream* log = nullptr);

struct ParamCounts {
    std::size_t standard_encoder = 0, equivariant_encoder = 0;
    std::size_t standard_model = 0, equivariant_model = 0;
    double encoder_ratio() const { return static_cast<double>(equivariant_encoder) / standard_encoder; }
    double model_ratio() const { return static_cast<double>(equivariant_model) / standard_model; }
};

/// Both variants at the configured channel budget.
ParamCounts param_counts(const ExperimentConfig& cfg);

/// The model config with another variant; ratio fields carry over.
reg::ModelConfig with_variant(const reg::ModelConfig& base, reg::Variant v);

}  // namespace steerreg::exp
