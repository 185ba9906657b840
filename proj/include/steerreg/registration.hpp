#pragma once

#include "steerreg/autodiff.hpp"
#include "steerreg/layers.hpp"
#include "steerreg/metrics.hpp"
#include "steerreg/optim.hpp"
#include "steerreg/synth.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace steerreg::reg {

struct LossConfig {
    double lambda = 1.0;
    int ncc_window = 9;
    double epsilon = 1e-5;

    void validate() const;
};

/// 1 - mean(cross^2 / (var_w var_f + eps)) with window sums over a
/// zero-padded window^3 neighbourhood.
ad::Var ncc_loss(ad::Var warped, ad::Var fixed, int window, double epsilon);
/// Mean over axes of the mean squared forward difference of every component.
ad::Var smoothness_loss(ad::Var displacement);

enum class Variant { standard, equivariant };
std::string variant_name(Variant v);
Variant parse_variant(std::string_view s);

struct ModelConfig {
    Variant variant = Variant::standard;
    std::vector<int> channels{8, 16, 16, 16};
    std::vector<int> strides{1, 2, 2, 2};
    layers::Ratio first_ratio{1, 1, 0};
    layers::Ratio deep_ratio{5, 2, 1};
    layers::RatioMode ratio_mode = layers::RatioMode::budget;
    int decoder_channels = 16;
    std::uint64_t seed = 0;
};

/// VM-style U-Net: encoder (standard or equivariant) over the concatenated
/// (moving, fixed) pair, a standard decoder with skip connections, and a
/// 3-channel displacement head initialised near zero.
class RegistrationModel {
public:
    explicit RegistrationModel(const ModelConfig& cfg);
    RegistrationModel(const RegistrationModel&) = delete;
    RegistrationModel& operator=(const RegistrationModel&) = delete;

    const ModelConfig& config() const { return cfg_; }
    optim::ParameterSet& params() { return params_; }
    const optim::ParameterSet& params() const { return params_; }

    std::size_t encoder_parameter_count() const;
    std::size_t parameter_count() const { return params_.scalar_count(); }
    /// Channel count produced by every encoder level.
    std::vector<int> encoder_channels() const;
    /// Hash of every structural field (variant, levels, field types).
    std::uint64_t structure_hash() const;

    const std::optional<layers::EquivariantEncoder>& equivariant_encoder() const { return equi_; }
    const std::optional<layers::StandardEncoder>& standard_encoder() const { return std_; }

    /// One leaf per parameter, in ParameterSet order.
    std::vector<ad::Var> bind(ad::Tape& tape) const;
    /// Encoder outputs for a [N,2,D,H,W] input.
    std::vector<ad::Var> encode(ad::Var input, const std::vector<ad::Var>& params) const;
    /// [N,3,D,H,W] displacement, (dz, dy, dx) in voxels.
    ad::Var forward(ad::Var moving, ad::Var fixed, const std::vector<ad::Var>& params) const;
    ad::Tensor predict(const ImageVolume& moving, const ImageVolume& fixed) const;

    /// Replaces parameters with a checkpoint; names and shapes must match.
    void load_parameters(const optim::ParameterSet& loaded);

private:
    ModelConfig cfg_;
    optim::ParameterSet params_;
    std::optional<layers::EquivariantEncoder> equi_;
    std::optional<layers::StandardEncoder> std_;
    struct Conv {
        std::size_t weight, bias;
    };
    std::vector<Conv> decoder_;
    Conv head_{};
};

struct LossTerms {
    ad::Var total, similarity, regularization, displacement, warped;
};

/// L = ncc(fixed, moving o phi) + lambda * smoothness(phi).
LossTerms total_loss(const RegistrationModel& model, const std::vector<ad::Var>& params, const ImageVolume& moving,
                     const ImageVolume& fixed, const LossConfig& cfg);

struct TrainConfig {
    int steps = 2000;
    double lr = 1e-3;
    LossConfig loss;
};

struct TrainRecord {
    int step;
    double loss, similarity, regularization;
};

/// Adam over pairs sampled round-robin. The callback sees every step.
std::vector<TrainRecord> train(RegistrationModel& model, const std::vector<const synth::VolumePair*>& pairs,
                               const TrainConfig& cfg,
                               const std::function<void(const TrainRecord&)>& on_step = nullptr);

struct PairMetrics {
    double dice_mean = 0.0;
    std::map<int, double> dice_per_label;
    double assd_mean = 0.0;
    double loss = 0.0;
};

/// Warps moving (trilinear) and its labels (nearest) with the model's
/// displacement and scores against the fixed labels.
PairMetrics evaluate_pair(const RegistrationModel& model, const ImageVolume& moving, const ImageVolume& fixed,
                          const LabelVolume& moving_labels, const LabelVolume& fixed_labels, const LossConfig& loss);

/// Metrics of already-aligned label volumes (no model).
PairMetrics score_labels(const LabelVolume& warped, const LabelVolume& fixed);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ull);

}  // namespace steerreg::reg
