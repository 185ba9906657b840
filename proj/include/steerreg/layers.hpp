#pragma once

#include "steerreg/autodiff.hpp"
#include "steerreg/basis.hpp"
#include "steerreg/optim.hpp"
#include "steerreg/rng.hpp"
#include "steerreg/so3.hpp"

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace steerreg::layers {

using so3::FieldType;

/// [N,C,D,H,W] tensor whose channels transform by rep_matrix(type, R).
struct FeatureField {
    ad::Var tensor;
    FieldType type;
};

/// Convolution whose kernel is a weighted sum of equivariant basis elements.
/// Weights are one scalar per (input slot, output slot, basis element).
class SteerableConvLayer {
public:
    SteerableConvLayer(FieldType in_type, FieldType out_type, int stride, int padding = 1, int size = 3);

    const FieldType& in_type() const { return in_; }
    const FieldType& out_type() const { return out_; }
    int stride() const { return stride_; }
    int padding() const { return padding_; }
    int size() const { return size_; }
    std::size_t parameter_count() const { return weight_count_; }

    /// Random weights giving roughly unit-variance outputs for unit inputs.
    ad::Tensor init_weights(Rng& rng) const;
    /// Dense [Cout, Cin, K, K, K] kernel.
    ad::Tensor expand(const ad::Tensor& weights) const;
    ad::Var expand(ad::Var weights) const;

    /// Throws std::invalid_argument naming expected and actual types.
    FeatureField apply(const FeatureField& field, ad::Var weights) const;

private:
    struct Block {
        std::size_t in_offset, out_offset;
        int l_in, l_out;
        std::size_t weight_offset;
        std::shared_ptr<const basis::KernelBasis> basis;
    };

    FieldType in_, out_;
    int stride_, padding_, size_;
    std::shared_ptr<const std::vector<Block>> blocks_;
    std::size_t weight_count_ = 0;
};

/// Scalars through leaky_relu(0.1); every non-scalar slot times sigmoid of
/// its gate channel. gates is [N, nonscalar_slots, D, H, W].
ad::Var gated_activation(ad::Var main, const FieldType& type, ad::Var gates);

/// Steerable conv followed by a gated nonlinearity. The gate convolution
/// reads the same input and produces one scalar per non-scalar output slot.
class GatedBlock {
public:
    GatedBlock(FieldType in_type, FieldType out_type, int stride);

    const SteerableConvLayer& main() const { return main_; }
    const std::optional<SteerableConvLayer>& gate() const { return gate_; }
    const FieldType& in_type() const { return main_.in_type(); }
    const FieldType& out_type() const { return main_.out_type(); }
    std::size_t parameter_count() const;

    /// Adds weights named prefix + "/main" (and "/gate") to params.
    void register_parameters(optim::ParameterSet& params, const std::string& prefix, Rng& rng);
    FeatureField forward(const FeatureField& field, const std::vector<ad::Var>& params) const;

private:
    SteerableConvLayer main_;
    std::optional<SteerableConvLayer> gate_;
    std::size_t main_index_ = 0, gate_index_ = 0;
};

/// Multiplicities of irreps 0, 1, 2.
using Ratio = std::array<int, 3>;

/// Largest multiple of ratio whose channel count fits in total; the surplus
/// goes to irrep 0 when the ratio includes it. Throws when nothing fits.
FieldType budget_field_type(int total_channels, const Ratio& ratio);

/// Parses "a:b" or "a:b:c" into a ratio.
Ratio parse_ratio(const std::string& text);
std::string ratio_string(const Ratio& ratio);

struct EncoderLevel {
    FieldType type;
    int stride = 1;
};

struct EncoderSpec {
    FieldType input;
    std::vector<EncoderLevel> levels;
};

/// How deep-level ratios become field types: budgeted against the channel
/// count, or taken literally as multiplicities.
enum class RatioMode { budget, literal };

/// Level 0 uses first_ratio (l0:l1 at 1:1 by default), deeper levels use
/// deep_ratio. Throws when a level's channels exceed its budget.
EncoderSpec make_encoder_spec(int input_channels, const std::vector<int>& channels, const std::vector<int>& strides,
                              const Ratio& first_ratio, const Ratio& deep_ratio, RatioMode mode = RatioMode::budget);

class EquivariantEncoder {
public:
    explicit EquivariantEncoder(EncoderSpec spec);

    const EncoderSpec& spec() const { return spec_; }
    const std::vector<GatedBlock>& blocks() const { return blocks_; }
    std::size_t parameter_count() const;

    void register_parameters(optim::ParameterSet& params, const std::string& prefix, Rng& rng);
    /// Field after every level.
    std::vector<FeatureField> forward(const FeatureField& input, const std::vector<ad::Var>& params) const;

private:
    EncoderSpec spec_;
    std::vector<GatedBlock> blocks_;
};

inline EquivariantEncoder build_equivariant_encoder(const EncoderSpec& spec) { return EquivariantEncoder(spec); }

/// Plain conv + bias + leaky_relu(0.2) levels with matching channels/strides.
class StandardEncoder {
public:
    StandardEncoder(int input_channels, std::vector<int> channels, std::vector<int> strides);

    const std::vector<int>& channels() const { return channels_; }
    std::size_t parameter_count() const;

    void register_parameters(optim::ParameterSet& params, const std::string& prefix, Rng& rng);
    std::vector<ad::Var> forward(ad::Var input, const std::vector<ad::Var>& params) const;

private:
    int input_channels_;
    std::vector<int> channels_, strides_;
    std::vector<std::size_t> weight_index_, bias_index_;
};

inline std::size_t parameter_count(const EquivariantEncoder& e) { return e.parameter_count(); }
inline std::size_t parameter_count(const StandardEncoder& e) { return e.parameter_count(); }

/// Integer matrix of an octahedral rotation; throws for any other rotation.
Eigen::Matrix3i octahedral_matrix(const so3::Rotation& r);

/// out(p) = rho(R) in(R^-1 p) about the grid center, for [N,C,S,S,S] with
/// channels laid out by type. R must be octahedral.
ad::Tensor rotate_field(const ad::Tensor& field, const FieldType& type, const so3::Rotation& r);

}  // namespace steerreg::layers
