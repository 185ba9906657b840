#include "steerreg/layers.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace steerreg::layers {

namespace {

struct Slot {
    int l;
    std::size_t offset;
};

std::vector<Slot> slots_of(const FieldType& t) {
    std::vector<Slot> out;
    std::size_t offset = 0;
    for (int l : t.slot_orders()) {
        out.push_back({l, offset});
        offset += static_cast<std::size_t>(2 * l + 1);
    }
    return out;
}

// Snaps representation entries of octahedral rotations to their exact values.
double snap_entry(double v) {
    static const double kExact[] = {0.0, 0.5, 1.0, std::sqrt(3.0) / 2.0};
    for (double e : kExact) {
        if (std::abs(v - e) < 1e-9) return e;
        if (std::abs(v + e) < 1e-9) return -e;
    }
    return v;
}

void check_type(const FeatureField& field, const FieldType& expected) {
    if (field.type != expected)
        throw std::invalid_argument("field type mismatch: expected " + expected.to_string() + ", got " +
                                    field.type.to_string());
    const auto& s = field.tensor.shape();
    if (s.size() != 5 || static_cast<int>(s[1]) != expected.total_channels())
        throw std::invalid_argument("field tensor " + ad::shape_string(s) + " does not carry " +
                                    std::to_string(expected.total_channels()) + " channels");
}

}  // namespace

SteerableConvLayer::SteerableConvLayer(FieldType in_type, FieldType out_type, int stride, int padding, int size)
    : in_(std::move(in_type)), out_(std::move(out_type)), stride_(stride), padding_(padding), size_(size) {
    if (in_.total_channels() <= 0 || out_.total_channels() <= 0)
        throw std::invalid_argument("steerable conv needs non-empty field types");
    if (stride < 1 || padding < 0) throw std::invalid_argument("invalid stride or padding");
    std::vector<Block> blocks;
    for (const Slot& so : slots_of(out_))
        for (const Slot& si : slots_of(in_)) {
            auto kb = basis::cached_kernel_basis(si.l, so.l, size);
            if (kb->count() == 0) continue;
            blocks.push_back({si.offset, so.offset, si.l, so.l, weight_count_, kb});
            weight_count_ += kb->count();
        }
    blocks_ = std::make_shared<const std::vector<Block>>(std::move(blocks));
}

ad::Tensor SteerableConvLayer::init_weights(Rng& rng) const {
    ad::Tensor w(ad::Shape{weight_count_});
    const double cin = in_.total_channels();
    for (const Block& b : *blocks_) {
        const double count = static_cast<double>(b.basis->count());
        const double sd = std::sqrt(2.0 * (2 * b.l_in + 1) * (2 * b.l_out + 1) / (cin * count));
        for (std::size_t k = 0; k < b.basis->count(); ++k) w[b.weight_offset + k] = rng.normal(0.0, sd);
    }
    return w;
}

ad::Tensor SteerableConvLayer::expand(const ad::Tensor& weights) const {
    if (weights.size() != weight_count_)
        throw std::invalid_argument("steerable conv expects " + std::to_string(weight_count_) + " weights, got " +
                                    std::to_string(weights.size()));
    const std::size_t cout = out_.total_channels(), cin = in_.total_channels();
    const std::size_t vox = static_cast<std::size_t>(size_) * size_ * size_;
    ad::Tensor kernel(ad::Shape{cout, cin, static_cast<std::size_t>(size_), static_cast<std::size_t>(size_),
                                static_cast<std::size_t>(size_)});
    for (const Block& b : *blocks_) {
        const int dout = 2 * b.l_out + 1, din = 2 * b.l_in + 1;
        for (std::size_t e = 0; e < b.basis->count(); ++e) {
            const double w = weights[b.weight_offset + e];
            const double* src = b.basis->element(e);
            for (int o = 0; o < dout; ++o)
                for (int i = 0; i < din; ++i) {
                    double* dst = kernel.data().data() + ((b.out_offset + o) * cin + b.in_offset + i) * vox;
                    const double* s = src + (static_cast<std::size_t>(o) * din + i) * vox;
                    for (std::size_t v = 0; v < vox; ++v) dst[v] += w * s[v];
                }
        }
    }
    return kernel;
}

ad::Var SteerableConvLayer::expand(ad::Var weights) const {
    ad::Tensor kernel = expand(weights.value());
    const std::size_t cin = in_.total_channels();
    const std::size_t vox = static_cast<std::size_t>(size_) * size_ * size_;
    return weights.tape().record(std::move(kernel), {weights}, [blocks = blocks_, count = weight_count_, cin, vox,
                                                                weights](ad::Tape& t, const ad::Tensor& g) {
        ad::Tensor gw(ad::Shape{count}, 0.0);
        for (const Block& b : *blocks) {
            const int dout = 2 * b.l_out + 1, din = 2 * b.l_in + 1;
            for (std::size_t e = 0; e < b.basis->count(); ++e) {
                const double* src = b.basis->element(e);
                double acc = 0.0;
                for (int o = 0; o < dout; ++o)
                    for (int i = 0; i < din; ++i) {
                        const double* gk = g.data().data() + ((b.out_offset + o) * cin + b.in_offset + i) * vox;
                        const double* s = src + (static_cast<std::size_t>(o) * din + i) * vox;
                        for (std::size_t v = 0; v < vox; ++v) acc += gk[v] * s[v];
                    }
                gw[b.weight_offset + e] = acc;
            }
        }
        t.accumulate(weights, gw);
    });
}

FeatureField SteerableConvLayer::apply(const FeatureField& field, ad::Var weights) const {
    check_type(field, in_);
    ad::Var kernel = expand(weights);
    return {ad::conv3d(field.tensor, kernel, stride_, padding_), out_};
}

ad::Var gated_activation(ad::Var main, const FieldType& type, ad::Var gates) {
    const ad::Shape& s = main.shape();
    if (s.size() != 5 || static_cast<int>(s[1]) != type.total_channels())
        throw std::invalid_argument("gated_activation: tensor " + ad::shape_string(s) + " does not match type " +
                                    type.to_string());
    const std::size_t slots = static_cast<std::size_t>(type.nonscalar_slots());
    // Gate index per channel, -1 for scalars.
    std::vector<int> gate_of;
    int slot = 0;
    for (int l : type.slot_orders()) {
        for (int k = 0; k < 2 * l + 1; ++k) gate_of.push_back(l == 0 ? -1 : slot);
        if (l > 0) ++slot;
    }
    if (slots > 0) {
        const ad::Shape& gs = gates.shape();
        if (gs.size() != 5 || gs[0] != s[0] || gs[1] != slots || !std::equal(gs.begin() + 2, gs.end(), s.begin() + 2))
            throw std::invalid_argument("gated_activation: gates " + ad::shape_string(gs) + " do not match " +
                                        std::to_string(slots) + " non-scalar slots");
    }
    const std::size_t n = s[0], c = s[1], vox = s[2] * s[3] * s[4];
    constexpr double kSlope = 0.1;
    auto sig = [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); };

    const ad::Tensor& x = main.value();
    ad::Tensor out(s);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* src = x.data().data() + (b * c + ch) * vox;
            double* dst = out.data().data() + (b * c + ch) * vox;
            if (gate_of[ch] < 0) {
                for (std::size_t v = 0; v < vox; ++v) dst[v] = src[v] > 0 ? src[v] : kSlope * src[v];
            } else {
                const double* g = gates.value().data().data() + (b * slots + gate_of[ch]) * vox;
                for (std::size_t v = 0; v < vox; ++v) dst[v] = src[v] * sig(g[v]);
            }
        }
    std::vector<ad::Var> inputs{main};
    if (slots > 0) inputs.push_back(gates);
    return main.tape().record(std::move(out), inputs, [main, gates, gate_of, n, c, vox, slots, sig](
                                                          ad::Tape& t, const ad::Tensor& g) {
        const ad::Tensor& x = main.value();
        ad::Tensor gx(x.shape());
        ad::Tensor gg;
        const bool need_gates = slots > 0 && t.requires_grad(gates);
        if (need_gates) gg = ad::Tensor(gates.shape(), 0.0);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double* src = x.data().data() + (b * c + ch) * vox;
                const double* go = g.data().data() + (b * c + ch) * vox;
                double* dx = gx.data().data() + (b * c + ch) * vox;
                if (gate_of[ch] < 0) {
                    for (std::size_t v = 0; v < vox; ++v) dx[v] = src[v] > 0 ? go[v] : kSlope * go[v];
                    continue;
                }
                const std::size_t goff = (b * slots + gate_of[ch]) * vox;
                const double* gv = gates.value().data().data() + goff;
                for (std::size_t v = 0; v < vox; ++v) {
                    const double sg = sig(gv[v]);
                    dx[v] = go[v] * sg;
                    if (need_gates) gg[goff + v] += go[v] * src[v] * sg * (1.0 - sg);
                }
            }
        t.accumulate(main, gx);
        if (need_gates) t.accumulate(gates, gg);
    });
}

GatedBlock::GatedBlock(FieldType in_type, FieldType out_type, int stride) : main_(in_type, out_type, stride) {
    const int slots = out_type.nonscalar_slots();
    if (slots > 0) gate_.emplace(in_type, FieldType::scalars(slots), stride);
}

std::size_t GatedBlock::parameter_count() const {
    return main_.parameter_count() + (gate_ ? gate_->parameter_count() : 0);
}

void GatedBlock::register_parameters(optim::ParameterSet& params, const std::string& prefix, Rng& rng) {
    main_index_ = params.add(prefix + "/main", main_.init_weights(rng));
    if (gate_) gate_index_ = params.add(prefix + "/gate", gate_->init_weights(rng));
}

FeatureField GatedBlock::forward(const FeatureField& field, const std::vector<ad::Var>& params) const {
    FeatureField m = main_.apply(field, params.at(main_index_));
    ad::Var gates;
    if (gate_) gates = gate_->apply(field, params.at(gate_index_)).tensor;
    return {gated_activation(m.tensor, m.type, gates), m.type};
}

FieldType budget_field_type(int total_channels, const Ratio& ratio) {
    if (total_channels < 1) throw std::invalid_argument("channel budget must be positive");
    for (int r : ratio)
        if (r < 0) throw std::invalid_argument("ratio entries must be non-negative");
    const int cost = ratio[0] + 3 * ratio[1] + 5 * ratio[2];
    if (cost == 0) throw std::invalid_argument("ratio must not be all zero");
    const int k = total_channels / cost;
    if (k == 0)
        throw std::invalid_argument("no feasible field type for " + std::to_string(total_channels) +
                                    " channels at ratio " + ratio_string(ratio));
    std::vector<int> m{k * ratio[0], k * ratio[1], k * ratio[2]};
    if (ratio[0] > 0) m[0] += total_channels - k * cost;
    return FieldType::from_multiplicities(m);
}

Ratio parse_ratio(const std::string& text) {
    Ratio r{0, 0, 0};
    std::stringstream ss(text);
    std::string part;
    int i = 0;
    while (std::getline(ss, part, ':')) {
        if (i >= 3) throw std::invalid_argument("ratio has more than three parts: " + text);
        std::size_t used = 0;
        int v = 0;
        try {
            v = std::stoi(part, &used);
        } catch (const std::exception&) {
            throw std::invalid_argument("malformed ratio: " + text);
        }
        if (used != part.size() || v < 0) throw std::invalid_argument("malformed ratio: " + text);
        r[i++] = v;
    }
    if (i < 2) throw std::invalid_argument("ratio needs at least two parts: " + text);
    if (r[0] + r[1] + r[2] == 0) throw std::invalid_argument("ratio must not be all zero: " + text);
    return r;
}

std::string ratio_string(const Ratio& ratio) {
    return std::to_string(ratio[0]) + ":" + std::to_string(ratio[1]) + ":" + std::to_string(ratio[2]);
}

EncoderSpec make_encoder_spec(int input_channels, const std::vector<int>& channels, const std::vector<int>& strides,
                              const Ratio& first_ratio, const Ratio& deep_ratio, RatioMode mode) {
    if (channels.empty() || channels.size() != strides.size())
        throw std::invalid_argument("encoder channels and strides must be non-empty and of equal length");
    EncoderSpec spec;
    spec.input = FieldType::scalars(input_channels);
    for (std::size_t i = 0; i < channels.size(); ++i) {
        const Ratio& ratio = i == 0 ? first_ratio : deep_ratio;
        FieldType t = mode == RatioMode::budget
                          ? budget_field_type(channels[i], ratio)
                          : FieldType::from_multiplicities({ratio[0], ratio[1], ratio[2]});
        if (mode == RatioMode::budget && t.total_channels() > channels[i])
            throw std::invalid_argument("level " + std::to_string(i) + " exceeds its channel budget");
        if (strides[i] < 1) throw std::invalid_argument("encoder strides must be positive");
        spec.levels.push_back({t, strides[i]});
    }
    return spec;
}

EquivariantEncoder::EquivariantEncoder(EncoderSpec spec) : spec_(std::move(spec)) {
    FieldType prev = spec_.input;
    for (const auto& level : spec_.levels) {
        for (const auto& e : level.type.entries())
            if (e.irrep.l > so3::kMaxOrder) throw std::invalid_argument("irrep order above 2 in encoder spec");
        blocks_.emplace_back(prev, level.type, level.stride);
        prev = level.type;
    }
}

std::size_t EquivariantEncoder::parameter_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks_) n += b.parameter_count();
    return n;
}

void EquivariantEncoder::register_parameters(optim::ParameterSet& params, const std::string& prefix, Rng& rng) {
    for (std::size_t i = 0; i < blocks_.size(); ++i)
        blocks_[i].register_parameters(params, prefix + "/level" + std::to_string(i), rng);
}

std::vector<FeatureField> EquivariantEncoder::forward(const FeatureField& input,
                                                      const std::vector<ad::Var>& params) const {
    std::vector<FeatureField> out;
    FeatureField f = input;
    for (const auto& b : blocks_) {
        f = b.forward(f, params);
        out.push_back(f);
    }
    return out;
}

StandardEncoder::StandardEncoder(int input_channels, std::vector<int> channels, std::vector<int> strides)
    : input_channels_(input_channels), channels_(std::move(channels)), strides_(std::move(strides)) {
    if (channels_.empty() || channels_.size() != strides_.size())
        throw std::invalid_argument("encoder channels and strides must be non-empty and of equal length");
}

std::size_t StandardEncoder::parameter_count() const {
    std::size_t n = 0;
    int prev = input_channels_;
    for (int c : channels_) {
        n += static_cast<std::size_t>(c) * prev * 27 + c;
        prev = c;
    }
    return n;
}

void StandardEncoder::register_parameters(optim::ParameterSet& params, const std::string& prefix, Rng& rng) {
    weight_index_.clear();
    bias_index_.clear();
    int prev = input_channels_;
    for (std::size_t i = 0; i < channels_.size(); ++i) {
        const auto c = static_cast<std::size_t>(channels_[i]);
        ad::Tensor w(ad::Shape{c, static_cast<std::size_t>(prev), 3, 3, 3});
        const double sd = std::sqrt(2.0 / (prev * 27.0));
        for (std::size_t k = 0; k < w.size(); ++k) w[k] = rng.normal(0.0, sd);
        const std::string name = prefix + "/level" + std::to_string(i);
        weight_index_.push_back(params.add(name + "/weight", std::move(w)));
        bias_index_.push_back(params.add(name + "/bias", ad::Tensor(ad::Shape{c}, 0.0)));
        prev = channels_[i];
    }
}

std::vector<ad::Var> StandardEncoder::forward(ad::Var input, const std::vector<ad::Var>& params) const {
    std::vector<ad::Var> out;
    ad::Var x = input;
    for (std::size_t i = 0; i < channels_.size(); ++i) {
        x = ad::conv3d(x, params.at(weight_index_.at(i)), strides_[i], 1);
        x = ad::add_channel_bias(x, params.at(bias_index_.at(i)));
        x = ad::leaky_relu(x, 0.2);
        out.push_back(x);
    }
    return out;
}

Eigen::Matrix3i octahedral_matrix(const so3::Rotation& r) {
    if (!so3::is_octahedral(r)) throw std::invalid_argument("rotation is not octahedral");
    const Eigen::Matrix3d m = r.matrix();
    Eigen::Matrix3i out;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) out(i, j) = static_cast<int>(std::lround(m(i, j)));
    return out;
}

ad::Tensor rotate_field(const ad::Tensor& field, const FieldType& type, const so3::Rotation& r) {
    const Eigen::Matrix3i m = octahedral_matrix(r);
    const ad::Shape& s = field.shape();
    if (s.size() != 5 || static_cast<int>(s[1]) != type.total_channels())
        throw std::invalid_argument("rotate_field: tensor " + ad::shape_string(s) + " does not match type " +
                                    type.to_string());
    if (s[2] != s[3] || s[3] != s[4]) throw std::invalid_argument("rotate_field needs equal spatial extents");
    const int size = static_cast<int>(s[2]);
    const std::size_t n = s[0], c = s[1], vox = s[2] * s[3] * s[4];

    Eigen::MatrixXd rho = so3::rep_matrix(type, r);
    for (Eigen::Index i = 0; i < rho.size(); ++i) rho.data()[i] = snap_entry(rho.data()[i]);
    // Nonzero entries per output channel, in input-channel order.
    std::vector<std::vector<std::pair<std::size_t, double>>> mix(c);
    for (std::size_t o = 0; o < c; ++o)
        for (std::size_t i = 0; i < c; ++i)
            if (rho(o, i) != 0.0) mix[o].push_back({i, rho(o, i)});

    // Source voxel of every output voxel: q = R^T p about the center.
    std::vector<std::size_t> source(vox);
    const Eigen::Matrix3i mt = m.transpose();
    for (int z = 0; z < size; ++z)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                // Doubled coordinates keep even extents on the integer lattice.
                const Eigen::Vector3i p(2 * x - (size - 1), 2 * y - (size - 1), 2 * z - (size - 1));
                const Eigen::Vector3i q = mt * p;
                const int qx = (q.x() + size - 1) / 2, qy = (q.y() + size - 1) / 2, qz = (q.z() + size - 1) / 2;
                source[(static_cast<std::size_t>(z) * size + y) * size + x] =
                    (static_cast<std::size_t>(qz) * size + qy) * size + qx;
            }

    ad::Tensor out(s);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < c; ++o) {
            double* dst = out.data().data() + (b * c + o) * vox;
            for (std::size_t v = 0; v < vox; ++v) {
                double acc = 0.0;
                bool first = true;
                for (const auto& [i, w] : mix[o]) {
                    const double term = w * field[(b * c + i) * vox + source[v]];
                    acc = first ? term : acc + term;
                    first = false;
                }
                dst[v] = acc;
            }
        }
    return out;
}

}  // namespace steerreg::layers
