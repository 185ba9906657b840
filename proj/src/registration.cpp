#include "steerreg/registration.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace steerreg::reg {

void LossConfig::validate() const {
    if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be non-negative");
    if (ncc_window < 3 || ncc_window % 2 == 0) throw std::invalid_argument("ncc window must be odd and >= 3");
    if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
}

ad::Var ncc_loss(ad::Var warped, ad::Var fixed, int window, double epsilon) {
    if (warped.shape() != fixed.shape())
        throw std::invalid_argument("ncc_loss: shape mismatch " + ad::shape_string(warped.shape()) + " vs " +
                                    ad::shape_string(fixed.shape()));
    if (window < 1 || window % 2 == 0) throw std::invalid_argument("ncc window must be odd");
    const auto w = static_cast<std::size_t>(window);
    const double inv = 1.0 / static_cast<double>(w * w * w);
    ad::Var i_sum = ad::box_sum(warped, w);
    ad::Var j_sum = ad::box_sum(fixed, w);
    ad::Var i2_sum = ad::box_sum(ad::square(warped), w);
    ad::Var j2_sum = ad::box_sum(ad::square(fixed), w);
    ad::Var ij_sum = ad::box_sum(ad::mul(warped, fixed), w);
    ad::Var cross = ad::sub(ij_sum, ad::scalar_mul(ad::mul(i_sum, j_sum), inv));
    ad::Var i_var = ad::sub(i2_sum, ad::scalar_mul(ad::square(i_sum), inv));
    ad::Var j_var = ad::sub(j2_sum, ad::scalar_mul(ad::square(j_sum), inv));
    ad::Var cc = ad::div(ad::square(cross), ad::add_scalar(ad::mul(i_var, j_var), epsilon));
    return ad::add_scalar(ad::scalar_mul(ad::mean(cc), -1.0), 1.0);
}

ad::Var smoothness_loss(ad::Var displacement) {
    ad::Var total;
    for (int axis = 0; axis < 3; ++axis) {
        ad::Var term = ad::mean(ad::square(ad::forward_diff(displacement, axis)));
        total = axis == 0 ? term : ad::add(total, term);
    }
    return ad::scalar_mul(total, 1.0 / 3.0);
}

std::string variant_name(Variant v) { return v == Variant::standard ? "standard" : "equivariant"; }

Variant parse_variant(std::string_view s) {
    if (s == "standard") return Variant::standard;
    if (s == "equivariant") return Variant::equivariant;
    throw std::invalid_argument("unknown model variant '" + std::string(s) + "'");
}

std::uint64_t fnv1a(std::string_view data, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

namespace {

ad::Tensor he_normal(std::size_t cout, std::size_t cin, Rng& rng, double sd) {
    ad::Tensor w(ad::Shape{cout, cin, 3, 3, 3});
    for (std::size_t k = 0; k < w.size(); ++k) w[k] = rng.normal(0.0, sd);
    return w;
}

}  // namespace

RegistrationModel::RegistrationModel(const ModelConfig& cfg) : cfg_(cfg) {
    if (cfg.channels.empty() || cfg.channels.size() != cfg.strides.size())
        throw std::invalid_argument("encoder channels and strides must be non-empty and of equal length");
    Rng rng(cfg.seed);
    if (cfg.variant == Variant::equivariant) {
        equi_.emplace(layers::make_encoder_spec(2, cfg.channels, cfg.strides, cfg.first_ratio, cfg.deep_ratio,
                                                cfg.ratio_mode));
        equi_->register_parameters(params_, "encoder", rng);
    } else {
        std_.emplace(2, cfg.channels, cfg.strides);
        std_->register_parameters(params_, "encoder", rng);
    }
    const std::vector<int> enc = encoder_channels();
    const auto dec = static_cast<std::size_t>(cfg.decoder_channels);
    // Deepest level first; each later conv sees the upsampled features plus a skip.
    std::size_t in = static_cast<std::size_t>(enc.back());
    for (std::size_t level = enc.size() - 1; level >= 1; --level) {
        const std::string name = "decoder/conv" + std::to_string(enc.size() - 1 - level);
        Conv c;
        c.weight = params_.add(name + "/weight", he_normal(dec, in, rng, std::sqrt(2.0 / (27.0 * in))));
        c.bias = params_.add(name + "/bias", ad::Tensor(ad::Shape{dec}, 0.0));
        decoder_.push_back(c);
        in = dec + static_cast<std::size_t>(enc[level - 1]);
    }
    head_.weight = params_.add("head/weight", he_normal(3, in, rng, 1e-5));
    head_.bias = params_.add("head/bias", ad::Tensor(ad::Shape{3}, 0.0));
}

std::vector<int> RegistrationModel::encoder_channels() const {
    if (equi_) {
        std::vector<int> out;
        for (const auto& level : equi_->spec().levels) out.push_back(level.type.total_channels());
        return out;
    }
    return std_->channels();
}

std::size_t RegistrationModel::encoder_parameter_count() const {
    return equi_ ? equi_->parameter_count() : std_->parameter_count();
}

std::uint64_t RegistrationModel::structure_hash() const {
    std::ostringstream s;
    s << variant_name(cfg_.variant) << ";decoder=" << cfg_.decoder_channels;
    for (std::size_t i = 0; i < cfg_.channels.size(); ++i) s << ";level" << i << "=" << cfg_.channels[i] << "/" << cfg_.strides[i];
    if (equi_)
        for (const auto& level : equi_->spec().levels) s << ";" << level.type.to_string();
    return fnv1a(s.str());
}

std::vector<ad::Var> RegistrationModel::bind(ad::Tape& tape) const {
    std::vector<ad::Var> out;
    out.reserve(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) out.push_back(tape.leaf(params_[i]));
    return out;
}

std::vector<ad::Var> RegistrationModel::encode(ad::Var input, const std::vector<ad::Var>& params) const {
    if (std_) return std_->forward(input, params);
    std::vector<ad::Var> out;
    for (const auto& f : equi_->forward({input, equi_->spec().input}, params)) out.push_back(f.tensor);
    return out;
}

ad::Var RegistrationModel::forward(ad::Var moving, ad::Var fixed, const std::vector<ad::Var>& params) const {
    const std::vector<ad::Var> skips = encode(ad::concat_channels({moving, fixed}), params);
    ad::Var x = skips.back();
    auto conv = [&](ad::Var in, const Conv& c, double slope) {
        ad::Var y = ad::add_channel_bias(ad::conv3d(in, params.at(c.weight), 1, 1), params.at(c.bias));
        return slope > 0 ? ad::leaky_relu(y, slope) : y;
    };
    for (std::size_t k = 0; k < decoder_.size(); ++k) {
        x = conv(x, decoder_[k], 0.2);
        const ad::Var& skip = skips[skips.size() - 2 - k];
        const ad::Shape& s = skip.shape();
        x = ad::crop_spatial(ad::upsample_trilinear(x, 2), s[2], s[3], s[4]);
        x = ad::concat_channels({x, skip});
    }
    return conv(x, head_, 0.0);
}

ad::Tensor RegistrationModel::predict(const ImageVolume& moving, const ImageVolume& fixed) const {
    ad::Tape tape;
    std::vector<ad::Var> params;
    for (std::size_t i = 0; i < params_.size(); ++i) params.push_back(tape.constant(params_[i]));
    return forward(tape.constant(to_tensor(moving)), tape.constant(to_tensor(fixed)), params).value();
}

void RegistrationModel::load_parameters(const optim::ParameterSet& loaded) {
    if (loaded.size() != params_.size())
        throw std::runtime_error("checkpoint has " + std::to_string(loaded.size()) + " tensors, model expects " +
                                 std::to_string(params_.size()));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (loaded.name(i) != params_.name(i) || loaded[i].shape() != params_[i].shape())
            throw std::runtime_error("checkpoint tensor " + loaded.name(i) + " " + ad::shape_string(loaded[i].shape()) +
                                     " does not match " + params_.name(i) + " " +
                                     ad::shape_string(params_[i].shape()));
        params_[i] = loaded[i];
    }
}

LossTerms total_loss(const RegistrationModel& model, const std::vector<ad::Var>& params, const ImageVolume& moving,
                     const ImageVolume& fixed, const LossConfig& cfg) {
    cfg.validate();
    ad::Tape& tape = params.front().tape();
    ad::Var m = tape.constant(to_tensor(moving));
    ad::Var f = tape.constant(to_tensor(fixed));
    LossTerms t;
    t.displacement = model.forward(m, f, params);
    t.warped = ad::grid_sample_trilinear(m, t.displacement);
    t.similarity = ncc_loss(t.warped, f, cfg.ncc_window, cfg.epsilon);
    t.regularization = smoothness_loss(t.displacement);
    t.total = cfg.lambda == 0.0 ? t.similarity : ad::add(t.similarity, ad::scalar_mul(t.regularization, cfg.lambda));
    return t;
}

std::vector<TrainRecord> train(RegistrationModel& model, const std::vector<const synth::VolumePair*>& pairs,
                               const TrainConfig& cfg, const std::function<void(const TrainRecord&)>& on_step) {
    if (pairs.empty()) throw std::invalid_argument("training needs at least one pair");
    optim::AdamState state;
    optim::AdamConfig adam;
    adam.lr = cfg.lr;
    std::vector<TrainRecord> curve;
    for (int step = 0; step < cfg.steps; ++step) {
        const synth::VolumePair& pair = *pairs[static_cast<std::size_t>(step) % pairs.size()];
        ad::Tape tape;
        const std::vector<ad::Var> params = model.bind(tape);
        const LossTerms terms = total_loss(model, params, pair.moving, pair.fixed, cfg.loss);
        tape.backward(terms.total);
        std::vector<ad::Tensor> grads;
        grads.reserve(params.size());
        for (const auto& p : params) grads.push_back(tape.grad(p));
        optim::adam_step(model.params(), grads, state, adam);
        TrainRecord rec{step, terms.total.value().item(), terms.similarity.value().item(),
                        terms.regularization.value().item()};
        curve.push_back(rec);
        if (on_step) on_step(rec);
    }
    return curve;
}

PairMetrics score_labels(const LabelVolume& warped, const LabelVolume& fixed) {
    PairMetrics m;
    const metrics::DiceResult d = metrics::dice(warped, fixed);
    m.dice_mean = d.mean;
    m.dice_per_label = d.per_label;
    double total = 0.0;
    int count = 0;
    for (const auto& [label, _] : d.per_label) {
        bool in_a = false, in_b = false;
        for (std::size_t i = 0; i < warped.data.size() && !(in_a && in_b); ++i) {
            in_a = in_a || warped.data[i] == label;
            in_b = in_b || fixed.data[i] == label;
        }
        if (!in_a || !in_b) continue;
        total += metrics::assd(warped, fixed, label, fixed.spacing);
        ++count;
    }
    m.assd_mean = count > 0 ? total / count : std::numeric_limits<double>::quiet_NaN();
    return m;
}

PairMetrics evaluate_pair(const RegistrationModel& model, const ImageVolume& moving, const ImageVolume& fixed,
                          const LabelVolume& moving_labels, const LabelVolume& fixed_labels, const LossConfig& loss) {
    ad::Tape tape;
    std::vector<ad::Var> params;
    for (std::size_t i = 0; i < model.params().size(); ++i) params.push_back(tape.constant(model.params()[i]));
    const LossTerms terms = total_loss(model, params, moving, fixed, loss);
    const DisplacementField field = field_from_tensor(terms.displacement.value());
    PairMetrics m = score_labels(warp_labels(moving_labels, field), fixed_labels);
    m.loss = terms.total.value().item();
    return m;
}

}  // namespace steerreg::reg
