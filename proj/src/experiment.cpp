#include "steerreg/experiment.hpp"

#include "steerreg/basis.hpp"
#include "steerreg/binary_io.hpp"
#include "steerreg/metrics.hpp"
#include "steerreg/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

namespace steerreg::exp {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ','))
        if (auto t = trim(item); !t.empty()) out.push_back(t);
    return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const char* end = value.data() + value.size();
    const auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc() || ptr != end) throw ConfigError(key + ": cannot parse '" + value + "'");
    return out;
}

double parse_real(const std::string& key, const std::string& value) {
    char* end = nullptr;
    const double v = std::strtod(value.c_str(), &end);
    if (value.empty() || end != value.c_str() + value.size() || !std::isfinite(v))
        throw ConfigError(key + ": cannot parse '" + value + "'");
    return v;
}

// Reads keys out of one section, remembering which were consumed.
class SectionReader {
public:
    SectionReader(const IniFile& ini, std::string name) : name_(std::move(name)) {
        if (auto it = ini.sections.find(name_); it != ini.sections.end()) values_ = it->second;
    }
    bool has(const std::string& key) const { return values_.count(key) > 0; }
    std::optional<std::string> take(const std::string& key) {
        auto it = values_.find(key);
        if (it == values_.end()) return std::nullopt;
        std::string v = it->second;
        values_.erase(it);
        return v;
    }
    std::string qualified(const std::string& key) const { return name_ + "." + key; }

    void get(const std::string& key, int& out) {
        if (auto v = take(key)) out = parse_number<int>(qualified(key), *v);
    }
    void get(const std::string& key, std::uint64_t& out) {
        if (auto v = take(key)) out = parse_number<std::uint64_t>(qualified(key), *v);
    }
    void get(const std::string& key, double& out) {
        if (auto v = take(key)) out = parse_real(qualified(key), *v);
    }
    void get(const std::string& key, std::filesystem::path& out) {
        if (auto v = take(key)) out = *v;
    }
    void get(const std::string& key, std::vector<int>& out) {
        if (auto v = take(key)) {
            out.clear();
            for (const auto& item : split_list(*v)) out.push_back(parse_number<int>(qualified(key), item));
            if (out.empty()) throw ConfigError(qualified(key) + ": empty list");
        }
    }
    void get(const std::string& key, std::vector<double>& out) {
        if (auto v = take(key)) {
            out.clear();
            for (const auto& item : split_list(*v)) out.push_back(parse_real(qualified(key), item));
            if (out.empty()) throw ConfigError(qualified(key) + ": empty list");
        }
    }
    void get(const std::string& key, std::vector<std::uint64_t>& out) {
        if (auto v = take(key)) {
            out.clear();
            for (const auto& item : split_list(*v)) out.push_back(parse_number<std::uint64_t>(qualified(key), item));
            if (out.empty()) throw ConfigError(qualified(key) + ": empty list");
        }
    }
    void finish() const {
        if (!values_.empty()) throw ConfigError("unknown key " + qualified(values_.begin()->first));
    }

private:
    std::string name_;
    std::map<std::string, std::string> values_;
};

layers::Ratio ratio_value(const std::string& key, const std::string& text) {
    try {
        return layers::parse_ratio(text);
    } catch (const std::exception& e) {
        throw ConfigError(key + ": " + e.what());
    }
}

std::string join(const std::vector<std::string>& items) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
    return out;
}

template <class T>
std::string join_numbers(const std::vector<T>& v) {
    std::vector<std::string> items;
    for (const T& x : v) {
        std::ostringstream s;
        s.precision(17);
        s << x;
        items.push_back(s.str());
    }
    return join(items);
}

}  // namespace

IniFile IniFile::parse(std::string_view text) {
    IniFile ini;
    std::string section;
    std::istringstream in{std::string(text)};
    std::string raw;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = trim(raw);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        const std::string where = "line " + std::to_string(line_no);
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
            section = trim(std::string_view(line).substr(1, line.size() - 2));
            if (section.empty()) throw ConfigError(where + ": empty section name");
            ini.sections[section];
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
        if (section.empty()) throw ConfigError(where + ": key outside any section");
        const std::string key = trim(std::string_view(line).substr(0, eq));
        std::string value = trim(std::string_view(line).substr(eq + 1));
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
        if (key.empty()) throw ConfigError(where + ": empty key");
        if (!ini.sections[section].emplace(key, value).second)
            throw ConfigError(where + ": duplicate key " + section + "." + key);
    }
    return ini;
}

ExperimentConfig ExperimentConfig::parse(std::string_view text) {
    const IniFile ini = IniFile::parse(text);
    static const std::set<std::string> known{"data", "model", "encoder", "loss", "optim", "output", "sweep"};
    for (const auto& [name, _] : ini.sections)
        if (!known.count(name)) throw ConfigError("unknown section [" + name + "]");

    ExperimentConfig cfg;
    {
        SectionReader s(ini, "data");
        s.get("extent", cfg.data.extent);
        s.get("blobs", cfg.data.n_blobs);
        s.get("labels", cfg.data.n_labels);
        s.get("amplitude", cfg.data.deform_amplitude);
        s.get("smoothness", cfg.data.deform_smoothness);
        s.get("seed", cfg.data.seed);
        s.get("pairs", cfg.n_pairs);
        s.get("dir", cfg.data_dir);
        s.finish();
    }
    {
        SectionReader s(ini, "model");
        if (auto v = s.take("variant")) {
            try {
                cfg.model.variant = reg::parse_variant(*v);
            } catch (const std::exception& e) {
                throw ConfigError(std::string("model.variant: ") + e.what());
            }
        }
        s.get("decoder_channels", cfg.model.decoder_channels);
        s.finish();
    }
    {
        SectionReader s(ini, "encoder");
        s.get("channels", cfg.model.channels);
        s.get("strides", cfg.model.strides);
        const bool has_ratio = s.has("ratio"), has_first = s.has("first_level_ratio");
        if (auto v = s.take("ratio")) cfg.model.deep_ratio = ratio_value("encoder.ratio", *v);
        if (auto v = s.take("first_level_ratio")) cfg.model.first_ratio = ratio_value("encoder.first_level_ratio", *v);
        if (auto v = s.take("ratio_mode")) {
            if (*v == "budget") cfg.model.ratio_mode = layers::RatioMode::budget;
            else if (*v == "literal") cfg.model.ratio_mode = layers::RatioMode::literal;
            else throw ConfigError("encoder.ratio_mode must be budget or literal");
        }
        s.finish();
        cfg.ratios_given = has_ratio || has_first;
        if (cfg.model.variant == reg::Variant::equivariant && !(has_ratio && has_first))
            throw ConfigError("variant equivariant requires encoder.ratio and encoder.first_level_ratio");
        if (cfg.model.variant == reg::Variant::standard && cfg.ratios_given)
            throw ConfigError("variant standard does not take encoder ratio fields");
    }
    {
        SectionReader s(ini, "loss");
        s.get("lambda", cfg.train.loss.lambda);
        if (cfg.data.extent < 32) cfg.train.loss.ncc_window = 5;
        s.get("window", cfg.train.loss.ncc_window);
        s.get("epsilon", cfg.train.loss.epsilon);
        s.finish();
    }
    {
        SectionReader s(ini, "optim");
        s.get("lr", cfg.train.lr);
        s.get("steps", cfg.train.steps);
        s.get("seed", cfg.model.seed);
        s.finish();
    }
    {
        SectionReader s(ini, "output");
        s.get("dir", cfg.output_dir);
        s.finish();
    }
    {
        SectionReader s(ini, "sweep");
        if (auto v = s.take("ratios")) {
            cfg.sweep.ratios.clear();
            for (const auto& item : split_list(*v)) cfg.sweep.ratios.push_back(ratio_value("sweep.ratios", item));
            if (cfg.sweep.ratios.empty()) throw ConfigError("sweep.ratios: empty list");
        }
        s.get("seeds", cfg.sweep.seeds);
        s.get("angles", cfg.sweep.angles);
        s.get("fractions", cfg.sweep.fractions);
        s.get("train_pairs", cfg.sweep.train_pairs);
        s.get("test_pairs", cfg.sweep.test_pairs);
        s.finish();
    }

    try {
        cfg.data.validate();
        cfg.train.loss.validate();
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    if (cfg.n_pairs < 1) throw ConfigError("data.pairs must be >= 1");
    if (cfg.model.channels.size() != cfg.model.strides.size())
        throw ConfigError("encoder.channels and encoder.strides differ in length");
    for (int c : cfg.model.channels)
        if (c < 1) throw ConfigError("encoder.channels must be positive");
    for (int s : cfg.model.strides)
        if (s != 1 && s != 2) throw ConfigError("encoder.strides must be 1 or 2");
    if (cfg.model.decoder_channels < 1) throw ConfigError("model.decoder_channels must be positive");
    if (!(cfg.train.lr > 0)) throw ConfigError("optim.lr must be positive");
    if (cfg.train.steps < 0) throw ConfigError("optim.steps must be non-negative");
    if (cfg.sweep.train_pairs < 1 || cfg.sweep.test_pairs < 1) throw ConfigError("sweep pair counts must be >= 1");
    for (double f : cfg.sweep.fractions)
        if (f != 1.0 && f != 0.5 && f != 0.25 && f != 0.125)
            throw ConfigError("sweep.fractions must be among 1, 0.5, 0.25, 0.125");
    // Building the model validates channel budgets and ratios.
    try {
        make_model(cfg.model);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("model: ") + e.what());
    }
    return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
    std::vector<std::uint8_t> bytes;
    try {
        bytes = io::read_file(path);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    return parse(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

std::string ExperimentConfig::canonical() const {
    std::ostringstream s;
    s.precision(17);
    s << "data.extent=" << data.extent << "\n"
      << "data.blobs=" << data.n_blobs << "\n"
      << "data.labels=" << data.n_labels << "\n"
      << "data.amplitude=" << data.deform_amplitude << "\n"
      << "data.smoothness=" << data.deform_smoothness << "\n"
      << "data.seed=" << data.seed << "\n"
      << "data.pairs=" << n_pairs << "\n"
      << "model.variant=" << reg::variant_name(model.variant) << "\n"
      << "model.decoder_channels=" << model.decoder_channels << "\n"
      << "encoder.channels=" << join_numbers(model.channels) << "\n"
      << "encoder.strides=" << join_numbers(model.strides) << "\n";
    if (model.variant == reg::Variant::equivariant)
        s << "encoder.ratio=" << layers::ratio_string(model.deep_ratio) << "\n"
          << "encoder.first_level_ratio=" << layers::ratio_string(model.first_ratio) << "\n"
          << "encoder.ratio_mode=" << (model.ratio_mode == layers::RatioMode::budget ? "budget" : "literal") << "\n";
    s << "loss.lambda=" << train.loss.lambda << "\n"
      << "loss.window=" << train.loss.ncc_window << "\n"
      << "loss.epsilon=" << train.loss.epsilon << "\n"
      << "optim.lr=" << train.lr << "\n"
      << "optim.steps=" << train.steps << "\n"
      << "optim.seed=" << model.seed << "\n";
    std::vector<std::string> ratios;
    for (const auto& r : sweep.ratios) ratios.push_back(layers::ratio_string(r));
    s << "sweep.ratios=" << join(ratios) << "\n"
      << "sweep.seeds=" << join_numbers(sweep.seeds) << "\n"
      << "sweep.angles=" << join_numbers(sweep.angles) << "\n"
      << "sweep.fractions=" << join_numbers(sweep.fractions) << "\n"
      << "sweep.train_pairs=" << sweep.train_pairs << "\n"
      << "sweep.test_pairs=" << sweep.test_pairs << "\n";
    return s.str();
}

std::uint64_t ExperimentConfig::hash() const { return reg::fnv1a(canonical()); }
std::string ExperimentConfig::hash_hex() const { return hex64(hash()); }

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::vector<synth::VolumePair> make_pairs(const synth::SyntheticSpec& data, int count, std::uint64_t offset) {
    std::vector<synth::VolumePair> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        synth::SyntheticSpec s = data;
        s.seed = data.seed + offset + static_cast<std::uint64_t>(i);
        out.push_back(synth::generate_pair(s));
    }
    return out;
}

std::vector<synth::VolumePair> config_pairs(const ExperimentConfig& cfg) {
    if (cfg.data_dir.empty()) return make_pairs(cfg.data, cfg.n_pairs);
    std::vector<synth::VolumePair> out;
    for (int i = 0; i < cfg.n_pairs; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "pair_%03d", i);
        out.push_back(synth::load_pair(cfg.data_dir / name));
    }
    return out;
}

std::vector<const synth::VolumePair*> pointers(const std::vector<synth::VolumePair>& pairs) {
    std::vector<const synth::VolumePair*> out;
    for (const auto& p : pairs) out.push_back(&p);
    return out;
}

std::unique_ptr<reg::RegistrationModel> make_model(const reg::ModelConfig& cfg) {
    return std::make_unique<reg::RegistrationModel>(cfg);
}

reg::ModelConfig with_variant(const reg::ModelConfig& base, reg::Variant v) {
    reg::ModelConfig out = base;
    out.variant = v;
    return out;
}

EvalSummary evaluate(const reg::RegistrationModel& model, const std::vector<synth::VolumePair>& pairs,
                     const reg::LossConfig& loss) {
    EvalSummary s;
    double assd_total = 0.0;
    int assd_count = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        EvalRow row;
        row.pair = i;
        row.metrics = reg::evaluate_pair(model, p.moving, p.fixed, p.moving_labels, p.fixed_labels, loss);
        row.unregistered_dice = reg::score_labels(p.moving_labels, p.fixed_labels).dice_mean;
        s.mean_dice += row.metrics.dice_mean;
        s.mean_unregistered_dice += row.unregistered_dice;
        if (std::isfinite(row.metrics.assd_mean)) {
            assd_total += row.metrics.assd_mean;
            ++assd_count;
        }
        s.rows.push_back(std::move(row));
    }
    const double n = static_cast<double>(pairs.size());
    s.mean_dice /= n;
    s.mean_unregistered_dice /= n;
    s.mean_assd = assd_count ? assd_total / assd_count : std::numeric_limits<double>::quiet_NaN();
    return s;
}

std::unique_ptr<reg::RegistrationModel> train_model(const reg::ModelConfig& model_cfg,
                                                    const std::vector<const synth::VolumePair*>& pairs,
                                                    const reg::TrainConfig& train_cfg,
                                                    std::vector<reg::TrainRecord>* curve, std::ostream* log,
                                                    int log_every) {
    auto model = make_model(model_cfg);
    if (train_cfg.steps == 0) return model;
    auto records = reg::train(*model, pairs, train_cfg, [&](const reg::TrainRecord& r) {
        if (log && (r.step % log_every == 0 || r.step + 1 == train_cfg.steps))
            *log << "  step " << r.step << " loss " << r.loss << std::endl;
    });
    if (curve) *curve = std::move(records);
    return model;
}

namespace {

ad::Tensor pair_input(const synth::VolumePair& p) {
    ad::Tensor m = to_tensor(p.moving), f = to_tensor(p.fixed);
    ad::Tensor out(ad::Shape{1, 2, m.dim(2), m.dim(3), m.dim(4)});
    std::copy(m.data().begin(), m.data().end(), out.data().begin());
    std::copy(f.data().begin(), f.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(m.size()));
    return out;
}

std::vector<ad::Var> constants(ad::Tape& tape, const optim::ParameterSet& params) {
    std::vector<ad::Var> out;
    for (std::size_t i = 0; i < params.size(); ++i) out.push_back(tape.constant(params[i]));
    return out;
}

std::vector<ad::Tensor> encode_levels(const reg::RegistrationModel& model, const ad::Tensor& input) {
    ad::Tape tape;
    std::vector<ad::Tensor> out;
    for (const auto& v : model.encode(tape.constant(input), constants(tape, model.params()))) out.push_back(v.value());
    return out;
}

std::vector<so3::FieldType> level_types(const reg::RegistrationModel& model) {
    std::vector<so3::FieldType> out;
    if (const auto& e = model.equivariant_encoder())
        for (const auto& level : e->spec().levels) out.push_back(level.type);
    else
        for (int c : model.encoder_channels()) out.push_back(so3::FieldType::scalars(c));
    return out;
}

double squared_norm(const ad::Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v * v;
    return s;
}

double squared_diff(const ad::Tensor& a, const ad::Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

// out(p) = rho in(R^T (p - c) + c), trilinear, zero outside; (x, y, z) axes.
ad::Tensor resample_field(const ad::Tensor& in, const Eigen::MatrixXd& rho, const Eigen::Matrix3d& r) {
    const ad::Shape& s = in.shape();
    const std::size_t c = s[1], d = s[2], h = s[3], w = s[4], vox = d * h * w;
    const Eigen::Vector3d center(0.5 * (w - 1.0), 0.5 * (h - 1.0), 0.5 * (d - 1.0));
    const Eigen::Matrix3d rt = r.transpose();
    ad::Tensor sampled(s, 0.0);
    for (std::size_t z = 0; z < d; ++z)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const Eigen::Vector3d q = rt * (Eigen::Vector3d(double(x), double(y), double(z)) - center) + center;
                const long x0 = static_cast<long>(std::floor(q.x())), y0 = static_cast<long>(std::floor(q.y())),
                           z0 = static_cast<long>(std::floor(q.z()));
                const double fx = q.x() - x0, fy = q.y() - y0, fz = q.z() - z0;
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const long zz = z0 + dz, yy = y0 + dy, xx = x0 + dx;
                            if (zz < 0 || yy < 0 || xx < 0 || zz >= long(d) || yy >= long(h) || xx >= long(w)) continue;
                            const double wt = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
                            const std::size_t src = (static_cast<std::size_t>(zz) * h + yy) * w + xx;
                            const std::size_t dst = (z * h + y) * w + x;
                            for (std::size_t ch = 0; ch < c; ++ch) sampled[ch * vox + dst] += wt * in[ch * vox + src];
                        }
            }
    ad::Tensor out(s, 0.0);
    for (std::size_t o = 0; o < c; ++o)
        for (std::size_t i = 0; i < c; ++i) {
            if (rho(o, i) == 0.0) continue;
            for (std::size_t v = 0; v < vox; ++v) out[o * vox + v] += rho(o, i) * sampled[i * vox + v];
        }
    return out;
}

const Eigen::Vector3d kObliqueAxis = Eigen::Vector3d(0.3, 0.5, 0.8).normalized();

}  // namespace

double encoder_octahedral_residual(const reg::RegistrationModel& model, int extent, std::uint64_t seed) {
    const auto e = static_cast<std::size_t>(extent);
    Rng rng(seed);
    ad::Tensor x(ad::Shape{1, 2, e, e, e});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
    const auto types = level_types(model);
    const auto base = encode_levels(model, x);
    const so3::FieldType input = so3::FieldType::scalars(2);
    double worst = 0.0;
    for (const auto& r : so3::octahedral_rotations()) {
        const auto rotated = encode_levels(model, layers::rotate_field(x, input, r));
        double num = 0.0, den = 0.0;
        for (std::size_t k = 0; k < base.size(); ++k) {
            num += squared_diff(rotated[k], layers::rotate_field(base[k], types[k], r));
            den += squared_norm(base[k]);
        }
        worst = std::max(worst, std::sqrt(num / den));
    }
    return worst;
}

EquivarianceReport equivariance_report(const reg::RegistrationModel& model, const synth::SyntheticSpec& data,
                                       std::uint64_t seed) {
    EquivarianceReport rep;
    const int extent = data.extent;
    const auto e = static_cast<std::size_t>(extent);
    Rng rng(seed);
    if (const auto& enc = model.equivariant_encoder()) {
        for (std::size_t k = 0; k < enc->blocks().size(); ++k) {
            const auto& block = enc->blocks()[k];
            ad::Tensor x(ad::Shape{1, static_cast<std::size_t>(block.in_type().total_channels()), e, e, e});
            for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
            auto run = [&](const ad::Tensor& t) {
                ad::Tape local;
                return block.forward({local.constant(t), block.in_type()}, constants(local, model.params()))
                    .tensor.value();
            };
            const ad::Tensor y = run(x);
            double worst = 0.0;
            for (const auto& r : so3::octahedral_rotations()) {
                const ad::Tensor a = run(layers::rotate_field(x, block.in_type(), r));
                const ad::Tensor b = layers::rotate_field(y, block.out_type(), r);
                worst = std::max(worst, std::sqrt(squared_diff(a, b) / squared_norm(y)));
            }
            rep.layers.push_back({"level" + std::to_string(k) + " " + block.out_type().to_string(), worst});
        }
    }
    rep.stack_octahedral = encoder_octahedral_residual(model, extent, seed + 1);

    // Generic angles: smooth synthetic input, first level only (stride 1),
    // compared inside a ball that stays clear of the border.
    const synth::VolumePair pair = synth::generate_pair(data);
    const ad::Tensor input = pair_input(pair);
    const so3::FieldType type0 = level_types(model).front();
    const ad::Tensor y0 = encode_levels(model, input).front();
    const double radius = 0.3 * (extent - 1);
    const double c = 0.5 * (extent - 1);
    for (double angle : {5.0, 10.0, 15.0}) {
        const auto rot = so3::Rotation::from_axis_angle(kObliqueAxis, angle * std::numbers::pi / 180.0);
        const Eigen::Matrix3d r = rot.matrix();
        const ad::Tensor a =
            encode_levels(model, resample_field(input, Eigen::MatrixXd::Identity(2, 2), r)).front();
        const ad::Tensor b = resample_field(y0, so3::rep_matrix(type0, rot), r);
        const std::size_t channels = a.dim(1), vox = e * e * e;
        double num = 0.0, den = 0.0;
        for (std::size_t z = 0; z < e; ++z)
            for (std::size_t y = 0; y < e; ++y)
                for (std::size_t x = 0; x < e; ++x) {
                    const double d2 = (x - c) * (x - c) + (y - c) * (y - c) + (z - c) * (z - c);
                    if (d2 > radius * radius) continue;
                    const std::size_t v = (z * e + y) * e + x;
                    for (std::size_t ch = 0; ch < channels; ++ch) {
                        num += (a[ch * vox + v] - b[ch * vox + v]) * (a[ch * vox + v] - b[ch * vox + v]);
                        den += b[ch * vox + v] * b[ch * vox + v];
                    }
                }
        rep.generic_stack.emplace_back(angle, std::sqrt(num / den));
        double basis_worst = 0.0;
        for (int li = 0; li <= 2; ++li)
            for (int lo = 0; lo <= 2; ++lo)
                basis_worst = std::max(basis_worst,
                                       basis::basis_equivariance_residual(*basis::cached_kernel_basis(li, lo, 3), rot));
        rep.generic_basis.emplace_back(angle, basis_worst);
    }
    return rep;
}

std::vector<RotationRow> rotate_eval(const reg::RegistrationModel& model, const std::vector<synth::VolumePair>& pairs,
                                     const std::vector<double>& angles) {
    std::vector<RotationRow> rows;
    for (double angle : angles)
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            const auto& p = pairs[i];
            const ImageVolume moving = metrics::rotate_volume(p.moving, angle);
            const LabelVolume moving_labels = metrics::rotate_volume(p.moving_labels, angle);
            const DisplacementField field = field_from_tensor(model.predict(moving, p.fixed));
            const reg::PairMetrics m = reg::score_labels(warp_labels(moving_labels, field), p.fixed_labels);
            rows.push_back({angle, i, m.dice_mean, m.assd_mean});
        }
    return rows;
}

double dice_drop(const std::vector<RotationRow>& rows, double angle) {
    double at0 = 0.0, at = 0.0;
    int n0 = 0, n = 0;
    for (const auto& r : rows) {
        if (r.angle == 0.0) {
            at0 += r.dice;
            ++n0;
        } else if (std::abs(r.angle) == angle) {
            at += r.dice;
            ++n;
        }
    }
    if (n0 == 0 || n == 0) throw std::invalid_argument("dice_drop: missing angle rows");
    return at0 / n0 - at / n;
}

layers::RatioMode sweep_mode(const layers::Ratio& ratio, int budget) {
    const int unit = ratio[0] + 3 * ratio[1] + 5 * ratio[2];
    return unit > budget ? layers::RatioMode::literal : layers::RatioMode::budget;
}

std::vector<RatioRow> ratio_sweep(const ExperimentConfig& cfg, std::ostream* log) {
    std::vector<synth::VolumePair> train_pairs, test_pairs;
    if (cfg.train.steps > 0) {
        train_pairs = config_pairs(cfg);
        test_pairs = make_pairs(cfg.data, cfg.sweep.test_pairs, 1000);
    }
    int budget = cfg.model.channels.back();
    for (std::size_t k = 1; k < cfg.model.channels.size(); ++k) budget = std::min(budget, cfg.model.channels[k]);
    std::vector<RatioRow> rows;
    for (const auto& ratio : cfg.sweep.ratios)
        for (std::uint64_t seed : cfg.sweep.seeds) {
            reg::ModelConfig mc = with_variant(cfg.model, reg::Variant::equivariant);
            mc.deep_ratio = ratio;
            mc.ratio_mode = sweep_mode(ratio, budget);
            mc.seed = seed;
            RatioRow row;
            row.ratio = ratio;
            row.mode = mc.ratio_mode;
            row.seed = seed;
            if (log) *log << "ratio " << layers::ratio_string(ratio) << " seed " << seed << std::endl;
            auto model = cfg.train.steps > 0 ? train_model(mc, pointers(train_pairs), cfg.train, nullptr, log, 500)
                                             : make_model(mc);
            row.level_channels = model->encoder_channels();
            row.encoder_parameters = model->encoder_parameter_count();
            row.parameters = model->parameter_count();
            row.dice = cfg.train.steps > 0 ? evaluate(*model, test_pairs, cfg.train.loss).mean_dice
                                           : std::numeric_limits<double>::quiet_NaN();
            rows.push_back(std::move(row));
        }
    return rows;
}

std::vector<FractionRow> sample_efficiency(const ExperimentConfig& cfg, std::ostream* log) {
    const auto n_train = static_cast<std::size_t>(cfg.sweep.train_pairs);
    const auto n_test = static_cast<std::size_t>(cfg.sweep.test_pairs);
    const auto all = make_pairs(cfg.data, static_cast<int>(n_train + n_test));
    std::vector<FractionRow> rows;
    for (double f : cfg.sweep.fractions) {
        const synth::Split split = synth::dataset_split(all.size(), f, cfg.data.seed, n_test);
        std::vector<const synth::VolumePair*> train;
        for (std::size_t i : split.train) train.push_back(&all[i]);
        std::vector<synth::VolumePair> test;
        for (std::size_t i : split.test) test.push_back(all[i]);
        FractionRow row;
        row.fraction = f;
        row.train_pairs = train.size();
        for (reg::Variant v : {reg::Variant::standard, reg::Variant::equivariant}) {
            if (log) *log << "fraction " << f << " (" << train.size() << " pairs) " << reg::variant_name(v) << std::endl;
            auto model = train_model(with_variant(cfg.model, v), train, cfg.train, nullptr, log, 500);
            const double d = evaluate(*model, test, cfg.train.loss).mean_dice;
            (v == reg::Variant::standard ? row.standard_dice : row.equivariant_dice) = d;
        }
        rows.push_back(row);
    }
    return rows;
}

ParamCounts param_counts(const ExperimentConfig& cfg) {
    ParamCounts out;
    const auto s = make_model(with_variant(cfg.model, reg::Variant::standard));
    const auto e = make_model(with_variant(cfg.model, reg::Variant::equivariant));
    out.standard_encoder = s->encoder_parameter_count();
    out.equivariant_encoder = e->encoder_parameter_count();
    out.standard_model = s->parameter_count();
    out.equivariant_model = e->parameter_count();
    return out;
}

}  // namespace steerreg::exp
