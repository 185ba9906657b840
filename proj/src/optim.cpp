#include "steerreg/optim.hpp"

#include "steerreg/binary_io.hpp"

#include <cmath>
#include <stdexcept>

namespace steerreg::optim {

namespace {
const std::string kHashEntry = "meta/structure_hash";
const std::string kConfigEntry = "meta/config_hash";
}

std::size_t ParameterSet::add(std::string name, ad::Tensor value) {
    if (find(name)) throw std::invalid_argument("duplicate parameter name " + name);
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    return values_.size() - 1;
}

std::optional<std::size_t> ParameterSet::find(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
        if (names_[i] == name) return i;
    return std::nullopt;
}

std::size_t ParameterSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
}

void adam_step(ParameterSet& params, const std::vector<ad::Tensor>& grads, AdamState& state, const AdamConfig& cfg) {
    if (grads.size() != params.size()) throw std::invalid_argument("adam_step: gradient count mismatch");
    if (state.m.empty()) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m.emplace_back(params[i].shape(), 0.0);
            state.v.emplace_back(params[i].shape(), 0.0);
        }
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        ad::Tensor& p = params[i];
        const ad::Tensor& g = grads[i];
        if (g.size() != p.size()) throw std::invalid_argument("adam_step: gradient shape mismatch for " + params.name(i));
        ad::Tensor& m = state.m[i];
        ad::Tensor& v = state.v[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            p[k] -= cfg.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.eps);
        }
    }
}

namespace {

ad::Tensor hash_tensor(std::uint64_t h) {
    return ad::Tensor(ad::Shape{2}, std::vector<double>{static_cast<double>(h >> 32), static_cast<double>(h & 0xffffffffu)});
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params, std::uint64_t structure_hash,
                     std::uint64_t config_hash) {
    io::ByteWriter w;
    w.magic("STRG");
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(params.size() + 2));
    auto entry = [&](const std::string& name, const ad::Tensor& t) {
        w.u32(static_cast<std::uint32_t>(name.size()));
        w.magic(name);
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
        w.f64s(t.data());
    };
    entry(kHashEntry, hash_tensor(structure_hash));
    entry(kConfigEntry, hash_tensor(config_hash));
    for (std::size_t i = 0; i < params.size(); ++i) entry(params.name(i), params[i]);
    io::write_file_atomic(path, w.data());
}

ParameterSet load_checkpoint(const std::filesystem::path& path, std::uint64_t* structure_hash,
                             std::uint64_t* config_hash) {
    io::ByteReader r(io::read_file(path), path.string());
    if (!r.expect_magic("STRG")) throw std::runtime_error("not a STRG file: " + path.string());
    if (const auto v = r.u32(); v != 1) throw std::runtime_error("unsupported STRG version " + std::to_string(v));
    const std::uint32_t count = r.u32();
    ParameterSet out;
    bool have_hash = false;
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::string name = r.str(r.u32());
        const std::uint32_t rank = r.u32();
        if (rank > 8) throw std::runtime_error("implausible tensor rank in " + path.string());
        ad::Shape shape(rank);
        for (auto& d : shape) d = r.u32();
        ad::Tensor t(shape);
        r.f64s(t.data());
        if (name == kHashEntry || name == kConfigEntry) {
            if (t.size() != 2) throw std::runtime_error("malformed " + name + " in " + path.string());
            const std::uint64_t h = (static_cast<std::uint64_t>(t[0]) << 32) | static_cast<std::uint64_t>(t[1]);
            if (name == kHashEntry) {
                if (structure_hash) *structure_hash = h;
                have_hash = true;
            } else if (config_hash) {
                *config_hash = h;
            }
        } else {
            out.add(name, std::move(t));
        }
    }
    if (r.remaining() != 0) throw std::runtime_error("trailing bytes in " + path.string());
    if (!have_hash) throw std::runtime_error("checkpoint without structure hash: " + path.string());
    return out;
}

}  // namespace steerreg::optim
