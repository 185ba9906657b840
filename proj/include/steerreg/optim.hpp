#pragma once

#include "steerreg/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace steerreg::optim {

/// Ordered, named learnable tensors.
class ParameterSet {
public:
    std::size_t add(std::string name, ad::Tensor value);

    std::size_t size() const { return values_.size(); }
    const std::string& name(std::size_t i) const { return names_.at(i); }
    ad::Tensor& operator[](std::size_t i) { return values_.at(i); }
    const ad::Tensor& operator[](std::size_t i) const { return values_.at(i); }
    std::optional<std::size_t> find(const std::string& name) const;

    /// Total number of learnable scalars.
    std::size_t scalar_count() const;

private:
    std::vector<std::string> names_;
    std::vector<ad::Tensor> values_;
};

struct AdamState {
    std::vector<ad::Tensor> m, v;
    std::int64_t step = 0;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One bias-corrected Adam update of params in place.
void adam_step(ParameterSet& params, const std::vector<ad::Tensor>& grads, AdamState& state, const AdamConfig& cfg);

/// STRG checkpoint. The structure and config hashes travel as extra entries
/// "meta/structure_hash" and "meta/config_hash", each holding the two 32-bit
/// halves as f64 values.
void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params, std::uint64_t structure_hash,
                     std::uint64_t config_hash = 0);
ParameterSet load_checkpoint(const std::filesystem::path& path, std::uint64_t* structure_hash = nullptr,
                             std::uint64_t* config_hash = nullptr);

}  // namespace steerreg::optim
