#pragma once

// Oracles and check suites shared by the unit tests and the acceptance runner.

#include "steerreg/autodiff.hpp"
#include "steerreg/metrics.hpp"
#include "steerreg/rng.hpp"

#include <functional>
#include <string>
#include <vector>

namespace steerreg::testing {

ad::Tensor random_tensor(const ad::Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0);

using GraphFn = std::function<ad::Var(const std::vector<ad::Var>&)>;

/// Central differences (step h) against the tape gradient on `coords` random
/// coordinates of the inputs. Non-scalar outputs are contracted with fixed
/// random weights. Returns the worst |ad - fd| / max(|ad|, |fd|, 1e-6).
double gradient_check(const std::vector<ad::Tensor>& inputs, const GraphFn& f, Rng& rng, int coords = 10,
                      double h = 1e-4);

struct GradCheck {
    std::string op;
    double rel_error = 0.0;
};

/// Every differentiable op on randomized small shapes.
std::vector<GradCheck> gradient_suite(std::uint64_t seed);

struct RepresentationErrors {
    double homomorphism = 0.0;
    double orthogonality = 0.0;
    double steerability = 0.0;
};

/// Worst errors over `rotations` random rotations for each l in 0..2.
RepresentationErrors representation_suite(int rotations, std::uint64_t seed);

/// Per-label Dice by direct counting.
double dice_oracle(const LabelVolume& a, const LabelVolume& b, int label);
/// ASSD from an independent surface extraction and all-pairs distances.
double assd_oracle(const LabelVolume& a, const LabelVolume& b, int label, const std::array<double, 3>& spacing);

struct WilcoxonOracle {
    double w_plus = 0.0;
    double p_greater = 0.0, p_less = 0.0, p_two_sided = 0.0;
};

/// Exact signed-rank distribution by enumerating all sign patterns, with
/// ranks computed by pairwise comparison.
WilcoxonOracle wilcoxon_oracle(const std::vector<double>& a, const std::vector<double>& b);

/// Random label volume of blocky regions.
LabelVolume random_labels(Extent e, int labels, Rng& rng);

}  // namespace steerreg::testing
