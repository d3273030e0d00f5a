#ifndef FLOWCAST_OPTIMIZER_HPP
#define FLOWCAST_OPTIMIZER_HPP

#include <cstdint>
#include <vector>

#include "flowcast/tensor.hpp"

namespace flowcast {

// Adam state for a fixed parameter list; first/second moments per parameter
// plus the shared step count. The list order must not change between steps.
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    void init(const std::vector<Parameter*>& params);
    bool initialized() const { return !m.empty(); }
};

// One bias-corrected Adam update from the accumulated gradients. Raises on a
// non-finite gradient, naming the parameter. Does not zero the gradients.
void adam_step(const std::vector<Parameter*>& params, AdamState& state, double lr);

// Global-norm gradient clipping; returns the pre-clip norm.
double clip_grad_norm(const std::vector<Parameter*>& params, double max_norm);

} // namespace flowcast

#endif
