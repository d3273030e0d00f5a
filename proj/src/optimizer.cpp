#include "flowcast/optimizer.hpp"

#include <cmath>

namespace flowcast {

void AdamState::init(const std::vector<Parameter*>& params) {
    m.clear();
    v.clear();
    m.reserve(params.size());
    v.reserve(params.size());
    for (const Parameter* p : params) {
        m.emplace_back(p->size(), 0.0);
        v.emplace_back(p->size(), 0.0);
    }
    step = 0;
}

void adam_step(const std::vector<Parameter*>& params, AdamState& state, double lr) {
    if (!state.initialized()) state.init(params);
    if (state.m.size() != params.size())
        raise("adam_step: state tracks ", state.m.size(), " parameters, got ", params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Parameter& p = *params[i];
        if (state.m[i].size() != p.size())
            raise("adam_step: state size mismatch for parameter '", p.name, "'");
        for (double gv : p.grad)
            if (!std::isfinite(gv))
                raise("adam_step: non-finite gradient in parameter '", p.name, "'");
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = *params[i];
        auto& mi = state.m[i];
        auto& vi = state.v[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double g = p.grad[j];
            mi[j] = state.beta1 * mi[j] + (1.0 - state.beta1) * g;
            vi[j] = state.beta2 * vi[j] + (1.0 - state.beta2) * g * g;
            const double mh = mi[j] / c1;
            const double vh = vi[j] / c2;
            p.value[j] -= lr * mh / (std::sqrt(vh) + state.eps);
        }
    }
}

double clip_grad_norm(const std::vector<Parameter*>& params, double max_norm) {
    double sq = 0.0;
    for (const Parameter* p : params)
        for (double g : p->grad) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (Parameter* p : params)
            for (double& g : p->grad) g *= scale;
    }
    return norm;
}

} // namespace flowcast
