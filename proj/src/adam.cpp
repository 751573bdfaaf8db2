#include "polygonizer/adam.hpp"

#include <cmath>

namespace polygonizer::tc {

template <typename T>
AdamState<T> make_adam_state(const std::vector<Parameter<T>*>& params, AdamConfig config) {
    AdamState<T> state;
    state.config = config;
    for (const Parameter<T>* p : params) {
        state.m.emplace_back(p->value.size(), T(0));
        state.v.emplace_back(p->value.size(), T(0));
    }
    return state;
}

template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, AdamState<T>& state, double lr) {
    if (state.m.size() != params.size()) {
        throw Error(ErrorCode::Shape, "optimizer state tracks " + std::to_string(state.m.size()) +
                                          " tensors, got " + std::to_string(params.size()));
    }
    ++state.step;
    const double b1 = state.config.beta1;
    const double b2 = state.config.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter<T>& p = *params[i];
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != p.value.size()) {
            throw Error(ErrorCode::Shape, "optimizer state shape mismatch for " + p.name);
        }
        for (std::size_t k = 0; k < m.size(); ++k) {
            const double g = p.grad.empty() ? 0.0 : static_cast<double>(p.grad[k]);
            const double mk = b1 * static_cast<double>(m[k]) + (1.0 - b1) * g;
            const double vk = b2 * static_cast<double>(v[k]) + (1.0 - b2) * g * g;
            m[k] = static_cast<T>(mk);
            v[k] = static_cast<T>(vk);
            const double update = lr * (mk / c1) / (std::sqrt(vk / c2) + state.config.epsilon);
            p.value.data[k] = static_cast<T>(static_cast<double>(p.value.data[k]) - update);
        }
    }
}

template <typename T>
double clip_grad_norm(const std::vector<Parameter<T>*>& params, double max_norm) {
    double sq = 0.0;
    for (const Parameter<T>* p : params) {
        for (T g : p->grad) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const T factor = static_cast<T>(max_norm / norm);
        for (Parameter<T>* p : params) {
            for (T& g : p->grad) g *= factor;
        }
    }
    return norm;
}

template AdamState<float> make_adam_state<float>(const std::vector<Parameter<float>*>&, AdamConfig);
template AdamState<double> make_adam_state<double>(const std::vector<Parameter<double>*>&, AdamConfig);
template void adam_step<float>(const std::vector<Parameter<float>*>&, AdamState<float>&, double);
template void adam_step<double>(const std::vector<Parameter<double>*>&, AdamState<double>&, double);
template double clip_grad_norm<float>(const std::vector<Parameter<float>*>&, double);
template double clip_grad_norm<double>(const std::vector<Parameter<double>*>&, double);

}  // namespace polygonizer::tc
