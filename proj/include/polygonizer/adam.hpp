#pragma once

#include <cstdint>
#include <vector>

#include "polygonizer/tensor.hpp"

namespace polygonizer::tc {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
    AdamConfig config;
    std::vector<Buffer<T>> m;
    std::vector<Buffer<T>> v;
    std::uint64_t step = 0;
};

template <typename T>
AdamState<T> make_adam_state(const std::vector<Parameter<T>*>& params, AdamConfig config = {});

/// One bias-corrected Adam update from the gradients held in each parameter.
/// Parameters that never received a gradient are treated as having a zero
/// gradient.
template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, AdamState<T>& state, double lr);

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
template <typename T>
double clip_grad_norm(const std::vector<Parameter<T>*>& params, double max_norm);

}  // namespace polygonizer::tc
