#pragma once

#include <functional>
#include <span>
#include <vector>

#include "polygonizer/tape.hpp"

namespace polygonizer::tc {

struct GradCheckResult {
    double max_relative_error = 0.0;
    double analytic = 0.0;  // at the worst entry
    double numeric = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    std::size_t entries_checked = 0;
};

// Entries whose analytic and numeric gradients are both below this magnitude
// are compared on an absolute scale.
inline constexpr double kGradCheckFloor = 1e-6;

double relative_error(double analytic, double numeric);

using GraphFn = std::function<Var(Tape<double>&, std::span<const Var>)>;

/// Compares the reverse-mode gradient of a scalar graph output against
/// central differences, for every entry of every input.
GradCheckResult grad_check(const GraphFn& graph, std::vector<Tensor<double>> inputs,
                           double step = 1e-5);

/// Same comparison for parameter entries. `indices[k]` lists the entries of
/// `params[k]` to probe; an empty list probes all of them.
GradCheckResult grad_check_parameters(const std::function<Var(Tape<double>&)>& graph,
                                      std::span<Parameter<double>* const> params,
                                      const std::vector<std::vector<std::size_t>>& indices,
                                      double step = 1e-5);

}  // namespace polygonizer::tc
