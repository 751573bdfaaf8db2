#include "polygonizer/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace polygonizer::tc {

double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
    return std::abs(analytic - numeric) / denom;
}

namespace {

void record(GradCheckResult& result, std::size_t input, std::size_t index, double analytic,
            double numeric) {
    const double err = relative_error(analytic, numeric);
    ++result.entries_checked;
    if (err > result.max_relative_error || result.entries_checked == 1) {
        result.max_relative_error = std::max(result.max_relative_error, err);
        result.analytic = analytic;
        result.numeric = numeric;
        result.worst_input = input;
        result.worst_index = index;
    }
}

double scalar_of(Tape<double>& tape, Var out) {
    const auto& v = tape.value(out);
    if (v.size() != 1) {
        throw Error(ErrorCode::NonScalarOutput, "grad_check output has shape " + shape_string(v.shape));
    }
    return v.data[0];
}

}  // namespace

GradCheckResult grad_check(const GraphFn& graph, std::vector<Tensor<double>> inputs, double step) {
    auto evaluate = [&graph](const std::vector<Tensor<double>>& values, bool record) {
        Tape<double> tape(record);
        std::vector<Var> vars;
        vars.reserve(values.size());
        for (const auto& v : values) vars.push_back(tape.input(v));
        const Var out = graph(tape, vars);
        const double y = scalar_of(tape, out);
        std::vector<Buffer<double>> grads;
        if (record) {
            tape.backward(out);
            for (Var v : vars) {
                auto g = tape.grad(v);
                if (g.empty()) g.assign(tape.value(v).size(), 0.0);
                grads.push_back(std::move(g));
            }
        }
        return std::make_pair(y, grads);
    };

    const auto analytic = evaluate(inputs, true).second;
    GradCheckResult result;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (std::size_t k = 0; k < inputs[i].size(); ++k) {
            const double saved = inputs[i].data[k];
            inputs[i].data[k] = saved + step;
            const double plus = evaluate(inputs, false).first;
            inputs[i].data[k] = saved - step;
            const double minus = evaluate(inputs, false).first;
            inputs[i].data[k] = saved;
            record(result, i, k, analytic[i][k], (plus - minus) / (2.0 * step));
        }
    }
    return result;
}

GradCheckResult grad_check_parameters(const std::function<Var(Tape<double>&)>& graph,
                                      std::span<Parameter<double>* const> params,
                                      const std::vector<std::vector<std::size_t>>& indices,
                                      double step) {
    for (Parameter<double>* p : params) p->grad.clear();
    {
        Tape<double> tape(true);
        const Var out = graph(tape);
        scalar_of(tape, out);
        tape.backward(out);
    }
    auto forward = [&graph]() {
        Tape<double> tape(false);
        return scalar_of(tape, graph(tape));
    };

    GradCheckResult result;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter<double>& p = *params[i];
        std::vector<std::size_t> probe = i < indices.size() ? indices[i] : std::vector<std::size_t>{};
        if (probe.empty()) {
            probe.resize(p.value.size());
            for (std::size_t k = 0; k < probe.size(); ++k) probe[k] = k;
        }
        for (std::size_t k : probe) {
            const double saved = p.value.data[k];
            p.value.data[k] = saved + step;
            const double plus = forward();
            p.value.data[k] = saved - step;
            const double minus = forward();
            p.value.data[k] = saved;
            const double analytic = p.grad.empty() ? 0.0 : p.grad[k];
            record(result, i, k, analytic, (plus - minus) / (2.0 * step));
        }
    }
    return result;
}

}  // namespace polygonizer::tc
