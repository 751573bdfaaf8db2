#pragma once

#include <span>
#include <utility>

#include "polygonizer/tape.hpp"

// Differentiable primitives. Every op appends one node (plus slice nodes for
// multi-output ops) and accumulates input gradients additively on backward.
// Leading dimensions act as a batch: linear maps [..., in] -> [..., out],
// spatial ops take [B, C, H, W] or an unbatched [C, H, W].
namespace polygonizer::tc {

/// y = x W^T + b. `bias` may be an invalid Var for no bias.
template <typename T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias);

/// Rows of `table` [V, E] selected by `ids` -> [ids.size(), E].
template <typename T>
Var embedding(Tape<T>& tape, Var table, std::span<const int> ids);

template <typename T>
Var relu(Tape<T>& tape, Var x);
template <typename T>
Var tanh(Tape<T>& tape, Var x);
template <typename T>
Var sigmoid(Tape<T>& tape, Var x);

template <typename T>
Var add(Tape<T>& tape, Var a, Var b);
template <typename T>
Var scale(Tape<T>& tape, Var x, T factor);
template <typename T>
Var reshape(Tape<T>& tape, Var x, Shape shape);

/// Sum of all entries -> [1].
template <typename T>
Var sum(Tape<T>& tape, Var x);
/// sum(x * w) for a constant weight tensor of the same size -> [1].
template <typename T>
Var weighted_sum(Tape<T>& tape, Var x, const Tensor<T>& weights);

template <typename T>
Var concat(Tape<T>& tape, Var a, Var b, std::size_t axis);
/// x[..., begin:end, ...] along `axis`.
template <typename T>
Var slice(Tape<T>& tape, Var x, std::size_t axis, std::size_t begin, std::size_t end);

/// Direct cross-correlation. Kernel extents must be odd.
template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var weight, Var bias, std::size_t stride, std::size_t pad);
template <typename T>
Var max_pool2x2(Tape<T>& tape, Var input);
template <typename T>
Var upsample2x(Tape<T>& tape, Var input);

/// [B, C, H, W] -> [B, H*W, C]; one key row per spatial cell.
template <typename T>
Var spatial_to_sequence(Tape<T>& tape, Var input);

/// Gate order in the fused weights is i, f, g, o. Returns (h', c').
template <typename T>
std::pair<Var, Var> lstm_cell(Tape<T>& tape, Var x, Var h, Var c, Var w_ih, Var w_hh, Var bias);

/// Bahdanau scoring against keys already projected by W_k:
///   e_i = v . tanh(W_q h + K_i),  a = softmax(e),  context = sum_i a_i V_i.
/// h [B, dh], keys [B, N, da], values [B, N, df], w_q [da, dh], v [da].
/// Returns (context [B, df], weights [B, N]).
template <typename T>
std::pair<Var, Var> attention_projected(Tape<T>& tape, Var h, Var keys, Var values, Var w_q,
                                        Var v);

/// Full additive attention with key projection W_k [da, df] applied to F.
template <typename T>
std::pair<Var, Var> additive_attention(Tape<T>& tape, Var h, Var features, Var w_q, Var w_k,
                                       Var v);

/// sum_b weights[b] * -log softmax(logits[b])[targets[b]] -> [1], computed
/// with max subtraction. logits [B, V] or [V].
template <typename T>
Var softmax_nll(Tape<T>& tape, Var logits, std::span<const int> targets,
                std::span<const T> weights);

template <typename T>
Var softmax_nll(Tape<T>& tape, Var logits, int target);

}  // namespace polygonizer::tc
