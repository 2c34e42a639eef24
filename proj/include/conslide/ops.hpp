#pragma once

// Differentiable ops over Var. Every op checks shapes eagerly and throws
// DimensionError with both shapes; every output is checked for finiteness.
// There is no implicit broadcasting: batch dimensions must be equal, and
// bias or row expansion is spelled out with add_bias / expand_rows.

#include <cstddef>
#include <vector>

#include "conslide/tensor.hpp"

namespace conslide::ops {

/// a[..., p, q] x b[..., q, r] with identical leading dimensions.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
/// x[..., C] + bias[C]
Var add_bias(Var x, Var bias);
/// r[M, C] -> [M, n, C] with every row repeated n times.
Var expand_rows(Var r, std::size_t n);
Var relu(Var x);
/// Max-subtracted softmax over the last axis.
Var softmax_rows(Var x);
/// Per-row normalization over the last axis followed by gamma/beta.
Var layer_norm(Var x, Var gamma, Var beta, double eps);
/// Swaps the last two axes.
Var transpose(Var x);
Var reshape(Var x, Shape shape);
/// [B, S, H*d] -> [B*H, S, d]
Var split_heads(Var x, std::size_t heads);
/// [B*H, S, d] -> [B, S, H*d]
Var merge_heads(Var x, std::size_t heads);
/// Concatenation along axis 0.
Var concat_rows(Var a, Var b);
/// Rows [begin, end) along axis 0.
Var slice_rows(Var x, std::size_t begin, std::size_t end);
/// Sum of all elements, shape [1].
Var sum(Var x);
Var mean_axis(Var x, std::size_t axis);
/// Max over `axis`; gradient flows to the first argmax in each slice.
Var max_axis(Var x, std::size_t axis);
/// x[M, N, C] shifted along axis 1: out[:, j] = x[:, j + offset], zero outside.
Var shift_axis1(Var x, std::ptrdiff_t offset);
/// x / (||x|| + eps) per row of the last axis.
Var normalize_rows(Var x, double eps);
/// Negative log-softmax of logits[K] at `target`, restricted to `allowed`
/// classes (which must contain target).
Var cross_entropy(Var logits, std::size_t target, const std::vector<std::size_t>& allowed);

/// Bound projection weights of one multi-head self-attention layer. Weight
/// matrices are [C, C] in x*W orientation; biases are [C].
struct AttentionWeights {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};

struct AttentionResult {
  Var output;     // [B, S, C]
  Var attention;  // [B*H, S, S] softmax weights
};

/// Scaled dot-product attention per head (scale 1/sqrt(C/heads)), heads
/// concatenated and projected. x is [B, S, C] or [S, C]; no positions.
AttentionResult msa(Var x, const AttentionWeights& w, std::size_t heads);

}  // namespace conslide::ops
