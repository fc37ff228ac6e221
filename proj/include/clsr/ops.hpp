#pragma once

#include <cstdint>
#include <vector>

#include "clsr/tensor.hpp"

namespace clsr {

// The closed primitive set. Every model and loss composes from these; each op
// carries its own backward rule and is covered by the finite-difference sweep
// in the tests. relu is the only FFN nonlinearity (exact finite differences
// away from 0; subgradient at 0 taken as 0, same for abs).
//
//   add, sub, mul, add_bias, smul, sadd, abs_val, neg,
//   relu, sigmoid, log_, exp_,
//   softmax, log_softmax (trailing axis, temperature, max-subtraction),
//   layer_norm (trailing axis),
//   matmul (2-D), bmm (batched 3-D, optional transposed right factor),
//   transpose (2-D), reshape, split_heads/merge_heads (head movement),
//   embedding (row gather), gather_last (per-row index pick),
//   masked_fill, scale_rows,
//   sum, mean, sum_last.

// Large negative stand-in for -inf in pre-softmax masking; exp() underflows to
// exactly 0 without producing NaN when a whole row is masked.
inline constexpr double kMaskedScore = -1e30;

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// x[..., d] + bias[d] broadcast over the trailing axis.
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor smul(const Tensor& x, double c);
Tensor sadd(const Tensor& x, double c);
Tensor neg(const Tensor& x);
Tensor abs_val(const Tensor& x);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log_(const Tensor& x);
Tensor exp_(const Tensor& x);

// Softmax over the trailing axis of logits/temperature, stabilized by
// max-subtraction. temperature must be > 0.
Tensor softmax(const Tensor& x, double temperature = 1.0);
Tensor log_softmax(const Tensor& x, double temperature = 1.0);

// Per trailing-axis slice: gain * (x - mean)/sqrt(var + eps) + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// [m,k] x [k,n] -> [m,n]. Backward: dA = dC B^T, dB = A^T dC.
Tensor matmul(const Tensor& a, const Tensor& b);

// Batched [B,m,k] x [B,k,n] -> [B,m,n]; trans_b treats b as [B,n,k].
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b = false);

Tensor transpose(const Tensor& x);  // 2-D
Tensor reshape(const Tensor& x, Shape new_shape);

// [B*T, H*hd] -> [B*H, T, hd] and back; pure data movement.
Tensor split_heads(const Tensor& x, int64_t batch, int64_t time, int64_t heads);
Tensor merge_heads(const Tensor& x, int64_t batch, int64_t time, int64_t heads);

// table[V,d] gathered by ids -> [N,d]; backward scatter-adds into the table.
Tensor embedding(const Tensor& table, const std::vector<int>& ids);

// x[N,V] -> [N]; out[i] = x[i, ids[i]].
Tensor gather_last(const Tensor& x, const std::vector<int>& ids);

// Non-differentiable mask (1 = keep, 0 = fill). Gradient is zero at filled
// positions.
Tensor masked_fill(const Tensor& x, const std::vector<uint8_t>& keep, double fill_value);

// x[N,d] scaled per row by s[N].
Tensor scale_rows(const Tensor& x, const Tensor& s);

Tensor sum(const Tensor& x);   // -> scalar [1]
Tensor mean(const Tensor& x);  // -> scalar [1]
Tensor sum_last(const Tensor& x);  // [..., d] -> [...]

// Value-space helper (no graph): argmax over the trailing axis of row `row`.
int64_t argmax_row(const Tensor& x, int64_t row);

}  // namespace clsr
