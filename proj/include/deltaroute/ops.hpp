#pragma once

// Differentiable operations over BasicTensor. All of them are pure: inputs are
// never modified, outputs are fresh nodes. Binary elementwise operations accept
// a right operand whose shape equals the left operand's shape or a trailing
// suffix of it (broadcast over leading axes only).

#include <cstdint>
#include <span>

#include "deltaroute/tensor.hpp"

namespace deltaroute {

/// a[..., m, k] x b[k, n] -> [..., m, n]
template <typename Scalar>
BasicTensor<Scalar> matmul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b);

template <typename Scalar>
BasicTensor<Scalar> add(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b);
template <typename Scalar>
BasicTensor<Scalar> sub(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b);
template <typename Scalar>
BasicTensor<Scalar> mul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b);
template <typename Scalar>
BasicTensor<Scalar> scale(const BasicTensor<Scalar>& a, Scalar factor);

template <typename Scalar>
BasicTensor<Scalar> silu(const BasicTensor<Scalar>& x);
template <typename Scalar>
BasicTensor<Scalar> exp(const BasicTensor<Scalar>& x);
template <typename Scalar>
BasicTensor<Scalar> log(const BasicTensor<Scalar>& x);

/// Max-subtracted softmax along `axis`. Throws NumericError on NaN input.
template <typename Scalar>
BasicTensor<Scalar> softmax(const BasicTensor<Scalar>& x, std::size_t axis);

/// y = x / sqrt(mean(x^2) + eps) * gain over the last axis.
template <typename Scalar>
BasicTensor<Scalar> rmsnorm(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& gain,
                            Scalar eps);

/// Stacks equally shaped tensors along a new leading axis.
template <typename Scalar>
BasicTensor<Scalar> stack(std::span<const BasicTensor<Scalar>> tensors);

/// Transpose of a rank-2 tensor.
template <typename Scalar>
BasicTensor<Scalar> transpose(const BasicTensor<Scalar>& x);

template <typename Scalar>
BasicTensor<Scalar> reshape(const BasicTensor<Scalar>& x, Shape shape);

template <typename Scalar>
BasicTensor<Scalar> sum(const BasicTensor<Scalar>& x);
template <typename Scalar>
BasicTensor<Scalar> mean(const BasicTensor<Scalar>& x);

/// Mean negative log-likelihood of `targets` under logits[..., V].
template <typename Scalar>
BasicTensor<Scalar> cross_entropy(const BasicTensor<Scalar>& logits,
                                  std::span<const std::int32_t> targets);

/// Row gather from table[V, d]; output shape is ids_shape + [d].
template <typename Scalar>
BasicTensor<Scalar> embedding(const BasicTensor<Scalar>& table,
                              std::span<const std::int32_t> ids, const Shape& ids_shape);

/// Causal multi-head attention over q, k, v of shape [B, T, d]; heads are
/// contiguous column groups of width d / n_heads. Scores are scaled by
/// 1/sqrt(d / n_heads).
template <typename Scalar>
BasicTensor<Scalar> causal_attention(const BasicTensor<Scalar>& q, const BasicTensor<Scalar>& k,
                                     const BasicTensor<Scalar>& v, std::size_t n_heads);

/// Rotary position encoding on [B, T, d], rotating (i, i + hd/2) pairs within
/// each head by angle t * theta^(-2i / hd).
template <typename Scalar>
BasicTensor<Scalar> rotary(const BasicTensor<Scalar>& x, std::size_t n_heads, double theta);

/// Contracts the leading axis: alpha[N, R...] and values[N, R..., d] give
/// out[R..., d] = sum_n alpha[n, r] * values[n, r, :].
template <typename Scalar>
BasicTensor<Scalar> weighted_sum(const BasicTensor<Scalar>& alpha,
                                 const BasicTensor<Scalar>& values);

/// Softmax attention over depth, fused. For each position r:
///   logit[n, r] = query . (gain * x_n[r] / rms(x_n[r]))
///   weights[:, r] = softmax_n(logit[:, r])
///   mixed[r] = sum_n weights[n, r] * x_n[r]
/// All sources share one shape [R..., d]. `mixed` is differentiable with
/// respect to the sources, query and gain; `weights` [N, R...] is a plain
/// record of the distribution and carries no gradient.
template <typename Scalar>
std::pair<BasicTensor<Scalar>, BasicTensor<Scalar>> depth_mix(
    std::span<const BasicTensor<Scalar>> sources, const BasicTensor<Scalar>& query,
    const BasicTensor<Scalar>& gain, Scalar eps);

}  // namespace deltaroute
