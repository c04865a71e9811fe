#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "melon/ad/tensor.hpp"

// Differentiable primitives. Every op records its backward rule when grad
// mode is on. Image-like tensors are laid out [C, H, W] (one sample); token
// sequences are [L, D]; multi-head tensors are [H, L, d].
namespace melon::ad {

enum class Reduction { sum, mean };

// Elementwise binary ops with numpy-style broadcasting.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> neg(const Tensor<T>& a);

template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);
template <typename T> Tensor<T> sqrt(const Tensor<T>& a);
template <typename T> Tensor<T> sin(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> silu(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);

// Rank 2 x rank 2, rank 3 x rank 3 (same batch) or rank 3 x rank 2 (shared
// right operand). trans_* transposes the last two axes of that operand.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false);
// a [N, in] times w [out, in] transposed, one identical product per row, so a
// row's result never depends on the other rows or on its position.
template <typename T>
Tensor<T> matmul_rows(const Tensor<T>& a, const Tensor<T>& w);
// softmax(q k^T, allowed) v per head for q, k, v [H, L, dh] and a lower-triangular
// [L, L] key mask. Rows are processed in blocks that stop at the diagonal, so
// masked keys cost nothing. A row with no allowed key outputs zeros.
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::span<const std::uint8_t> allowed);
// Swaps the last two axes.
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, std::size_t begin, std::size_t end);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
template <typename T> Tensor<T> sum(const Tensor<T>& a, int axis, bool keepdim = false);
template <typename T> Tensor<T> mean(const Tensor<T>& a, int axis, bool keepdim = false);

template <typename T> Tensor<T> softmax(const Tensor<T>& a);
// Softmax over the last axis restricted to entries where `allowed` is
// nonzero. `allowed` has shape [rows, cols] of the trailing two axes and is
// broadcast over leading axes. Fully disallowed rows produce zeros.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& a, std::span<const std::uint8_t> allowed);

// Inverted dropout; identity when p == 0.
template <typename T> Tensor<T> dropout(const Tensor<T>& a, double p, std::uint64_t seed);

// x [Ci, H, W], w [Co, Ci, kh, kw], bias [Co] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding);
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride);
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride);
// Mean over the spatial axes of [C, H, W] -> [C].
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);
// Half-pixel-centre bilinear resampling of [C, H, W].
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w);

// table [V, D] -> [ids.size(), D]
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::size_t> ids);
// x [N, D] -> [idx.size(), D]
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> idx);
// src [n, D] -> [rows, D], row idx[i] receives src row i (summed on repeats).
template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& src, std::span<const std::size_t> idx, std::size_t rows);

// x / sqrt(mean(x^2) + eps) * gain over the last axis.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, double eps = 1e-6);
// x [C, H, W] normalised per channel group, then gain/bias per channel.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gain,
                     const Tensor<T>& bias, double eps = 1e-5);
// Rotates consecutive feature pairs of [L, d] or [H, L, d] by
// position * base^(-2j/d); position is the row index along L.
template <typename T> Tensor<T> rotary(const Tensor<T>& x, double base = 10000.0);

// Binary cross-entropy on probabilities. weight is empty or matches p.
template <typename T>
Tensor<T> binary_cross_entropy(const Tensor<T>& p, std::span<const T> target,
                               std::span<const T> weight = {},
                               Reduction red = Reduction::mean);
template <typename T>
Tensor<T> binary_cross_entropy_with_logits(const Tensor<T>& logits, std::span<const T> target,
                                           std::span<const T> weight = {},
                                           Reduction red = Reduction::mean);
template <typename T>
Tensor<T> mse(const Tensor<T>& pred, std::span<const T> target, Reduction red = Reduction::mean);

// Pair rotation used by `rotary`, exposed for direct checks.
void rotate_pairs(std::span<double> v, std::size_t position, double base = 10000.0);

}  // namespace melon::ad
