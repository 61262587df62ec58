#pragma once

// The two token mixers under study: quadratic self-attention and the
// linear-time Mamba-2-style recurrence, plus a brute-force unrolled
// reference for the recurrence (used only by tests).

#include "lindistill/tensor.hpp"

namespace lindistill {

struct AttentionParams {
    Tensor w_q, w_k, w_v; // d*d projections

    static AttentionParams init(int d, Rng& rng, double stddev = 0.02,
                                bool requires_grad = true);
    int dim() const { return w_q.rows(); }
};

struct Mamba2Params {
    Tensor w_q, w_k, w_v; // d*d projections
    Tensor w_delta;       // d*1 step-size projection
    Tensor alpha;         // scalar, unconstrained; decay = exp(-softplus(delta)*alpha)

    static Mamba2Params init(int d, Rng& rng, double stddev = 0.02,
                             bool requires_grad = true);
    int dim() const { return w_q.rows(); }
};

// y = softmax(q k^T / sqrt(d)) v with q,k,v = x W_Q, x W_K, x W_V.
// Single head, full (non-causal) attention. O(L^2 d) time, materializes an
// L*L score matrix.
Tensor attention_forward(const Tensor& x, const AttentionParams& p);

// Left-to-right recurrence over a d*d hidden state S (S_0 = 0):
//   delta_t = x_t W_delta,  g_t = exp(-softplus(delta_t) * alpha)
//   S_t = g_t S_{t-1} + v_t k_t^T,  y_t = S_t q_t
// O(L d^2) time; the state is O(d^2) regardless of L. Differentiable when
// recording; otherwise runs a tight-loop path whose transient memory beyond
// the output is O(d^2).
Tensor mamba2_scan(const Tensor& x, const Mamba2Params& p);

// Unrolled form y_t = sum_{i<=t} (prod_{j=i+1..t} g_j) (k_i . q_t) v_i,
// evaluated with explicit per-pair decay products and no code shared with
// the scan. O(L^3 d); test oracle only.
Tensor mamba2_unrolled_oracle(const Tensor& x, const Mamba2Params& p);

} // namespace lindistill
