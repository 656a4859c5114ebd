#pragma once

#include <cstddef>
#include <random>

#include "m3d/encoder.hpp"
#include "m3d/tensor.hpp"

// Analytic FLOP counts (multiply and add counted separately, fixed per-op
// costs for transcendentals) so the complexity claims are machine-independent
// and exact. All counts are integer-valued doubles; neighbor-graph index math
// is not model arithmetic and is not counted.

namespace m3d {

struct FlopBreakdown {
  double embedding = 0;
  double lnp = 0;      // all T layers
  double fwd_ssm = 0;  // token-forward branches, incl. pre-branch layernorm
  double rev_ssm = 0;  // channel-flipped branches
  double head = 0;     // classifier feature + MLP
  double total() const { return embedding + lnp + fwd_ssm + rev_ssm + head; }
};

struct AttnFlops {
  double ln = 0, qkv = 0, scores = 0, softmax = 0, mix = 0, out = 0;
  double total() const { return ln + qkv + scores + softmax + mix + out; }
};

// Full model at cfg's dimensions (head over n_classes logits).
FlopBreakdown model_flops(const EncoderConfig& cfg, std::size_t n_classes);

// One LNP + bi-SSM encoder layer; affine in L by construction.
double encoder_layer_flops(const EncoderConfig& cfg);

// Reference single-head self-attention layer of width C over L+1 tokens
// (layernorm, QKV, scores, softmax, mix, output projection, residual).
AttnFlops attention_layer_flops(std::size_t L, std::size_t C);

// Runtime counterpart of attention_layer_flops, built from tensor ops so the
// quadratic baseline is measurable without external frameworks.
template <class T>
struct AttnParams {
  Tensor<T> ln_gamma, ln_beta;    // C
  LinearP<T> q, k, v, o;          // C -> C
};

template <class T>
AttnParams<T> init_attention(std::size_t C, std::mt19937_64& rng);

template <class T>
Tensor<T> attention_forward(const Tensor<T>& x, const AttnParams<T>& p);

}  // namespace m3d
