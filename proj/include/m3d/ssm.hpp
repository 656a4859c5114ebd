#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "m3d/tensor.hpp"

// State-space scan engine: diagonal LTI recurrence and its convolutional
// form (test oracles, plain vectors), plus the differentiable selective scan
// and the gated block built around it.

namespace m3d {

// Diagonal discrete LTI system, scalar input/output channel.
template <class T>
struct LTIParams {
  std::vector<T> A_bar;  // d_state diagonal entries
  std::vector<T> B_bar;  // d_state
  std::vector<T> C_bar;  // d_state
};

// h_t = A_bar h_{t-1} + B_bar x_t, y_t = <C_bar, h_t>, h_0 = 0.
template <class T>
std::vector<T> lti_scan_recurrent(const std::vector<T>& x, const LTIParams<T>& p);

// Same map evaluated as a causal convolution with kernel
// K_j = <C_bar, A_bar^j B_bar>.
template <class T>
std::vector<T> lti_scan_conv(const std::vector<T>& x, const LTIParams<T>& p);

// Zero-order hold for the state, Euler step for the control:
// A_bar[t,c,n] = exp(delta[t,c] * -exp(A_log[c,n])), B_scale = delta.
// Plain-value helper for tests; the training path fuses this into the scan.
template <class T>
struct Discretized {
  Tensor<T> A_bar;    // Lambda x C_inner x d_state
  Tensor<T> B_scale;  // Lambda x C_inner (the factor multiplying B)
};
template <class T>
Discretized<T> discretize(const Tensor<T>& A_log, const Tensor<T>& delta);

// Selection parameters for one scan direction.
template <class T>
struct SSMParams {
  Tensor<T> A_log;       // C_inner x d_state, A = -exp(A_log)
  Tensor<T> W_B;         // C_inner x d_state
  Tensor<T> W_C;         // C_inner x d_state
  Tensor<T> W_delta;     // C_inner x C_inner
  Tensor<T> delta_bias;  // C_inner
  Tensor<T> D;           // C_inner skip
};

// Fused scan core. Projections stay outside (composed from tensor ops) so the
// tape covers them; this op handles the sequential recurrence with a
// hand-derived adjoint.
//   h[t,c,n] = exp(delta[t,c] A[c,n]) h[t-1,c,n] + delta[t,c] B[t,n] x[t,c]
//   y[t,c]   = sum_n Cp[t,n] h[t,c,n] + D[c] x[t,c]
template <class T>
Tensor<T> selective_scan_core(const Tensor<T>& x, const Tensor<T>& delta,
                              const Tensor<T>& A, const Tensor<T>& B,
                              const Tensor<T>& Cp, const Tensor<T>& D);

// Full Eq.-style selective scan: per-position B, C, delta projected from x.
template <class T>
Tensor<T> selective_scan(const Tensor<T>& x, const SSMParams<T>& p);

template <class T>
struct MambaBlockParams {
  std::size_t C = 0, C_inner = 0, d_state = 0, d_conv = 0;
  Tensor<T> W_in;    // C x 2*C_inner, no bias
  Tensor<T> conv_w;  // C_inner x d_conv
  Tensor<T> conv_b;  // C_inner
  SSMParams<T> ssm;
  Tensor<T> W_out;  // C_inner x C, no bias
};

// in_proj -> (main, gate); main -> causal depthwise conv -> SiLU ->
// selective scan; out = out_proj(scan * SiLU(gate)).
template <class T>
Tensor<T> mamba_block(const Tensor<T>& x, const MambaBlockParams<T>& p);

// Truncated normal (+/- 2 sigma resampling), the projection init everywhere.
template <class T>
Tensor<T> trunc_normal(Shape shape, T sigma, std::mt19937_64& rng);

template <class T>
MambaBlockParams<T> init_mamba_block(std::size_t C, std::size_t d_state,
                                     std::size_t d_conv, std::size_t expand,
                                     std::mt19937_64& rng);

// Visits every trainable tensor with a stable name, for optimizers and
// checkpoints.
template <class T>
void visit_params(SSMParams<T>& p, const std::string& prefix,
                  const std::function<void(const std::string&, Tensor<T>&)>& fn);
template <class T>
void visit_params(MambaBlockParams<T>& p, const std::string& prefix,
                  const std::function<void(const std::string&, Tensor<T>&)>& fn);

}  // namespace m3d
