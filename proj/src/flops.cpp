#include "m3d/flops.hpp"

#include <cmath>

#include "m3d/ssm.hpp"

namespace m3d {

namespace {

// fixed per-element costs for non-arithmetic ops
constexpr double RELU = 1, GELU = 8, SILU = 5, EXP = 4, SOFTPLUS = 6;
constexpr double DIV = 4, RSQRT = 8, CMP = 1;

double linear(double rows, double in, double out, bool bias = true) {
  return 2 * rows * in * out + (bias ? rows * out : 0);
}

double layernorm(double rows, double width) {
  // mean, variance, normalize, affine + one rsqrt per row
  return rows * (6 * width + RSQRT);
}

double pointnet(double L, double K, double C) {
  double n = L * K;
  return linear(n, 3, 128) + RELU * n * 128 +     //
         linear(n, 128, 256) + RELU * n * 256 +   //
         CMP * L * 256 * (K - 1) +                // max over K
         linear(n, 512, 256) + RELU * n * 256 +   //
         linear(n, 256, C) +                      //
         CMP * L * C * (K - 1);                   // final max
}

double pos_encode(double L, double C) {
  return linear(L, 3, 128) + GELU * L * 128 + linear(L, 128, C);
}

double lnp_layer(double L, double C, double k) {
  double T = L + 1;  // tokens incl. CLS
  double knorm = T * k * C +                  // residuals
                 (2 * T * k * C + T * RSQRT) +  // scalar variance + rsqrt
                 T * k * C +                  // scale by inv std
                 2 * T * k * 2 * C;           // gamma/beta over concat width
  double kpool = (EXP + 1 + DIV) * T * k * 2 * C +  // per-channel softmax
                 2 * T * k * 2 * C;                 // weighted sum
  return pos_encode(L, C) + T * C +     // E_pos add
         layernorm(T, C) + knorm + kpool +
         linear(T, 2 * C, C, false) +   // align
         T * C;                         // residual
}

double mamba_branch(double L, double C, double Ci, double n, double dc) {
  double T = L + 1;
  double scan = (EXP + 1) * T * Ci * n +  // discretized A per step
                3 * T * Ci * n +          // state update
                2 * T * Ci * n +          // readout
                2 * T * Ci;               // D skip
  return linear(T, C, 2 * Ci, false) +                     //
         2 * T * Ci * dc + T * Ci +                        // depthwise conv
         SILU * T * Ci +                                   //
         linear(T, Ci, Ci) + SOFTPLUS * T * Ci +           // delta
         2 * T * Ci * n + 2 * T * Ci * n +                 // B, C projections
         EXP * Ci * n +                                    // A = -exp(A_log)
         scan +                                            //
         SILU * T * Ci + T * Ci +                          // gate
         linear(T, Ci, C, false) +                         //
         T * C;                                            // residual
}

double head_flops(double L, double C, double n_classes) {
  return CMP * (L - 1) * C +                          // max over patch tokens
         linear(1, 2 * C, 256) + RELU * 256 +         //
         linear(1, 256, 256) + RELU * 256 +           //
         linear(1, 256, n_classes);
}

}  // namespace

FlopBreakdown model_flops(const EncoderConfig& cfg, std::size_t n_classes) {
  double L = double(cfg.L), C = double(cfg.C), T = double(cfg.T);
  double Ci = double(cfg.expand) * C;
  FlopBreakdown b;
  b.embedding = pointnet(L, double(cfg.K), C);
  b.lnp = T * lnp_layer(L, C, double(cfg.k));
  double branch = mamba_branch(L, C, Ci, double(cfg.d_state), double(cfg.d_conv));
  b.fwd_ssm = T * (layernorm(L + 1, C) + branch);
  b.rev_ssm = T * branch;  // channel flip itself is free
  b.head = head_flops(L, C, double(n_classes));
  return b;
}

double encoder_layer_flops(const EncoderConfig& cfg) {
  double L = double(cfg.L), C = double(cfg.C);
  double Ci = double(cfg.expand) * C;
  double branch = mamba_branch(L, C, Ci, double(cfg.d_state), double(cfg.d_conv));
  return lnp_layer(L, C, double(cfg.k)) + layernorm(L + 1, C) + 2 * branch;
}

AttnFlops attention_layer_flops(std::size_t Lp, std::size_t Cp) {
  double T = double(Lp) + 1, C = double(Cp);
  AttnFlops a;
  a.ln = layernorm(T, C);
  a.qkv = 3 * linear(T, C, C);
  a.scores = 2 * T * T * C + T * T;              // QK^T + scale
  a.softmax = (CMP + EXP + 1 + DIV) * T * T;     // rowwise stable softmax
  a.mix = 2 * T * T * C;
  a.out = linear(T, C, C) + T * C;               // projection + residual
  return a;
}

template <class T>
AttnParams<T> init_attention(std::size_t C, std::mt19937_64& rng) {
  AttnParams<T> p;
  p.ln_gamma = Tensor<T>::full({C}, T(1));
  p.ln_beta = Tensor<T>::zeros({C});
  for (LinearP<T>* l : {&p.q, &p.k, &p.v, &p.o}) {
    l->W = trunc_normal<T>({C, C}, T(0.02), rng);
    l->b = Tensor<T>::zeros({C});
  }
  return p;
}

template <class T>
Tensor<T> attention_forward(const Tensor<T>& x, const AttnParams<T>& p) {
  std::size_t C = x.size(1);
  auto h = layernorm(x, p.ln_gamma, p.ln_beta, T(1e-5));
  auto q = add(matmul(h, p.q.W), p.q.b);
  auto k = add(matmul(h, p.k.W), p.k.b);
  auto v = add(matmul(h, p.v.W), p.v.b);
  auto scores = mul_scalar(matmul(q, permute(k, {1, 0})), T(1) / std::sqrt(T(C)));
  auto mixed = matmul(softmax(scores, 1), v);
  return add(x, add(matmul(mixed, p.o.W), p.o.b));
}

#define M3D_INSTANTIATE_FLOPS(T)                                          \
  template AttnParams<T> init_attention<T>(std::size_t, std::mt19937_64&); \
  template Tensor<T> attention_forward<T>(const Tensor<T>&, const AttnParams<T>&);

M3D_INSTANTIATE_FLOPS(float)
M3D_INSTANTIATE_FLOPS(double)

}  // namespace m3d
