#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "m3d/pointcloud.hpp"
#include "m3d/ssm.hpp"
#include "m3d/tensor.hpp"

// Point cloud encoder: light-PointNet patch embedding, CLS token with
// learned positional encoding, then T stacked layers of local norm pooling
// (K-norm + K-pooling) and a bidirectional SSM with channel flip.

namespace m3d {

enum class SsmVariant { bi_ssm, one_ssm, token_flip, tri_ssm };
enum class PoolKind { k_pool, max, avg, max_avg };

SsmVariant parse_variant(const std::string& s);  // throws ValidationError
PoolKind parse_pooling(const std::string& s);
std::string to_string(SsmVariant v);
std::string to_string(PoolKind p);

struct EncoderConfig {
  std::size_t T = 12;    // layers
  std::size_t C = 384;   // token width
  std::size_t k = 4;     // LNP neighborhood (self-inclusive)
  std::size_t L = 64;    // patches
  std::size_t K = 32;    // points per patch
  std::size_t N = 1024;  // input points
  std::size_t d_state = 16, d_conv = 4, expand = 2;
  SsmVariant variant = SsmVariant::bi_ssm;
  PoolKind pooling = PoolKind::k_pool;
  bool knorm_per_channel = false;  // per-channel variance instead of scalar
  double head_dropout = 0.1;

  void validate() const;  // throws ValidationError
};

// Token 0 is CLS and carries no center coordinate. nbr caches the LNP
// neighbor graph ((L+1)*k token indices, row 0 = k copies of 0); it is
// computed once per forward since centers never change across layers.
template <class T>
struct TokenSeq {
  Tensor<T> tokens;  // (L+1) x C
  std::vector<Point3> centers;
  std::vector<std::size_t> nbr;
  std::size_t layer = 0;
};

template <class T>
struct LinearP {
  Tensor<T> W;  // in x out
  Tensor<T> b;  // out
};

template <class T>
struct PointNetParams {
  LinearP<T> l1;  // 3 -> 128
  LinearP<T> l2;  // 128 -> 256
  LinearP<T> l3;  // 512 -> 256
  LinearP<T> l4;  // 256 -> C
};

template <class T>
struct PosEncParams {
  LinearP<T> l1;      // 3 -> 128
  LinearP<T> l2;      // 128 -> C
  Tensor<T> cls_pos;  // C
};

template <class T>
struct KNormParams {
  Tensor<T> gamma;  // 2C
  Tensor<T> beta;   // 2C
  Tensor<T> align;  // 2C x C, bias-free (beta already shifts the pool input)
  T eps = T(1e-5);
};

template <class T>
struct LnpParams {
  Tensor<T> ln_gamma, ln_beta;  // C
  KNormParams<T> knorm;
};

// rev is the channel-flip branch (also reused as the token-flip branch under
// that variant); tok only exists under tri_ssm.
template <class T>
struct BiSsmParams {
  Tensor<T> ln_gamma, ln_beta;  // C
  MambaBlockParams<T> fwd;
  std::optional<MambaBlockParams<T>> rev;
  std::optional<MambaBlockParams<T>> tok;
};

template <class T>
struct LayerParams {
  LnpParams<T> lnp;
  BiSsmParams<T> ssm;
};

template <class T>
struct EncoderParams {
  PointNetParams<T> embed;
  Tensor<T> cls_token;  // C
  PosEncParams<T> pos;
  std::vector<LayerParams<T>> layers;
};

template <class T>
struct HeadParams {
  LinearP<T> l1;  // feature width (2C for classification) -> 256
  LinearP<T> l2;  // 256 -> 256
  LinearP<T> l3;  // 256 -> n_classes
};

// Per-point MLP 3->128->256, max-pool over the K points, concat pooled with
// per-point features, 512->256->C, final max-pool. Patches are L x K x 3.
template <class T>
Tensor<T> light_pointnet_embed(const Tensor<T>& patches, const PointNetParams<T>& p);

// Positional features per token: row 0 = cls_pos, rows 1..L = MLP(center).
template <class T>
Tensor<T> pos_encode(const std::vector<Point3>& centers, const PosEncParams<T>& p);

// Prepend CLS and add positional encoding to every token.
template <class T>
TokenSeq<T> assemble_tokens(const Tensor<T>& embeddings,
                            const std::vector<Point3>& centers,
                            const PosEncParams<T>& pos, const Tensor<T>& cls_token);

// k nearest token indices per token by center coordinates (self-inclusive);
// CLS maps to k copies of itself.
std::vector<std::size_t> token_graph(const std::vector<Point3>& centers,
                                     std::size_t k);

// Gather each token's k neighbors, standardize the residuals against the
// center token (scalar variance over the k*C residual entries, or per
// channel), concat the repeated center feature and apply gamma/beta.
// Output (L+1) x k x 2C.
template <class T>
Tensor<T> k_norm(const Tensor<T>& tokens, const std::vector<std::size_t>& nbr,
                 const KNormParams<T>& p, std::size_t k, bool per_channel = false);
template <class T>
Tensor<T> k_norm(const Tensor<T>& tokens, const std::vector<Point3>& centers,
                 const KNormParams<T>& p, std::size_t k, bool per_channel = false);

// Aggregate over the k axis. k_pool weights each entry by a per-channel
// softmax over the neighborhood; max_avg sums elementwise max and mean.
template <class T>
Tensor<T> k_pooling(const Tensor<T>& propagated, PoolKind kind = PoolKind::k_pool);

// z' = align(k_pooling(k_norm(LN(z + E_pos)))) + z
template <class T>
TokenSeq<T> lnp_block(TokenSeq<T> z, const LnpParams<T>& p,
                      const PosEncParams<T>& pos, const EncoderConfig& cfg);

// Reverse the feature channels of every token; involutive.
template <class T>
Tensor<T> channel_flip(const Tensor<T>& F);

// out = F + fwd(LN(F)) + unflip(rev(flip(LN(F)))) with the flip axis set by
// the variant; one_ssm drops the second branch, tri_ssm adds a third.
template <class T>
TokenSeq<T> bi_ssm_block(TokenSeq<T> F, const BiSsmParams<T>& p, SsmVariant variant);

// group_patches -> embed -> assemble -> T x (lnp_block -> bi_ssm_block).
// Returns the final CLS feature (C) and the full token sequence.
template <class T>
std::pair<Tensor<T>, TokenSeq<T>> encoder_forward(const PointCloud& cloud,
                                                  const EncoderConfig& cfg,
                                                  EncoderParams<T>& params);

// Same pipeline starting from pre-grouped patches; the patch count may differ
// from cfg.L (masked pretraining feeds the visible subset) but must be >= k.
template <class T>
std::pair<Tensor<T>, TokenSeq<T>> encoder_forward(const PatchSet& ps,
                                                  const EncoderConfig& cfg,
                                                  EncoderParams<T>& params);

// Classification feature (2C): final CLS concat elementwise max over the
// patch tokens. The token scan is causal and the LNP graph maps CLS to
// itself, so the front CLS alone is input-independent; the max-pooled half
// carries the sequence.
template <class T>
Tensor<T> classifier_feature(const TokenSeq<T>& seq);

// feature -> 256 -> 256 -> n_classes with dropout after each hidden activation.
template <class T>
Tensor<T> classification_head(const Tensor<T>& feature, const HeadParams<T>& p,
                              T dropout_rate, std::mt19937_64& rng, bool training);

template <class T>
EncoderParams<T> init_encoder(const EncoderConfig& cfg, std::mt19937_64& rng);

// in_dim is the head input width: 2*C when fed by classifier_feature.
template <class T>
HeadParams<T> init_head(std::size_t in_dim, std::size_t n_classes, std::mt19937_64& rng);

template <class T>
using ParamVisitor = std::function<void(const std::string&, Tensor<T>&)>;

template <class T>
void visit_params(LinearP<T>& p, const std::string& prefix, const ParamVisitor<T>& fn);
template <class T>
void visit_params(KNormParams<T>& p, const std::string& prefix, const ParamVisitor<T>& fn);
template <class T>
void visit_params(LnpParams<T>& p, const std::string& prefix, const ParamVisitor<T>& fn);
template <class T>
void visit_params(BiSsmParams<T>& p, const std::string& prefix, const ParamVisitor<T>& fn);
template <class T>
void visit_params(EncoderParams<T>& p, const std::string& prefix, const ParamVisitor<T>& fn);
template <class T>
void visit_params(HeadParams<T>& p, const std::string& prefix, const ParamVisitor<T>& fn);

}  // namespace m3d
