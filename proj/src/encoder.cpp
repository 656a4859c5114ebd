#include "m3d/encoder.hpp"

#include <cmath>

#include "m3d/error.hpp"

namespace m3d {

SsmVariant parse_variant(const std::string& s) {
  if (s == "bi_ssm") return SsmVariant::bi_ssm;
  if (s == "one_ssm") return SsmVariant::one_ssm;
  if (s == "token_flip") return SsmVariant::token_flip;
  if (s == "tri_ssm") return SsmVariant::tri_ssm;
  throw ValidationError("unknown ssm variant: " + s);
}

PoolKind parse_pooling(const std::string& s) {
  if (s == "k_pool") return PoolKind::k_pool;
  if (s == "max") return PoolKind::max;
  if (s == "avg") return PoolKind::avg;
  if (s == "max_avg") return PoolKind::max_avg;
  throw ValidationError("unknown pooling: " + s);
}

std::string to_string(SsmVariant v) {
  switch (v) {
    case SsmVariant::bi_ssm: return "bi_ssm";
    case SsmVariant::one_ssm: return "one_ssm";
    case SsmVariant::token_flip: return "token_flip";
    default: return "tri_ssm";
  }
}

std::string to_string(PoolKind p) {
  switch (p) {
    case PoolKind::k_pool: return "k_pool";
    case PoolKind::max: return "max";
    case PoolKind::avg: return "avg";
    default: return "max_avg";
  }
}

void EncoderConfig::validate() const {
  if (T < 1) throw ValidationError("encoder: T must be >= 1");
  if (C < 2 || C % 2 != 0) throw ValidationError("encoder: C must be even and >= 2");
  if (k < 1 || k > L) throw ValidationError("encoder: need 1 <= k <= L");
  if (L < 1 || K < 1) throw ValidationError("encoder: L and K must be >= 1");
  if (N < L) throw ValidationError("encoder: need N >= L input points");
  if (d_state < 1 || d_conv < 1 || expand < 1)
    throw ValidationError("encoder: ssm dims must be >= 1");
  if (head_dropout < 0.0 || head_dropout >= 1.0)
    throw ValidationError("encoder: head_dropout must lie in [0, 1)");
}

namespace {

template <class T>
Tensor<T> linear(const Tensor<T>& x, const LinearP<T>& p) {
  return add(matmul(x, p.W), p.b);
}

// indices 0..n-1 each repeated `times` consecutively
std::vector<std::size_t> repeat_index(std::size_t n, std::size_t times) {
  std::vector<std::size_t> idx(n * times);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < times; ++j) idx[i * times + j] = i;
  return idx;
}

}  // namespace

template <class T>
Tensor<T> light_pointnet_embed(const Tensor<T>& patches, const PointNetParams<T>& p) {
  if (patches.ndim() != 3 || patches.size(2) != 3)
    throw ValidationError("light_pointnet_embed: patches must be L x K x 3");
  std::size_t L = patches.size(0), K = patches.size(1);
  std::size_t C = p.l4.W.size(1);

  auto flat = reshape(patches, {L * K, 3});
  auto h1 = relu(linear(flat, p.l1));  // LK x 128
  auto h2 = relu(linear(h1, p.l2));    // LK x 256
  auto pooled = reduce_max(reshape(h2, {L, K, p.l2.W.size(1)}), 1);  // L x 256
  auto expanded = gather(pooled, repeat_index(L, K), 0);             // LK x 256
  auto cat = concat(h2, expanded, 1);                                // LK x 512
  auto h3 = relu(linear(cat, p.l3));
  auto h4 = linear(h3, p.l4);  // LK x C
  return reduce_max(reshape(h4, {L, K, C}), 1);
}

template <class T>
Tensor<T> pos_encode(const std::vector<Point3>& centers, const PosEncParams<T>& p) {
  std::size_t C = p.cls_pos.size(0);
  auto cls = reshape(p.cls_pos, {1, C});
  if (centers.empty()) return cls;
  auto X = points_to_tensor<T>(centers, {centers.size(), 3});
  auto body = linear(gelu(linear(X, p.l1)), p.l2);  // L x C
  return concat(cls, body, 0);
}

template <class T>
TokenSeq<T> assemble_tokens(const Tensor<T>& embeddings,
                            const std::vector<Point3>& centers,
                            const PosEncParams<T>& pos, const Tensor<T>& cls_token) {
  if (embeddings.ndim() != 2 || embeddings.size(0) != centers.size())
    throw ValidationError("assemble_tokens: embeddings must be L x C with one center per row");
  std::size_t C = embeddings.size(1);
  TokenSeq<T> seq;
  seq.centers = centers;
  auto with_cls = concat(reshape(cls_token, {1, C}), embeddings, 0);
  seq.tokens = add(with_cls, pos_encode(centers, pos));
  return seq;
}

std::vector<std::size_t> token_graph(const std::vector<Point3>& centers, std::size_t k) {
  if (k < 1 || k > centers.size())
    throw ValidationError("token_graph: need 1 <= k <= L");
  PointCloud cloud;
  cloud.pts = centers;
  auto raw = knn(cloud, centers, k);  // L*k indices into centers
  std::vector<std::size_t> nbr((centers.size() + 1) * k, 0);  // CLS row stays 0
  for (std::size_t i = 0; i < raw.size(); ++i) nbr[k + i] = raw[i] + 1;
  return nbr;
}

template <class T>
Tensor<T> k_norm(const Tensor<T>& tokens, const std::vector<std::size_t>& nbr,
                 const KNormParams<T>& p, std::size_t k, bool per_channel) {
  std::size_t L1 = tokens.size(0), C = tokens.size(1);
  if (nbr.size() != L1 * k)
    throw ValidationError("k_norm: neighbor list must have (L+1)*k entries");

  auto gathered = gather(tokens, nbr, 0);                     // L1*k x C
  auto center = gather(tokens, repeat_index(L1, k), 0);       // L1*k x C
  auto resid = reshape(sub(gathered, center), {L1, k, C});

  Tensor<T> normalized;
  if (per_channel) {
    auto var = reduce_var(resid, 1);  // L1 x C
    auto inv = recip(sqrt(add_scalar(var, p.eps)));
    auto swapped = permute(resid, {0, 2, 1});  // L1 x C x k
    normalized = permute(mul_prefix(swapped, inv), {0, 2, 1});
  } else {
    auto var = reduce_var(reshape(resid, {L1, k * C}), 1);  // L1
    auto inv = recip(sqrt(add_scalar(var, p.eps)));
    normalized = mul_prefix(resid, inv);
  }

  auto cat = concat(normalized, reshape(center, {L1, k, C}), 2);  // L1 x k x 2C
  return add(mul(cat, p.gamma), p.beta);
}

template <class T>
Tensor<T> k_norm(const Tensor<T>& tokens, const std::vector<Point3>& centers,
                 const KNormParams<T>& p, std::size_t k, bool per_channel) {
  if (tokens.size(0) != centers.size() + 1)
    throw ValidationError("k_norm: tokens must be (L+1) x C over L centers");
  return k_norm(tokens, token_graph(centers, k), p, k, per_channel);
}

template <class T>
Tensor<T> k_pooling(const Tensor<T>& propagated, PoolKind kind) {
  if (propagated.ndim() != 3)
    throw ValidationError("k_pooling: input must be tokens x k x channels");
  switch (kind) {
    case PoolKind::k_pool: {
      auto w = softmax(propagated, 1);
      return reduce_sum(mul(w, propagated), 1);
    }
    case PoolKind::max:
      return reduce_max(propagated, 1);
    case PoolKind::avg:
      return reduce_mean(propagated, 1);
    default:
      return add(reduce_max(propagated, 1), reduce_mean(propagated, 1));
  }
}

template <class T>
TokenSeq<T> lnp_block(TokenSeq<T> z, const LnpParams<T>& p,
                      const PosEncParams<T>& pos, const EncoderConfig& cfg) {
  if (z.nbr.empty()) z.nbr = token_graph(z.centers, cfg.k);
  auto shifted = add(z.tokens, pos_encode(z.centers, pos));
  auto normed = layernorm(shifted, p.ln_gamma, p.ln_beta, T(1e-5));
  auto propagated = k_norm(normed, z.nbr, p.knorm, cfg.k, cfg.knorm_per_channel);
  auto pooled = k_pooling(propagated, cfg.pooling);
  z.tokens = add(matmul(pooled, p.knorm.align), z.tokens);
  return z;
}

template <class T>
Tensor<T> channel_flip(const Tensor<T>& F) {
  return flip(F, F.ndim() - 1);
}

template <class T>
TokenSeq<T> bi_ssm_block(TokenSeq<T> F, const BiSsmParams<T>& p, SsmVariant variant) {
  auto normed = layernorm(F.tokens, p.ln_gamma, p.ln_beta, T(1e-5));
  auto out = add(F.tokens, mamba_block(normed, p.fwd));
  if (variant != SsmVariant::one_ssm) {
    if (!p.rev) throw ValidationError("bi_ssm_block: variant needs the second branch params");
    std::size_t axis = variant == SsmVariant::token_flip ? 0 : 1;
    out = add(out, flip(mamba_block(flip(normed, axis), *p.rev), axis));
  }
  if (variant == SsmVariant::tri_ssm) {
    if (!p.tok) throw ValidationError("bi_ssm_block: tri_ssm needs the token branch params");
    out = add(out, flip(mamba_block(flip(normed, 0), *p.tok), 0));
  }
  F.tokens = std::move(out);
  return F;
}

template <class T>
std::pair<Tensor<T>, TokenSeq<T>> encoder_forward(const PointCloud& cloud,
                                                  const EncoderConfig& cfg,
                                                  EncoderParams<T>& params) {
  cfg.validate();
  if (cloud.size() < cfg.L)
    throw ValidationError("encoder_forward: cloud smaller than patch count");
  if (params.layers.size() != cfg.T)
    throw ValidationError("encoder_forward: layer params do not match config T");

  return encoder_forward(group_patches(cloud, cfg.L, cfg.K), cfg, params);
}

template <class T>
std::pair<Tensor<T>, TokenSeq<T>> encoder_forward(const PatchSet& ps,
                                                  const EncoderConfig& cfg,
                                                  EncoderParams<T>& params) {
  cfg.validate();
  if (ps.L == 0 || ps.K == 0 || ps.centers.size() != ps.L ||
      ps.groups.size() != ps.L * ps.K)
    throw ValidationError("encoder_forward: malformed patch set");
  if (ps.L < cfg.k)
    throw ValidationError("encoder_forward: fewer patches than neighborhood size k");
  if (params.layers.size() != cfg.T)
    throw ValidationError("encoder_forward: layer params do not match config T");

  auto patches = points_to_tensor<T>(ps.groups, {ps.L, ps.K, 3});
  auto emb = light_pointnet_embed(patches, params.embed);
  auto seq = assemble_tokens(emb, ps.centers, params.pos, params.cls_token);
  seq.nbr = token_graph(seq.centers, cfg.k);
  for (std::size_t t = 0; t < cfg.T; ++t) {
    seq = lnp_block(std::move(seq), params.layers[t].lnp, params.pos, cfg);
    seq = bi_ssm_block(std::move(seq), params.layers[t].ssm, cfg.variant);
    seq.layer = t + 1;
  }
  auto cls = reshape(gather(seq.tokens, {0}, 0), {cfg.C});
  return {cls, std::move(seq)};
}

template <class T>
Tensor<T> classifier_feature(const TokenSeq<T>& seq) {
  std::size_t rows = seq.tokens.size(0), C = seq.tokens.size(1);
  if (rows < 2)
    throw ValidationError("classifier_feature: sequence has no patch tokens");
  std::vector<std::size_t> body(rows - 1);
  for (std::size_t i = 0; i < body.size(); ++i) body[i] = i + 1;
  auto cls = reshape(gather(seq.tokens, {0}, 0), {C});
  auto pooled = reduce_max(gather(seq.tokens, body, 0), 0);
  return concat(cls, pooled, 0);
}

template <class T>
Tensor<T> classification_head(const Tensor<T>& feature, const HeadParams<T>& p,
                              T dropout_rate, std::mt19937_64& rng, bool training) {
  std::size_t C = feature.size(0);
  auto x = reshape(feature, {1, C});
  auto h1 = dropout(relu(linear(x, p.l1)), dropout_rate, rng, training);
  auto h2 = dropout(relu(linear(h1, p.l2)), dropout_rate, rng, training);
  auto logits = linear(h2, p.l3);
  return reshape(logits, {p.l3.W.size(1)});
}

namespace {

template <class T>
LinearP<T> init_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  return {trunc_normal<T>({in, out}, T(0.02), rng), Tensor<T>::zeros({out})};
}

template <class T>
KNormParams<T> init_knorm(std::size_t C, std::mt19937_64& rng) {
  KNormParams<T> p;
  p.gamma = Tensor<T>::full({2 * C}, T(1));
  p.beta = Tensor<T>::zeros({2 * C});
  p.align = trunc_normal<T>({2 * C, C}, T(0.02), rng);
  return p;
}

}  // namespace

template <class T>
EncoderParams<T> init_encoder(const EncoderConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  EncoderParams<T> p;
  p.embed.l1 = init_linear<T>(3, 128, rng);
  p.embed.l2 = init_linear<T>(128, 256, rng);
  p.embed.l3 = init_linear<T>(512, 256, rng);
  p.embed.l4 = init_linear<T>(256, cfg.C, rng);
  p.cls_token = trunc_normal<T>({cfg.C}, T(0.02), rng);
  p.pos.l1 = init_linear<T>(3, 128, rng);
  p.pos.l2 = init_linear<T>(128, cfg.C, rng);
  p.pos.cls_pos = trunc_normal<T>({cfg.C}, T(0.02), rng);
  p.layers.resize(cfg.T);
  for (auto& layer : p.layers) {
    layer.lnp.ln_gamma = Tensor<T>::full({cfg.C}, T(1));
    layer.lnp.ln_beta = Tensor<T>::zeros({cfg.C});
    layer.lnp.knorm = init_knorm<T>(cfg.C, rng);
    layer.ssm.ln_gamma = Tensor<T>::full({cfg.C}, T(1));
    layer.ssm.ln_beta = Tensor<T>::zeros({cfg.C});
    layer.ssm.fwd = init_mamba_block<T>(cfg.C, cfg.d_state, cfg.d_conv, cfg.expand, rng);
    if (cfg.variant != SsmVariant::one_ssm)
      layer.ssm.rev = init_mamba_block<T>(cfg.C, cfg.d_state, cfg.d_conv, cfg.expand, rng);
    if (cfg.variant == SsmVariant::tri_ssm)
      layer.ssm.tok = init_mamba_block<T>(cfg.C, cfg.d_state, cfg.d_conv, cfg.expand, rng);
  }
  return p;
}

template <class T>
HeadParams<T> init_head(std::size_t C, std::size_t n_classes, std::mt19937_64& rng) {
  HeadParams<T> p;
  p.l1 = init_linear<T>(C, 256, rng);
  p.l2 = init_linear<T>(256, 256, rng);
  p.l3 = init_linear<T>(256, n_classes, rng);
  return p;
}

template <class T>
void visit_params(LinearP<T>& p, const std::string& prefix, const ParamVisitor<T>& fn) {
  fn(prefix + ".W", p.W);
  fn(prefix + ".b", p.b);
}

template <class T>
void visit_params(KNormParams<T>& p, const std::string& prefix, const ParamVisitor<T>& fn) {
  fn(prefix + ".gamma", p.gamma);
  fn(prefix + ".beta", p.beta);
  fn(prefix + ".align", p.align);
}

template <class T>
void visit_params(LnpParams<T>& p, const std::string& prefix, const ParamVisitor<T>& fn) {
  fn(prefix + ".ln_gamma", p.ln_gamma);
  fn(prefix + ".ln_beta", p.ln_beta);
  visit_params(p.knorm, prefix + ".knorm", fn);
}

template <class T>
void visit_params(BiSsmParams<T>& p, const std::string& prefix, const ParamVisitor<T>& fn) {
  fn(prefix + ".ln_gamma", p.ln_gamma);
  fn(prefix + ".ln_beta", p.ln_beta);
  visit_params(p.fwd, prefix + ".fwd", fn);
  if (p.rev) visit_params(*p.rev, prefix + ".rev", fn);
  if (p.tok) visit_params(*p.tok, prefix + ".tok", fn);
}

template <class T>
void visit_params(EncoderParams<T>& p, const std::string& prefix, const ParamVisitor<T>& fn) {
  visit_params(p.embed.l1, prefix + ".embed.l1", fn);
  visit_params(p.embed.l2, prefix + ".embed.l2", fn);
  visit_params(p.embed.l3, prefix + ".embed.l3", fn);
  visit_params(p.embed.l4, prefix + ".embed.l4", fn);
  fn(prefix + ".cls_token", p.cls_token);
  visit_params(p.pos.l1, prefix + ".pos.l1", fn);
  visit_params(p.pos.l2, prefix + ".pos.l2", fn);
  fn(prefix + ".pos.cls_pos", p.pos.cls_pos);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto lp = prefix + ".layer" + std::to_string(i);
    visit_params(p.layers[i].lnp, lp + ".lnp", fn);
    visit_params(p.layers[i].ssm, lp + ".ssm", fn);
  }
}

template <class T>
void visit_params(HeadParams<T>& p, const std::string& prefix, const ParamVisitor<T>& fn) {
  visit_params(p.l1, prefix + ".l1", fn);
  visit_params(p.l2, prefix + ".l2", fn);
  visit_params(p.l3, prefix + ".l3", fn);
}

#define M3D_INSTANTIATE_ENCODER(T)                                                        \
  template Tensor<T> light_pointnet_embed<T>(const Tensor<T>&, const PointNetParams<T>&); \
  template Tensor<T> pos_encode<T>(const std::vector<Point3>&, const PosEncParams<T>&);   \
  template TokenSeq<T> assemble_tokens<T>(const Tensor<T>&, const std::vector<Point3>&,   \
                                          const PosEncParams<T>&, const Tensor<T>&);      \
  template Tensor<T> k_norm<T>(const Tensor<T>&, const std::vector<std::size_t>&,         \
                               const KNormParams<T>&, std::size_t, bool);                 \
  template Tensor<T> k_norm<T>(const Tensor<T>&, const std::vector<Point3>&,              \
                               const KNormParams<T>&, std::size_t, bool);                 \
  template Tensor<T> k_pooling<T>(const Tensor<T>&, PoolKind);                            \
  template TokenSeq<T> lnp_block<T>(TokenSeq<T>, const LnpParams<T>&,                     \
                                    const PosEncParams<T>&, const EncoderConfig&);        \
  template Tensor<T> channel_flip<T>(const Tensor<T>&);                                   \
  template TokenSeq<T> bi_ssm_block<T>(TokenSeq<T>, const BiSsmParams<T>&, SsmVariant);   \
  template std::pair<Tensor<T>, TokenSeq<T>> encoder_forward<T>(                          \
      const PointCloud&, const EncoderConfig&, EncoderParams<T>&);                        \
  template std::pair<Tensor<T>, TokenSeq<T>> encoder_forward<T>(                          \
      const PatchSet&, const EncoderConfig&, EncoderParams<T>&);                          \
  template Tensor<T> classifier_feature<T>(const TokenSeq<T>&);                           \
  template Tensor<T> classification_head<T>(const Tensor<T>&, const HeadParams<T>&, T,    \
                                            std::mt19937_64&, bool);                      \
  template EncoderParams<T> init_encoder<T>(const EncoderConfig&, std::mt19937_64&);      \
  template HeadParams<T> init_head<T>(std::size_t, std::size_t, std::mt19937_64&);        \
  template void visit_params<T>(LinearP<T>&, const std::string&, const ParamVisitor<T>&); \
  template void visit_params<T>(KNormParams<T>&, const std::string&,                      \
                                const ParamVisitor<T>&);                                  \
  template void visit_params<T>(LnpParams<T>&, const std::string&,                        \
                                const ParamVisitor<T>&);                                  \
  template void visit_params<T>(BiSsmParams<T>&, const std::string&,                      \
                                const ParamVisitor<T>&);                                  \
  template void visit_params<T>(EncoderParams<T>&, const std::string&,                    \
                                const ParamVisitor<T>&);                                  \
  template void visit_params<T>(HeadParams<T>&, const std::string&, const ParamVisitor<T>&);

M3D_INSTANTIATE_ENCODER(float)
M3D_INSTANTIATE_ENCODER(double)

}  // namespace m3d
