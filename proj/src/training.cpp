#include "m3d/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include <json.hpp>

#include "m3d/error.hpp"
#include "m3d/ssm.hpp"

namespace m3d {

namespace {

template <class T>
Tensor<T> linear(const Tensor<T>& x, const LinearP<T>& p) {
  return add(matmul(x, p.W), p.b);
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Stable per-(seed, epoch, item) stream so runs replay exactly.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
  return splitmix(splitmix(splitmix(a) ^ b) ^ c);
}

template <class T>
std::size_t argmax(std::span<const T> v) {
  return static_cast<std::size_t>(
      std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

// ---------- optimizer ----------

template <class T>
void OptimizerState<T>::add(const std::string& name, Tensor<T> p) {
  if (!p.defined()) throw ValidationError("optimizer: undefined tensor " + name);
  for (const auto& s : slots)
    if (s.name == name)
      throw ValidationError("optimizer: duplicate parameter name " + name);
  p.set_tracked(true);
  OptSlot<T> s;
  s.name = name;
  s.param = std::move(p);
  s.m.assign(s.param.numel(), T(0));
  s.v.assign(s.param.numel(), T(0));
  s.g.assign(s.param.numel(), T(0));
  slots.push_back(std::move(s));
}

template <class T>
void accumulate_grads(OptimizerState<T>& st, const Tape<T>& tape, T scale) {
  for (auto& s : st.slots) {
    const std::vector<T>* g = tape.find_grad(s.param.node().get());
    if (!g) continue;
    for (std::size_t i = 0; i < s.g.size(); ++i) s.g[i] += scale * (*g)[i];
  }
}

template <class T>
void adamw_step(OptimizerState<T>& st) {
  const auto& h = st.hyper;
  st.step += 1;
  T bc1 = T(1) - std::pow(h.beta1, T(st.step));
  T bc2 = T(1) - std::pow(h.beta2, T(st.step));
  for (auto& s : st.slots) {
    for (T gi : s.g)
      if (!std::isfinite(gi))
        throw NumericError("adamw_step: non-finite gradient for " + s.name);
    auto w = s.param.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      s.m[i] = h.beta1 * s.m[i] + (T(1) - h.beta1) * s.g[i];
      s.v[i] = h.beta2 * s.v[i] + (T(1) - h.beta2) * s.g[i] * s.g[i];
      T mhat = s.m[i] / bc1;
      T vhat = s.v[i] / bc2;
      w[i] -= h.lr * (mhat / (std::sqrt(vhat) + h.eps) + h.weight_decay * w[i]);
    }
    std::fill(s.g.begin(), s.g.end(), T(0));
  }
}

double cosine_lr(std::size_t epoch, std::size_t total, double lr_max,
                 double lr_min, std::size_t warmup) {
  if (warmup > 0 && epoch < warmup)
    return lr_max * double(epoch) / double(warmup);
  if (epoch >= total) return lr_min;
  double s = double(epoch - warmup) / double(total - warmup);
  return lr_min + (lr_max - lr_min) * 0.5 * (1.0 + std::cos(s * 3.14159265358979323846));
}

// ---------- masked point modeling ----------

MaskSpec mask_tokens(std::size_t L, double ratio, std::uint64_t seed) {
  if (L == 0) throw ValidationError("mask_tokens: L must be positive");
  if (!(ratio > 0.0 && ratio < 1.0))
    throw ValidationError("mask_tokens: ratio must lie in (0, 1)");
  auto count = static_cast<std::size_t>(std::llround(ratio * double(L)));
  std::vector<std::size_t> idx(L);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  MaskSpec ms;
  ms.ratio = ratio;
  ms.L = L;
  ms.masked.assign(idx.begin(), idx.begin() + count);
  ms.visible.assign(idx.begin() + count, idx.end());
  std::sort(ms.masked.begin(), ms.masked.end());
  std::sort(ms.visible.begin(), ms.visible.end());
  return ms;
}

template <class T>
DecoderParams<T> init_decoder(const EncoderConfig& cfg, std::size_t depth,
                              std::mt19937_64& rng) {
  if (depth < 1) throw ValidationError("init_decoder: depth must be >= 1");
  cfg.validate();
  DecoderParams<T> p;
  p.mask_token = trunc_normal<T>({cfg.C}, T(0.02), rng);
  p.pos1 = {trunc_normal<T>({3, 128}, T(0.02), rng), Tensor<T>::zeros({128})};
  p.pos2 = {trunc_normal<T>({128, cfg.C}, T(0.02), rng), Tensor<T>::zeros({cfg.C})};
  for (std::size_t i = 0; i < depth; ++i) {
    BiSsmParams<T> blk;
    blk.ln_gamma = Tensor<T>::full({cfg.C}, T(1));
    blk.ln_beta = Tensor<T>::zeros({cfg.C});
    blk.fwd = init_mamba_block<T>(cfg.C, cfg.d_state, cfg.d_conv, cfg.expand, rng);
    blk.rev = init_mamba_block<T>(cfg.C, cfg.d_state, cfg.d_conv, cfg.expand, rng);
    p.blocks.push_back(std::move(blk));
  }
  p.head = {trunc_normal<T>({cfg.C, cfg.K * 3}, T(0.02), rng),
            Tensor<T>::zeros({cfg.K * 3})};
  return p;
}

template <class T>
void visit_params(DecoderParams<T>& p, const std::string& prefix,
                  const ParamVisitor<T>& fn) {
  fn(prefix + ".mask_token", p.mask_token);
  visit_params(p.pos1, prefix + ".pos1", fn);
  visit_params(p.pos2, prefix + ".pos2", fn);
  for (std::size_t i = 0; i < p.blocks.size(); ++i)
    visit_params(p.blocks[i], prefix + ".block" + std::to_string(i), fn);
  visit_params(p.head, prefix + ".head", fn);
}

template <class T>
Tensor<T> pretrain_step(const std::vector<PatchSet>& batch,
                        const EncoderConfig& cfg, EncoderParams<T>& enc,
                        DecoderParams<T>& dec, const MaskSpec& mask) {
  if (batch.empty()) throw ValidationError("pretrain_step: empty batch");
  if (dec.blocks.empty())
    throw ValidationError("pretrain_step: decoder needs at least one block");
  for (const auto& blk : dec.blocks)
    if (!blk.rev)
      throw ValidationError("pretrain_step: decoder block missing reverse scan");
  if (mask.masked.empty())
    throw ValidationError("pretrain_step: mask selects no patches");
  if (mask.visible.size() < cfg.k)
    throw ValidationError("pretrain_step: fewer visible patches than k");

  std::size_t C = cfg.C;
  std::size_t V = mask.visible.size(), M = mask.masked.size();
  auto total = Tensor<T>::scalar(T(0));
  for (const auto& ps : batch) {
    if (ps.L != mask.L)
      throw ValidationError("pretrain_step: mask length does not match patch count");
    std::size_t K = ps.K;

    PatchSet vis;
    vis.L = V;
    vis.K = K;
    vis.centers.reserve(V);
    vis.groups.reserve(V * K);
    for (auto i : mask.visible) {
      vis.centers.push_back(ps.centers[i]);
      for (std::size_t j = 0; j < K; ++j)
        vis.groups.push_back(ps.groups[i * K + j]);
    }
    auto seq = encoder_forward(vis, cfg, enc).second;

    // Splice: encoded visible tokens at their original slots, the shared
    // learnable mask token everywhere else. Row V of the pool is the mask
    // token, so gather accumulates its gradient across all masked slots.
    std::vector<std::size_t> vrows(V);
    for (std::size_t j = 0; j < V; ++j) vrows[j] = j + 1;  // skip CLS
    auto pool = concat(gather(seq.tokens, vrows, 0),
                       reshape(dec.mask_token, {1, C}), 0);
    std::vector<std::size_t> order(ps.L, V);
    for (std::size_t j = 0; j < V; ++j) order[mask.visible[j]] = j;
    auto tokens = gather(pool, order, 0);

    auto Xc = points_to_tensor<T>(ps.centers, {ps.L, 3});
    auto pos = linear(gelu(linear(Xc, dec.pos1)), dec.pos2);
    TokenSeq<T> dseq;
    dseq.tokens = add(tokens, pos);
    dseq.centers = ps.centers;
    for (auto& blk : dec.blocks)
      dseq = bi_ssm_block(std::move(dseq), blk, SsmVariant::bi_ssm);

    auto pred = reshape(linear(gather(dseq.tokens, mask.masked, 0), dec.head),
                        {M, K, 3});
    auto cloud_loss = Tensor<T>::scalar(T(0));
    for (std::size_t mi = 0; mi < M; ++mi) {
      auto pm = reshape(gather(pred, {mi}, 0), {K, 3});
      std::vector<T> gv(K * 3);
      const Point3* src = ps.groups.data() + mask.masked[mi] * K;
      for (std::size_t j = 0; j < K; ++j)
        for (std::size_t d = 0; d < 3; ++d) gv[j * 3 + d] = T(src[j][d]);
      auto gt = Tensor<T>::from({K, 3}, std::move(gv));
      cloud_loss = add(cloud_loss, chamfer_distance(pm, gt));
    }
    total = add(total, mul_scalar(cloud_loss, T(1) / T(M)));
  }
  return mul_scalar(total, T(1) / T(batch.size()));
}

// ---------- training loops ----------

PointCloud augment_cloud(const PointCloud& pc, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> sd(0.8, 1.2), td(-0.1, 0.1);
  double sx = sd(rng), sy = sd(rng), sz = sd(rng);
  double tx = td(rng), ty = td(rng), tz = td(rng);
  PointCloud out = pc;
  for (auto& p : out.pts) {
    p[0] = p[0] * sx + tx;
    p[1] = p[1] * sy + ty;
    p[2] = p[2] * sz + tz;
  }
  return out;
}

template <class T>
EvalResult evaluate(const DataSplit& split, const EncoderConfig& cfg,
                    EncoderParams<T>& enc, HeadParams<T>& head,
                    std::size_t n_classes) {
  std::size_t n = split.clouds.size();
  if (n == 0) throw ValidationError("evaluate: empty split");
  if (split.labels.size() != n)
    throw ValidationError("evaluate: clouds/labels size mismatch");
  std::vector<std::size_t> seen(n_classes, 0), hit(n_classes, 0);
  std::mt19937_64 dummy(0);
  EvalResult r;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t label = split.labels[i];
    if (label >= n_classes) throw ValidationError("evaluate: label out of range");
    auto feat = classifier_feature(encoder_forward(split.clouds[i], cfg, enc).second);
    auto logits = classification_head(feat, head, T(0), dummy, false);
    r.loss += double(cross_entropy(logits, label).item());
    std::size_t pred = argmax(logits.data());
    seen[label] += 1;
    if (pred == label) {
      hit[label] += 1;
      correct += 1;
    }
  }
  r.loss /= double(n);
  r.oa = double(correct) / double(n);
  r.per_class.resize(n_classes, 0.0);
  for (std::size_t c = 0; c < n_classes; ++c)
    r.per_class[c] = seen[c] ? double(hit[c]) / double(seen[c]) : 0.0;
  return r;
}

namespace {

void check_split(const DataSplit& s, std::size_t n_classes, const char* what) {
  if (s.clouds.size() != s.labels.size())
    throw ValidationError(std::string(what) + ": clouds/labels size mismatch");
  for (auto l : s.labels)
    if (l >= n_classes)
      throw ValidationError(std::string(what) + ": label out of range");
}

}  // namespace

template <class T>
std::vector<EpochStats> train_classifier(
    const Dataset& data, const EncoderConfig& cfg, const TrainHyper<T>& hy,
    EncoderParams<T>& enc, HeadParams<T>& head, OptimizerState<T>& opt,
    const std::function<void(const EpochStats&)>& on_epoch) {
  if (data.train.clouds.empty())
    throw ValidationError("train_classifier: empty training split");
  if (data.n_classes < 2)
    throw ValidationError("train_classifier: need at least two classes");
  check_split(data.train, data.n_classes, "train_classifier");
  check_split(data.test, data.n_classes, "train_classifier");
  if (hy.epochs == 0 || hy.batch == 0)
    throw ValidationError("train_classifier: epochs and batch must be positive");
  if (opt.slots.empty()) {
    opt.hyper = hy.opt;
    ParamVisitor<T> reg = [&](const std::string& n, Tensor<T>& t) { opt.add(n, t); };
    visit_params(enc, "enc", reg);
    visit_params(head, "head", reg);
  }

  std::size_t n = data.train.clouds.size();
  std::vector<EpochStats> hist;
  hist.reserve(hy.epochs);
  for (std::size_t e = 0; e < hy.epochs; ++e) {
    double lr = cosine_lr(e + 1, hy.epochs, double(hy.opt.lr), hy.lr_min, hy.warmup);
    opt.hyper = hy.opt;
    opt.hyper.lr = T(lr);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 erng(mix_seed(hy.seed, 0x6f72646572ull, e));
    std::shuffle(order.begin(), order.end(), erng);

    double ep_loss = 0;
    std::size_t ep_hit = 0;
    for (std::size_t b0 = 0; b0 < n; b0 += hy.batch) {
      std::size_t bn = std::min(hy.batch, n - b0);
      for (std::size_t j = 0; j < bn; ++j) {
        std::size_t idx = order[b0 + j];
        std::mt19937_64 srng(mix_seed(hy.seed, e, idx));
        const PointCloud* pc = &data.train.clouds[idx];
        PointCloud aug;
        if (hy.augment) {
          aug = augment_cloud(*pc, srng);
          pc = &aug;
        }
        Tape<T> tape;
        auto feat = classifier_feature(encoder_forward(*pc, cfg, enc).second);
        auto logits =
            classification_head(feat, head, T(cfg.head_dropout), srng, true);
        auto loss = cross_entropy(logits, data.train.labels[idx]);
        tape.backward(loss);
        accumulate_grads(opt, tape, T(1) / T(bn));
        ep_loss += double(loss.item());
        if (argmax(logits.data()) == data.train.labels[idx]) ep_hit += 1;
      }
      adamw_step(opt);
    }

    EpochStats st;
    st.epoch = e;
    st.lr = lr;
    st.train_loss = ep_loss / double(n);
    st.train_oa = double(ep_hit) / double(n);
    if (!data.test.clouds.empty()) {
      auto ev = evaluate(data.test, cfg, enc, head, data.n_classes);
      st.test_loss = ev.loss;
      st.test_oa = ev.oa;
    }
    hist.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  return hist;
}

template <class T>
std::vector<EpochStats> pretrain(
    const std::vector<PointCloud>& clouds, const EncoderConfig& cfg,
    const TrainHyper<T>& hy, EncoderParams<T>& enc, DecoderParams<T>& dec,
    OptimizerState<T>& opt, const std::function<void(const EpochStats&)>& on_epoch) {
  if (clouds.empty()) throw ValidationError("pretrain: empty dataset");
  if (hy.epochs == 0 || hy.batch == 0)
    throw ValidationError("pretrain: epochs and batch must be positive");
  if (!(hy.mask_lo > 0 && hy.mask_hi < 1 && hy.mask_lo <= hy.mask_hi))
    throw ValidationError("pretrain: mask ratio range must satisfy 0 < lo <= hi < 1");
  if (opt.slots.empty()) {
    opt.hyper = hy.opt;
    ParamVisitor<T> reg = [&](const std::string& n, Tensor<T>& t) { opt.add(n, t); };
    visit_params(enc, "enc", reg);
    visit_params(dec, "dec", reg);
  }

  std::size_t n = clouds.size();
  std::vector<PatchSet> patches(n);
  for (std::size_t i = 0; i < n; ++i)
    patches[i] = group_patches(clouds[i], cfg.L, cfg.K);

  std::vector<EpochStats> hist;
  hist.reserve(hy.epochs);
  for (std::size_t e = 0; e < hy.epochs; ++e) {
    double lr = cosine_lr(e + 1, hy.epochs, double(hy.opt.lr), hy.lr_min, hy.warmup);
    opt.hyper = hy.opt;
    opt.hyper.lr = T(lr);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 erng(mix_seed(hy.seed, 0x6f72646572ull, e));
    std::shuffle(order.begin(), order.end(), erng);

    double ep_loss = 0;
    std::size_t bi = 0;
    for (std::size_t b0 = 0; b0 < n; b0 += hy.batch, ++bi) {
      std::size_t bn = std::min(hy.batch, n - b0);
      std::vector<PatchSet> batch;
      batch.reserve(bn);
      for (std::size_t j = 0; j < bn; ++j) batch.push_back(patches[order[b0 + j]]);

      std::mt19937_64 brng(mix_seed(hy.seed, 0x6d61736bull + e, bi));
      double ratio =
          std::uniform_real_distribution<double>(hy.mask_lo, hy.mask_hi)(brng);
      auto mask = mask_tokens(cfg.L, ratio, brng());

      Tape<T> tape;
      auto loss = pretrain_step(batch, cfg, enc, dec, mask);
      tape.backward(loss);
      accumulate_grads(opt, tape, T(1));
      adamw_step(opt);
      ep_loss += double(loss.item()) * double(bn);
    }

    EpochStats st;
    st.epoch = e;
    st.lr = lr;
    st.train_loss = ep_loss / double(n);
    hist.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  return hist;
}

// ---------- checkpointing ----------

namespace {

template <class T>
constexpr const char* dtype_of() {
  return sizeof(T) == 8 ? "f64" : "f32";
}

void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& s, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& s, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= std::uint32_t(static_cast<unsigned char>(s[at + i])) << (8 * i);
  return v;
}

std::uint64_t get_u64(const std::string& s, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= std::uint64_t(static_cast<unsigned char>(s[at + i])) << (8 * i);
  return v;
}

nlohmann::json config_json(const EncoderConfig& c) {
  return {{"T", c.T},
          {"C", c.C},
          {"k", c.k},
          {"L", c.L},
          {"K", c.K},
          {"N", c.N},
          {"d_state", c.d_state},
          {"d_conv", c.d_conv},
          {"expand", c.expand},
          {"variant", to_string(c.variant)},
          {"pooling", to_string(c.pooling)},
          {"knorm_per_channel", c.knorm_per_channel},
          {"head_dropout", c.head_dropout}};
}

EncoderConfig config_from(const nlohmann::json& j) {
  EncoderConfig c;
  c.T = j.at("T").get<std::size_t>();
  c.C = j.at("C").get<std::size_t>();
  c.k = j.at("k").get<std::size_t>();
  c.L = j.at("L").get<std::size_t>();
  c.K = j.at("K").get<std::size_t>();
  c.N = j.at("N").get<std::size_t>();
  c.d_state = j.at("d_state").get<std::size_t>();
  c.d_conv = j.at("d_conv").get<std::size_t>();
  c.expand = j.at("expand").get<std::size_t>();
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.pooling = parse_pooling(j.at("pooling").get<std::string>());
  c.knorm_per_channel = j.at("knorm_per_channel").get<bool>();
  c.head_dropout = j.at("head_dropout").get<double>();
  return c;
}

}  // namespace

template <class T>
Checkpoint<T> snapshot(const EncoderConfig& cfg, std::size_t n_classes,
                       EncoderParams<T>& enc, HeadParams<T>* head,
                       DecoderParams<T>* dec, const OptimizerState<T>* opt,
                       std::uint64_t epoch, const std::string& rng) {
  Checkpoint<T> ck;
  ck.cfg = cfg;
  ck.n_classes = n_classes;
  ck.epoch = epoch;
  ck.rng = rng;
  ParamVisitor<T> put = [&](const std::string& n, Tensor<T>& t) {
    ck.tensors.emplace_back(n, t);
  };
  visit_params(enc, "enc", put);
  if (head) visit_params(*head, "head", put);
  if (dec) visit_params(*dec, "dec", put);
  if (opt) {
    ck.opt_step = opt->step;
    ck.opt_hyper = opt->hyper;
    for (const auto& s : opt->slots) {
      ck.tensors.emplace_back("m." + s.name, Tensor<T>::from({s.m.size()}, s.m));
      ck.tensors.emplace_back("v." + s.name, Tensor<T>::from({s.v.size()}, s.v));
    }
  }
  return ck;
}

template <class T>
void restore(const Checkpoint<T>& ck, EncoderParams<T>& enc,
             HeadParams<T>* head, DecoderParams<T>* dec,
             OptimizerState<T>* opt) {
  std::unordered_map<std::string, Tensor<T>> targets;
  ParamVisitor<T> collect = [&](const std::string& n, Tensor<T>& t) {
    targets.emplace(n, t);
  };
  visit_params(enc, "enc", collect);
  if (head) visit_params(*head, "head", collect);
  if (dec) visit_params(*dec, "dec", collect);

  std::unordered_map<std::string, std::size_t> slot_of;
  if (opt)
    for (std::size_t i = 0; i < opt->slots.size(); ++i)
      slot_of.emplace(opt->slots[i].name, i);

  std::size_t filled = 0;
  for (const auto& [name, src] : ck.tensors) {
    bool is_m = name.rfind("m.", 0) == 0, is_v = name.rfind("v.", 0) == 0;
    if (is_m || is_v) {
      if (!opt) continue;
      auto it = slot_of.find(name.substr(2));
      if (it == slot_of.end())
        throw IoError("checkpoint optimizer entry " + name + " has no slot");
      auto& slot = opt->slots[it->second];
      auto& dst = is_m ? slot.m : slot.v;
      if (src.numel() != dst.size())
        throw IoError("checkpoint moment size mismatch for " + name);
      std::copy(src.data().begin(), src.data().end(), dst.begin());
      continue;
    }
    auto it = targets.find(name);
    if (it == targets.end())
      throw IoError("checkpoint tensor " + name + " has no destination in the model");
    if (it->second.shape() != src.shape())
      throw IoError("checkpoint shape mismatch for " + name);
    std::copy(src.data().begin(), src.data().end(),
              it->second.mutable_data().begin());
    filled += 1;
  }
  if (filled != targets.size()) {
    std::unordered_map<std::string, bool> have;
    for (const auto& [name, src] : ck.tensors) have.emplace(name, true);
    for (const auto& [name, t] : targets)
      if (!have.count(name)) throw IoError("checkpoint missing tensor " + name);
  }
  if (opt) {
    opt->step = ck.opt_step;
    opt->hyper = ck.opt_hyper;
  }
}

template <class T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ck) {
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t off = 0;
  for (const auto& [name, t] : ck.tensors) {
    if (!t.defined())
      throw ValidationError("save_checkpoint: undefined tensor " + name);
    manifest.push_back({{"name", name},
                        {"shape", t.shape()},
                        {"dtype", dtype_of<T>()},
                        {"offset", off}});
    off += t.numel() * sizeof(T);
  }
  nlohmann::json hdr{{"config", config_json(ck.cfg)},
                     {"n_classes", ck.n_classes},
                     {"epoch", ck.epoch},
                     {"optimizer",
                      {{"step", ck.opt_step},
                       {"lr", double(ck.opt_hyper.lr)},
                       {"beta1", double(ck.opt_hyper.beta1)},
                       {"beta2", double(ck.opt_hyper.beta2)},
                       {"eps", double(ck.opt_hyper.eps)},
                       {"weight_decay", double(ck.opt_hyper.weight_decay)}}},
                     {"rng", ck.rng},
                     {"manifest", manifest}};
  std::string head = hdr.dump();

  std::string blob;
  blob.reserve(16 + head.size() + off);
  blob += "M3DC";
  put_u32(blob, ck.version);
  put_u64(blob, head.size());
  blob += head;
  for (const auto& [name, t] : ck.tensors)
    blob.append(reinterpret_cast<const char*>(t.data().data()),
                t.numel() * sizeof(T));

  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("save_checkpoint: cannot open " + tmp);
    f.write(blob.data(), std::streamsize(blob.size()));
    f.flush();
    if (!f) throw IoError("save_checkpoint: short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("save_checkpoint: rename failed: " + ec.message());
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_checkpoint: cannot open " + path);
  std::string all((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());

  if (all.size() < 4) throw IoError("checkpoint truncated: missing magic");
  if (all.compare(0, 4, "M3DC") != 0)
    throw IoError("not a checkpoint: bad magic bytes");
  if (all.size() < 16)
    throw IoError("checkpoint truncated: incomplete fixed header");
  std::uint32_t ver = get_u32(all, 4);
  if (ver != 1)
    throw IoError("unsupported checkpoint version " + std::to_string(ver) +
                  " (expected 1)");
  std::uint64_t hlen = get_u64(all, 8);
  if (16 + hlen > all.size())
    throw IoError("checkpoint truncated: header extends past end of file");

  nlohmann::json manifest;
  Checkpoint<T> ck;
  ck.version = ver;
  try {
    nlohmann::json hdr = nlohmann::json::parse(all.substr(16, hlen));
    ck.cfg = config_from(hdr.at("config"));
    ck.n_classes = hdr.at("n_classes").get<std::size_t>();
    ck.epoch = hdr.at("epoch").get<std::uint64_t>();
    const auto& op = hdr.at("optimizer");
    ck.opt_step = op.at("step").get<std::uint64_t>();
    ck.opt_hyper.lr = T(op.at("lr").get<double>());
    ck.opt_hyper.beta1 = T(op.at("beta1").get<double>());
    ck.opt_hyper.beta2 = T(op.at("beta2").get<double>());
    ck.opt_hyper.eps = T(op.at("eps").get<double>());
    ck.opt_hyper.weight_decay = T(op.at("weight_decay").get<double>());
    ck.rng = hdr.at("rng").get<std::string>();
    manifest = hdr.at("manifest");
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw IoError(std::string("checkpoint header corrupt: ") + e.what());
  }

  std::size_t base = 16 + hlen;
  for (const auto& e : manifest) {
    std::string name;
    Shape shp;
    std::string dt;
    std::uint64_t offset = 0;
    try {
      name = e.at("name").get<std::string>();
      shp = e.at("shape").get<Shape>();
      dt = e.at("dtype").get<std::string>();
      offset = e.at("offset").get<std::uint64_t>();
    } catch (const std::exception& ex) {
      throw IoError(std::string("checkpoint header corrupt: ") + ex.what());
    }
    if (dt != dtype_of<T>())
      throw IoError("checkpoint dtype " + dt + " does not match requested " +
                    dtype_of<T>());
    std::size_t numel = 1;
    for (auto d : shp) numel *= d;
    if (base + offset + numel * sizeof(T) > all.size())
      throw IoError("checkpoint truncated: payload for " + name +
                    " extends past end of file");
    std::vector<T> vals(numel);
    std::memcpy(vals.data(), all.data() + base + offset, numel * sizeof(T));
    ck.tensors.emplace_back(name, Tensor<T>::from(shp, std::move(vals)));
  }
  return ck;
}

#define M3D_INSTANTIATE_TRAINING(T)                                             \
  template struct OptimizerState<T>;                                            \
  template void accumulate_grads<T>(OptimizerState<T>&, const Tape<T>&, T);     \
  template void adamw_step<T>(OptimizerState<T>&);                              \
  template DecoderParams<T> init_decoder<T>(const EncoderConfig&, std::size_t,  \
                                            std::mt19937_64&);                  \
  template void visit_params<T>(DecoderParams<T>&, const std::string&,          \
                                const ParamVisitor<T>&);                        \
  template Tensor<T> pretrain_step<T>(const std::vector<PatchSet>&,             \
                                      const EncoderConfig&, EncoderParams<T>&,  \
                                      DecoderParams<T>&, const MaskSpec&);      \
  template EvalResult evaluate<T>(const DataSplit&, const EncoderConfig&,       \
                                  EncoderParams<T>&, HeadParams<T>&,            \
                                  std::size_t);                                 \
  template std::vector<EpochStats> train_classifier<T>(                         \
      const Dataset&, const EncoderConfig&, const TrainHyper<T>&,               \
      EncoderParams<T>&, HeadParams<T>&, OptimizerState<T>&,                    \
      const std::function<void(const EpochStats&)>&);                           \
  template std::vector<EpochStats> pretrain<T>(                                 \
      const std::vector<PointCloud>&, const EncoderConfig&, const TrainHyper<T>&, \
      EncoderParams<T>&, DecoderParams<T>&, OptimizerState<T>&,                 \
      const std::function<void(const EpochStats&)>&);                           \
  template Checkpoint<T> snapshot<T>(const EncoderConfig&, std::size_t,         \
                                     EncoderParams<T>&, HeadParams<T>*,         \
                                     DecoderParams<T>*, const OptimizerState<T>*, \
                                     std::uint64_t, const std::string&);        \
  template void restore<T>(const Checkpoint<T>&, EncoderParams<T>&,             \
                           HeadParams<T>*, DecoderParams<T>*, OptimizerState<T>*); \
  template void save_checkpoint<T>(const std::string&, const Checkpoint<T>&);   \
  template Checkpoint<T> load_checkpoint<T>(const std::string&);

M3D_INSTANTIATE_TRAINING(float)
M3D_INSTANTIATE_TRAINING(double)

}  // namespace m3d
