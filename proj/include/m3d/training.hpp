#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "m3d/encoder.hpp"
#include "m3d/pointcloud.hpp"
#include "m3d/tensor.hpp"

namespace m3d {

// ---------- optimizer ----------

template <class T>
struct AdamWConfig {
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  T weight_decay = T(0.05);
};

// One registered parameter: the tensor handle (aliases the model's node),
// Adam moments, and a gradient accumulation buffer for batching.
template <class T>
struct OptSlot {
  std::string name;
  Tensor<T> param;
  std::vector<T> m, v, g;
};

template <class T>
struct OptimizerState {
  AdamWConfig<T> hyper;
  std::vector<OptSlot<T>> slots;
  std::uint64_t step = 0;

  void add(const std::string& name, Tensor<T> p);
};

// Adds scale * d(loss)/d(param) from the tape into each slot's buffer.
// Call once per batch member after Tape::backward.
template <class T>
void accumulate_grads(OptimizerState<T>& st, const Tape<T>& tape, T scale = T(1));

// Decoupled-weight-decay AdamW with bias correction over the accumulated
// gradients; buffers are cleared afterwards. Non-finite gradients raise
// NumericError naming the offending parameter.
template <class T>
void adamw_step(OptimizerState<T>& st);

// Linear warmup from 0 to lr_max over warmup epochs, then a half cosine down
// to lr_min at total. Epochs past total clamp to lr_min. Training loops pass
// epoch+1 so the first epoch already gets lr_max/warmup instead of zero.
double cosine_lr(std::size_t epoch, std::size_t total, double lr_max,
                 double lr_min, std::size_t warmup = 10);

// ---------- masked point modeling ----------

struct MaskSpec {
  double ratio = 0;                    // requested ratio
  std::size_t L = 0;                   // number of patches masked over
  std::vector<std::size_t> masked;     // sorted patch indices, round(ratio*L) of them
  std::vector<std::size_t> visible;    // sorted complement
};

// Uniform subset without replacement, size round(ratio*L), deterministic per
// seed. Indices address patches (the CLS token is not a patch and can never
// be selected).
MaskSpec mask_tokens(std::size_t L, double ratio, std::uint64_t seed);

// Decoder for pretraining: bi-SSM blocks only, no LNP, with its own
// positional MLP over the true centers and a linear head emitting K*3
// center-relative coordinates per token.
template <class T>
struct DecoderParams {
  Tensor<T> mask_token;   // C
  LinearP<T> pos1, pos2;  // 3 -> 128 -> C, gelu between
  std::vector<BiSsmParams<T>> blocks;
  LinearP<T> head;        // C -> K*3
};

template <class T>
DecoderParams<T> init_decoder(const EncoderConfig& cfg, std::size_t depth,
                              std::mt19937_64& rng);

template <class T>
void visit_params(DecoderParams<T>& p, const std::string& prefix,
                  const ParamVisitor<T>& fn);

// Encode only the visible patches, splice the learned mask token into the
// masked slots (original patch order), add decoder positions from the true
// centers, run the decoder, and score the masked predictions against the
// ground-truth groups with Chamfer distance. Returns the mean loss over the
// batch; differentiable w.r.t. all encoder and decoder parameters.
template <class T>
Tensor<T> pretrain_step(const std::vector<PatchSet>& batch,
                        const EncoderConfig& cfg, EncoderParams<T>& enc,
                        DecoderParams<T>& dec, const MaskSpec& mask);

// ---------- training loops ----------

struct DataSplit {
  std::vector<PointCloud> clouds;
  std::vector<std::size_t> labels;
};

struct Dataset {
  DataSplit train, test;
  std::size_t n_classes = 0;
};

template <class T>
struct TrainHyper {
  std::size_t epochs = 50;
  std::size_t batch = 16;
  AdamWConfig<T> opt;  // opt.lr is the schedule's lr_max
  double lr_min = 1e-6;
  std::size_t warmup = 10;
  std::uint64_t seed = 0;
  bool augment = true;       // classification only
  double mask_lo = 0.55;     // pretraining ratio range
  double mask_hi = 0.85;
};

struct EpochStats {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0, train_oa = 0;
  double test_loss = 0, test_oa = 0;
};

struct EvalResult {
  double loss = 0;
  double oa = 0;
  std::vector<double> per_class;  // accuracy per label; 0 where unrepresented
};

// Per-axis scale in [0.8, 1.2] and translate in [-0.1, 0.1].
PointCloud augment_cloud(const PointCloud& pc, std::mt19937_64& rng);

template <class T>
EvalResult evaluate(const DataSplit& split, const EncoderConfig& cfg,
                    EncoderParams<T>& enc, HeadParams<T>& head,
                    std::size_t n_classes);

// Cross-entropy classification loop: shuffled mini-batches, cosine schedule,
// per-(seed,epoch,sample) RNG so runs replay exactly. Registers enc+head into
// the optimizer when its slot list is empty. on_epoch (optional) fires after
// each epoch's eval.
template <class T>
std::vector<EpochStats> train_classifier(
    const Dataset& data, const EncoderConfig& cfg, const TrainHyper<T>& hy,
    EncoderParams<T>& enc, HeadParams<T>& head, OptimizerState<T>& opt,
    const std::function<void(const EpochStats&)>& on_epoch = {});

// Masked point modeling loop. One mask per mini-batch, ratio drawn uniformly
// from [mask_lo, mask_hi]; no augmentation. train_oa/test_* are unused in the
// returned stats (loss + lr only).
template <class T>
std::vector<EpochStats> pretrain(
    const std::vector<PointCloud>& clouds, const EncoderConfig& cfg,
    const TrainHyper<T>& hy, EncoderParams<T>& enc, DecoderParams<T>& dec,
    OptimizerState<T>& opt,
    const std::function<void(const EpochStats&)>& on_epoch = {});

// ---------- checkpointing ----------

// On disk: "M3DC" magic, u32 LE version, u64 LE header length, UTF-8 JSON
// header (config, n_classes, epoch, optimizer scalars, rng, tensor manifest
// with name/shape/dtype/offset), then raw little-endian payloads in manifest
// order. Loading checks magic, version, and byte counts with distinct errors.
template <class T>
struct Checkpoint {
  std::uint32_t version = 1;
  EncoderConfig cfg;
  std::size_t n_classes = 0;
  std::uint64_t epoch = 0;
  std::uint64_t opt_step = 0;
  AdamWConfig<T> opt_hyper;
  std::string rng;  // serialized engine state, may be empty
  std::vector<std::pair<std::string, Tensor<T>>> tensors;
};

// Collect live tensors (and optimizer moments as "m.<name>"/"v.<name>") into
// a checkpoint; head/dec/opt may be null. Tensors alias the live parameters.
template <class T>
Checkpoint<T> snapshot(const EncoderConfig& cfg, std::size_t n_classes,
                       EncoderParams<T>& enc, HeadParams<T>* head,
                       DecoderParams<T>* dec, const OptimizerState<T>* opt,
                       std::uint64_t epoch, const std::string& rng);

// Copy checkpoint values back into live structures by name, shape-checked.
// Moment entries are consumed only when opt is given; opt slots must already
// be registered in the same naming scheme.
template <class T>
void restore(const Checkpoint<T>& ck, EncoderParams<T>& enc,
             HeadParams<T>* head, DecoderParams<T>* dec,
             OptimizerState<T>* opt);

template <class T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ck);

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path);

}  // namespace m3d
