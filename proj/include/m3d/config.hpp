#pragma once

#include <cstdint>
#include <string>

#include "m3d/encoder.hpp"
#include "m3d/training.hpp"

// Run configuration as a JSON document. Parsing is strict: unknown keys are
// rejected with their dotted path, and type errors name the offending key.
// serialize_run_config always emits every field with defaults expanded, so a
// saved config replays a run without relying on compiled-in defaults.

namespace m3d {

struct RunConfig {
  EncoderConfig encoder;

  // "train" section
  std::size_t epochs = 50;
  std::size_t batch = 16;
  double lr = 1e-3;
  double lr_min = 1e-6;
  std::size_t warmup = 10;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool augment = true;
  double mask_lo = 0.55;
  double mask_hi = 0.85;
  std::size_t decoder_depth = 4;

  std::uint64_t seed = 0;
  std::string data;  // manifest csv
  std::string out;   // output directory
  std::string init;  // optional checkpoint to start from (encoder weights)

  template <class T>
  TrainHyper<T> hyper() const {
    TrainHyper<T> h;
    h.epochs = epochs, h.batch = batch, h.warmup = warmup, h.seed = seed;
    h.opt.lr = T(lr), h.opt.beta1 = T(beta1), h.opt.beta2 = T(beta2);
    h.opt.eps = T(adam_eps), h.opt.weight_decay = T(weight_decay);
    h.lr_min = lr_min, h.augment = augment;
    h.mask_lo = mask_lo, h.mask_hi = mask_hi;
    return h;
  }
};

RunConfig parse_run_config(const std::string& json_text);  // ValidationError
std::string serialize_run_config(const RunConfig& cfg);

RunConfig load_run_config(const std::string& path);  // IoError if unreadable
void save_run_config(const std::string& path, const RunConfig& cfg);  // atomic

// M3D_SEED, when set, overrides cfg.seed; non-numeric values are rejected.
void apply_env_seed(RunConfig& cfg);

}  // namespace m3d
