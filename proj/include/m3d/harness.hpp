#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "m3d/config.hpp"
#include "m3d/training.hpp"

// Command cores behind the CLI, callable in-process so tests can drive them
// without spawning. All file outputs are written atomically (temp + rename).

namespace m3d {

struct SynthOpts {
  std::size_t classes = 3;
  std::size_t per_class = 100;
  std::size_t points = 256;
  double noise = 0.01;
  std::uint64_t seed = 0;
  std::string out_dir;
};

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  std::size_t label = 0;
  std::string split;  // "train" or "test"
};

// Writes per-class xyz clouds plus manifest.csv (path,label,split) with a
// deterministic per-class 80/20 split. Same opts -> byte-identical files.
std::string run_synth(const SynthOpts& opts);  // returns manifest path

std::vector<ManifestEntry> read_manifest(const std::string& path);
Dataset load_dataset(const std::string& manifest_path);

struct RunPaths {
  std::string config;      // resolved config written before the run
  std::string metrics;     // epoch,split,loss,oa,lr
  std::string checkpoint;  // final model
};

// Supervised classification. cfg.data/cfg.out must be set; cfg.init, when
// non-empty, seeds the encoder from that checkpoint's enc.* tensors.
RunPaths run_train(RunConfig cfg, std::ostream& log);

// Masked point modeling over the manifest's train split.
RunPaths run_pretrain(RunConfig cfg, std::ostream& log);

// Evaluates the checkpoint on the manifest's test split and prints overall
// plus per-class accuracy.
EvalResult run_eval(const std::string& checkpoint, const std::string& data,
                    std::ostream& out);

// Trainable tensor entries of an encoder at these dimensions, counted
// analytically (gradcheck uses it to reject configs it cannot afford to probe).
std::size_t encoder_param_count(const EncoderConfig& cfg);

// Per-block finite-difference table; returns the number of failing blocks.
// dtype "f64" checks at 1e-6, "f32" relaxes to 1e-3. Configs above the
// parameter cap are rejected so the quadratic probing stays desk-scale.
std::size_t run_gradcheck(const RunConfig& cfg, const std::string& dtype,
                          std::ostream& out);

// Analytic FLOPs + wall-clock medians for one bi-SSM encoder layer and the
// reference attention layer at each length; asserts the SSM count is affine
// in L and the attention count is not. Writes a long-format CSV.
void run_bench(const RunConfig& cfg, const std::vector<std::size_t>& lengths,
               std::size_t repeats, const std::string& out_csv, std::ostream& log);

// Dumps the checkpoint header (no payload load): version, dtype, config,
// counters, tensor manifest.
void run_inspect(const std::string& checkpoint, std::ostream& out);

}  // namespace m3d
