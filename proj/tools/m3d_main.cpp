#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "m3d/config.hpp"
#include "m3d/error.hpp"
#include "m3d/harness.hpp"

namespace {

// the tiny-config default for gradcheck keeps finite differencing desk-fast
m3d::RunConfig tiny_config() {
  m3d::RunConfig c;
  c.encoder.T = 1;
  c.encoder.C = 16;
  c.encoder.k = 3;
  c.encoder.L = 8;
  c.encoder.K = 4;
  c.encoder.N = 32;
  c.encoder.d_state = 4;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"point cloud SSM encoder: synth / train / pretrain / eval / "
               "gradcheck / bench / inspect"};
  app.require_subcommand(1);

  m3d::SynthOpts so;
  auto* synth = app.add_subcommand("synth", "generate a labeled synthetic dataset");
  synth->add_option("--classes", so.classes, "number of classes");
  synth->add_option("--per-class", so.per_class, "clouds per class");
  synth->add_option("--points", so.points, "points per cloud");
  synth->add_option("--noise", so.noise, "surface jitter sigma");
  synth->add_option("--seed", so.seed, "generator seed");
  synth->add_option("--out-dir", so.out_dir, "output directory")->required();

  std::string cfg_path, data, out_dir, init;
  auto add_run_opts = [&](CLI::App* c) {
    c->add_option("--config", cfg_path, "run config JSON")->required();
    c->add_option("--data", data, "manifest CSV (overrides config)");
    c->add_option("--out", out_dir, "output directory (overrides config)");
    c->add_option("--init", init, "checkpoint whose encoder weights seed the run");
  };
  auto* train = app.add_subcommand("train", "train a classifier");
  add_run_opts(train);
  auto* pre = app.add_subcommand("pretrain", "masked point modeling pretraining");
  add_run_opts(pre);

  std::string ckpt;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  ev->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  ev->add_option("--data", data, "manifest CSV")->required();

  std::string dtype = "f64";
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check per block");
  gc->add_option("--config", cfg_path, "run config JSON (default: built-in tiny config)");
  gc->add_option("--dtype", dtype, "f64 or f32");

  std::vector<std::size_t> lengths{64, 128, 256, 512};
  std::size_t repeats = 3;
  std::string bench_csv = "bench.csv";
  auto* bench = app.add_subcommand("bench", "FLOP and wall-time scaling in L");
  bench->add_option("--lengths", lengths, "ascending patch counts")->delimiter(',');
  bench->add_option("--repeats", repeats, "timing repeats per length");
  bench->add_option("--out", bench_csv, "output CSV path");
  bench->add_option("--config", cfg_path, "run config JSON for the layer dimensions");

  auto* insp = app.add_subcommand("inspect", "dump a checkpoint header");
  insp->add_option("--checkpoint", ckpt, "checkpoint path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;  // usage problems are validation errors
  }

  try {
    if (*synth) {
      std::cout << "wrote " << m3d::run_synth(so) << "\n";
    } else if (*train || *pre) {
      auto cfg = m3d::load_run_config(cfg_path);
      if (!data.empty()) cfg.data = data;
      if (!out_dir.empty()) cfg.out = out_dir;
      if (!init.empty()) cfg.init = init;
      if (*train)
        m3d::run_train(cfg, std::cout);
      else
        m3d::run_pretrain(cfg, std::cout);
    } else if (*ev) {
      m3d::run_eval(ckpt, data, std::cout);
    } else if (*gc) {
      auto cfg = cfg_path.empty() ? tiny_config() : m3d::load_run_config(cfg_path);
      m3d::apply_env_seed(cfg);
      if (m3d::run_gradcheck(cfg, dtype, std::cout) > 0) return 2;
    } else if (*bench) {
      auto cfg = cfg_path.empty() ? m3d::RunConfig{} : m3d::load_run_config(cfg_path);
      m3d::apply_env_seed(cfg);
      m3d::run_bench(cfg, lengths, repeats, bench_csv, std::cout);
    } else if (*insp) {
      m3d::run_inspect(ckpt, std::cout);
    }
  } catch (const m3d::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const m3d::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const m3d::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
