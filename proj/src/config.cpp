#include "m3d/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "m3d/error.hpp"

namespace m3d {

namespace {

using nlohmann::json;

// get with the dotted path in every failure message
template <class V>
V field(const json& obj, const std::string& path, const std::string& key, V dflt) {
  if (!obj.contains(key)) return dflt;
  try {
    return obj.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ValidationError("config: key " + (path.empty() ? key : path + "." + key) +
                          ": " + e.what());
  }
}

void reject_unknown(const json& obj, const std::string& path,
                    std::initializer_list<const char*> allowed) {
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) ok = true;
    if (!ok)
      throw ValidationError("config: unknown key " +
                            (path.empty() ? key : path + "." + key));
  }
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ValidationError("config: top level must be an object");
  reject_unknown(root, "", {"encoder", "train", "seed", "data", "out", "init"});

  RunConfig c;
  if (root.contains("encoder")) {
    const json& e = root.at("encoder");
    if (!e.is_object()) throw ValidationError("config: key encoder: must be an object");
    reject_unknown(e, "encoder",
                   {"T", "C", "k", "L", "K", "N", "d_state", "d_conv", "expand",
                    "variant", "pooling", "knorm_per_channel", "head_dropout"});
    EncoderConfig d;
    c.encoder.T = field<std::size_t>(e, "encoder", "T", d.T);
    c.encoder.C = field<std::size_t>(e, "encoder", "C", d.C);
    c.encoder.k = field<std::size_t>(e, "encoder", "k", d.k);
    c.encoder.L = field<std::size_t>(e, "encoder", "L", d.L);
    c.encoder.K = field<std::size_t>(e, "encoder", "K", d.K);
    c.encoder.N = field<std::size_t>(e, "encoder", "N", d.N);
    c.encoder.d_state = field<std::size_t>(e, "encoder", "d_state", d.d_state);
    c.encoder.d_conv = field<std::size_t>(e, "encoder", "d_conv", d.d_conv);
    c.encoder.expand = field<std::size_t>(e, "encoder", "expand", d.expand);
    c.encoder.variant =
        parse_variant(field<std::string>(e, "encoder", "variant", to_string(d.variant)));
    c.encoder.pooling =
        parse_pooling(field<std::string>(e, "encoder", "pooling", to_string(d.pooling)));
    c.encoder.knorm_per_channel =
        field<bool>(e, "encoder", "knorm_per_channel", d.knorm_per_channel);
    c.encoder.head_dropout = field<double>(e, "encoder", "head_dropout", d.head_dropout);
  }
  if (root.contains("train")) {
    const json& t = root.at("train");
    if (!t.is_object()) throw ValidationError("config: key train: must be an object");
    reject_unknown(t, "train",
                   {"epochs", "batch", "lr", "lr_min", "warmup", "weight_decay",
                    "beta1", "beta2", "adam_eps", "augment", "mask_lo", "mask_hi",
                    "decoder_depth"});
    c.epochs = field<std::size_t>(t, "train", "epochs", c.epochs);
    c.batch = field<std::size_t>(t, "train", "batch", c.batch);
    c.lr = field<double>(t, "train", "lr", c.lr);
    c.lr_min = field<double>(t, "train", "lr_min", c.lr_min);
    c.warmup = field<std::size_t>(t, "train", "warmup", c.warmup);
    c.weight_decay = field<double>(t, "train", "weight_decay", c.weight_decay);
    c.beta1 = field<double>(t, "train", "beta1", c.beta1);
    c.beta2 = field<double>(t, "train", "beta2", c.beta2);
    c.adam_eps = field<double>(t, "train", "adam_eps", c.adam_eps);
    c.augment = field<bool>(t, "train", "augment", c.augment);
    c.mask_lo = field<double>(t, "train", "mask_lo", c.mask_lo);
    c.mask_hi = field<double>(t, "train", "mask_hi", c.mask_hi);
    c.decoder_depth = field<std::size_t>(t, "train", "decoder_depth", c.decoder_depth);
  }
  c.seed = field<std::uint64_t>(root, "", "seed", c.seed);
  c.data = field<std::string>(root, "", "data", c.data);
  c.out = field<std::string>(root, "", "out", c.out);
  c.init = field<std::string>(root, "", "init", c.init);

  if (c.batch == 0) throw ValidationError("config: train.batch must be positive");
  if (c.mask_lo < 0 || c.mask_hi > 1 || c.mask_lo > c.mask_hi)
    throw ValidationError("config: train.mask_lo/mask_hi must satisfy 0 <= lo <= hi <= 1");
  if (c.decoder_depth == 0)
    throw ValidationError("config: train.decoder_depth must be positive");
  return c;
}

std::string serialize_run_config(const RunConfig& c) {
  json root = {
      {"encoder",
       {{"T", c.encoder.T},
        {"C", c.encoder.C},
        {"k", c.encoder.k},
        {"L", c.encoder.L},
        {"K", c.encoder.K},
        {"N", c.encoder.N},
        {"d_state", c.encoder.d_state},
        {"d_conv", c.encoder.d_conv},
        {"expand", c.encoder.expand},
        {"variant", to_string(c.encoder.variant)},
        {"pooling", to_string(c.encoder.pooling)},
        {"knorm_per_channel", c.encoder.knorm_per_channel},
        {"head_dropout", c.encoder.head_dropout}}},
      {"train",
       {{"epochs", c.epochs},
        {"batch", c.batch},
        {"lr", c.lr},
        {"lr_min", c.lr_min},
        {"warmup", c.warmup},
        {"weight_decay", c.weight_decay},
        {"beta1", c.beta1},
        {"beta2", c.beta2},
        {"adam_eps", c.adam_eps},
        {"augment", c.augment},
        {"mask_lo", c.mask_lo},
        {"mask_hi", c.mask_hi},
        {"decoder_depth", c.decoder_depth}}},
      {"seed", c.seed},
      {"data", c.data},
      {"out", c.out},
      {"init", c.init}};
  return root.dump(2) + "\n";
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return parse_run_config(text);
}

void save_run_config(const std::string& path, const RunConfig& cfg) {
  namespace fs = std::filesystem;
  fs::path target(path);
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("config: cannot write " + tmp.string());
    out << serialize_run_config(cfg);
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) throw IoError("config: cannot rename " + tmp.string() + ": " + ec.message());
}

void apply_env_seed(RunConfig& cfg) {
  const char* env = std::getenv("M3D_SEED");
  if (!env || !*env) return;
  char* end = nullptr;
  unsigned long long v = std::strtoull(env, &end, 10);
  if (end == env || *end != '\0')
    throw ValidationError(std::string("M3D_SEED is not a number: ") + env);
  cfg.seed = v;
}

}  // namespace m3d
