#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dove/common.hpp"
#include "dove/denoiser.hpp"
#include "dove/losses.hpp"
#include "dove/optimizer.hpp"
#include "dove/rng.hpp"
#include "dove/schedule.hpp"
#include "dove/vae.hpp"

namespace dove {

using json = nlohmann::ordered_json;

struct DiffusionSection {
  int64_t timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  int64_t t_star = 399;
};

struct ModelSection {
  int64_t latent_channels = 8;
  int64_t vae_f = 4;
  int64_t vae_base_width = 16;
  int64_t vae_max_width = 64;
  int64_t width = 128;
  int64_t blocks = 2;
  int64_t heads = 4;
  int64_t patch = 2;
  int64_t mlp_ratio = 4;
  bool temporal_attention = true;
  int64_t max_tokens = 8192;
};

struct LossSection {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  int64_t extractor_seed = 77;
};

struct TrainSection {
  int64_t stage = 1;
  double phi = 0.8;
  int64_t iters = 0;  // 0 = stage-dependent default
  double lr = 1e-4;
  int64_t batch_size = 2;
  int64_t clip_frames = 9;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  int64_t log_every = 1;
  int64_t checkpoint_every = 0;  // 0 = final only
};

struct DegradeSection {
  double blur_sigma_min = 0.2, blur_sigma_max = 3.0;
  double blur2_sigma_min = 0.2, blur2_sigma_max = 1.5;
  double aniso_prob = 0.5;
  double resize_min = 0.5, resize_max = 1.5;
  double resize2_min = 0.8, resize2_max = 1.2;
  double noise_sigma_min = 0.0, noise_sigma_max = 0.06;
  double noise2_sigma_min = 0.0, noise2_sigma_max = 0.03;
  double signal_dependent_prob = 0.4;
  double quality_min = 30, quality_max = 95;
  double quality2_min = 50, quality2_max = 100;
  int64_t scale = 4;
};

struct ScorerSpec {
  std::string name;
  std::string command;  // empty = built-in proxy
  double threshold = 0.0;
};

struct CurateSection {
  int64_t min_short_side = 720;
  int64_t min_frames = 50;
  double scene_threshold = 0.08;
  int64_t scene_downscale = 16;
  double sharpness_min = 0.0;
  double contrast_min = 0.0;
  double colorfulness_min = 0.0;
  double tau = 1.0;
  int64_t padding = 16;
  int64_t min_crop_short_side = 720;
  std::vector<ScorerSpec> scorers;
  int64_t plugin_timeout_ms = 60000;
  int64_t jobs = 1;
};

struct EvalSection {
  std::vector<std::string> metrics{"psnr", "ssim", "warp"};
};

struct IoSection {
  std::string train_lr;
  std::string train_hr;
  std::string image_lr;
  std::string image_hr;
  std::string out_dir;
};

struct RunConfig {
  int64_t seed = 0;
  DiffusionSection diffusion;
  ModelSection model;
  LossSection loss;
  TrainSection train;
  DegradeSection degrade;
  CurateSection curate;
  EvalSection eval;
  IoSection io;

  void validate() const;
  json to_json() const;
  json model_json() const;
  std::string fingerprint() const;
  std::string model_fingerprint() const;

  VaeConfig vae_config() const {
    VaeConfig c;
    c.latent_channels = model.latent_channels;
    c.downsample_factor = model.vae_f;
    c.base_width = model.vae_base_width;
    c.max_width = model.vae_max_width;
    return c;
  }
  DenoiserConfig denoiser_config() const {
    DenoiserConfig c;
    c.width = model.width;
    c.blocks = model.blocks;
    c.heads = model.heads;
    c.patch = model.patch;
    c.mlp_ratio = model.mlp_ratio;
    c.latent_channels = model.latent_channels;
    c.timesteps = diffusion.timesteps;
    c.max_tokens = model.max_tokens;
    c.temporal_attention = model.temporal_attention;
    return c;
  }
  NoiseSchedule schedule() const {
    return make_schedule(diffusion.timesteps, diffusion.beta_start, diffusion.beta_end);
  }
  AdamWConfig adamw_config() const {
    AdamWConfig c;
    c.lr = train.lr;
    c.beta1 = train.beta1;
    c.beta2 = train.beta2;
    c.weight_decay = train.weight_decay;
    c.clip_norm = train.grad_clip;
    return c;
  }
  LossWeights loss_weights() const { return LossWeights{loss.lambda1, loss.lambda2}; }
  int64_t effective_iters() const {
    if (train.iters > 0) return train.iters;
    return train.stage == 2 ? 200 : 2000;
  }
};

namespace detail {

// Tracks consumed keys so leftovers can be reported by full path.
class SectionReader {
 public:
  SectionReader(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError(prefix_.empty() ? "<root>" : prefix_, "must be an object");
  }

  bool has(const std::string& key) {
    return j_.contains(key);
  }
  std::string path(const std::string& key) const {
    return prefix_.empty() ? key : prefix_ + "." + key;
  }
  const json* take(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void number(const std::string& key, double& out) {
    const json* v = take(key);
    if (!v) return;
    if (!v->is_number()) throw ConfigError(path(key), "expected a number");
    out = v->get<double>();
  }
  void integer(const std::string& key, int64_t& out) {
    const json* v = take(key);
    if (!v) return;
    if (v->is_number_integer()) {
      out = v->get<int64_t>();
      return;
    }
    if (v->is_number_float()) {
      double d = v->get<double>();
      if (d == static_cast<double>(static_cast<int64_t>(d))) {
        out = static_cast<int64_t>(d);
        return;
      }
    }
    throw ConfigError(path(key), "expected an integer");
  }
  void boolean(const std::string& key, bool& out) {
    const json* v = take(key);
    if (!v) return;
    if (!v->is_boolean()) throw ConfigError(path(key), "expected a boolean");
    out = v->get<bool>();
  }
  void text(const std::string& key, std::string& out) {
    const json* v = take(key);
    if (!v) return;
    if (!v->is_string()) throw ConfigError(path(key), "expected a string");
    out = v->get<std::string>();
  }
  void string_list(const std::string& key, std::vector<std::string>& out) {
    const json* v = take(key);
    if (!v) return;
    if (!v->is_array()) throw ConfigError(path(key), "expected an array of strings");
    out.clear();
    for (const auto& e : *v) {
      if (!e.is_string()) throw ConfigError(path(key), "expected an array of strings");
      out.push_back(e.get<std::string>());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(path(it.key()), "unknown key");
  }

 private:
  const json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

inline void check_range(const char* key, double v, double lo, double hi) {
  if (!(v >= lo && v <= hi)) {
    std::ostringstream os;
    os << "must be in [" << lo << "," << hi << "], got " << v;
    throw ConfigError(key, os.str());
  }
}

inline void check_min_max(const char* key, double lo, double hi, double floor_v) {
  if (lo < floor_v) throw ConfigError(key, "range minimum below " + std::to_string(floor_v));
  if (hi < lo) throw ConfigError(key, "range maximum below minimum");
}

}  // namespace detail

inline void RunConfig::validate() const {
  if (diffusion.timesteps < 1) throw ConfigError("diffusion.timesteps", "must be >= 1");
  if (!(diffusion.beta_start > 0 && diffusion.beta_start < 1))
    throw ConfigError("diffusion.beta_start", "must be in (0,1)");
  if (!(diffusion.beta_end >= diffusion.beta_start && diffusion.beta_end < 1))
    throw ConfigError("diffusion.beta_end", "must be in [beta_start,1)");
  if (diffusion.t_star < 1 || diffusion.t_star > diffusion.timesteps)
    throw ConfigError("diffusion.t_star", "must be in [1,timesteps]");

  vae_config().validate();
  denoiser_config().validate();

  if (loss.lambda1 < 0) throw ConfigError("loss.lambda1", "must be >= 0");
  if (loss.lambda2 < 0) throw ConfigError("loss.lambda2", "must be >= 0");

  if (train.stage != 1 && train.stage != 2) throw ConfigError("train.stage", "must be 1 or 2");
  detail::check_range("train.phi", train.phi, 0.0, 1.0);
  if (train.iters < 0) throw ConfigError("train.iters", "must be >= 0");
  if (train.lr < 0) throw ConfigError("train.lr", "must be >= 0");
  if (train.batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
  if (train.clip_frames < 1) throw ConfigError("train.clip_frames", "must be >= 1");
  detail::check_range("train.beta1", train.beta1, 0.0, 0.999999);
  detail::check_range("train.beta2", train.beta2, 0.0, 0.999999);
  if (train.weight_decay < 0) throw ConfigError("train.weight_decay", "must be >= 0");
  if (train.log_every < 1) throw ConfigError("train.log_every", "must be >= 1");
  if (train.checkpoint_every < 0) throw ConfigError("train.checkpoint_every", "must be >= 0");

  detail::check_min_max("degrade.blur_sigma", degrade.blur_sigma_min, degrade.blur_sigma_max, 0);
  detail::check_min_max("degrade.blur2_sigma", degrade.blur2_sigma_min, degrade.blur2_sigma_max, 0);
  detail::check_range("degrade.aniso_prob", degrade.aniso_prob, 0, 1);
  if (degrade.resize_min <= 0 || degrade.resize2_min <= 0)
    throw ConfigError("degrade.resize_min", "resize factors must be > 0");
  detail::check_min_max("degrade.resize", degrade.resize_min, degrade.resize_max, 1e-6);
  detail::check_min_max("degrade.resize2", degrade.resize2_min, degrade.resize2_max, 1e-6);
  detail::check_min_max("degrade.noise_sigma", degrade.noise_sigma_min, degrade.noise_sigma_max, 0);
  detail::check_min_max("degrade.noise2_sigma", degrade.noise2_sigma_min, degrade.noise2_sigma_max, 0);
  detail::check_range("degrade.signal_dependent_prob", degrade.signal_dependent_prob, 0, 1);
  detail::check_min_max("degrade.quality", degrade.quality_min, degrade.quality_max, 1);
  detail::check_min_max("degrade.quality2", degrade.quality2_min, degrade.quality2_max, 1);
  if (degrade.quality_max > 100) throw ConfigError("degrade.quality_max", "must be <= 100");
  if (degrade.quality2_max > 100) throw ConfigError("degrade.quality2_max", "must be <= 100");
  if (degrade.scale < 1) throw ConfigError("degrade.scale", "must be >= 1");

  if (curate.min_short_side < 1) throw ConfigError("curate.min_short_side", "must be >= 1");
  if (curate.min_frames < 2) throw ConfigError("curate.min_frames", "must be >= 2");
  if (curate.scene_threshold < 0) throw ConfigError("curate.scene_threshold", "must be >= 0");
  if (curate.scene_downscale < 1) throw ConfigError("curate.scene_downscale", "must be >= 1");
  detail::check_range("curate.sharpness_min", curate.sharpness_min, 0, 1);
  detail::check_range("curate.contrast_min", curate.contrast_min, 0, 1);
  detail::check_range("curate.colorfulness_min", curate.colorfulness_min, 0, 1);
  if (curate.tau < 0) throw ConfigError("curate.tau", "must be >= 0");
  if (curate.padding < 0) throw ConfigError("curate.padding", "must be >= 0");
  if (curate.min_crop_short_side < 1) throw ConfigError("curate.min_crop_short_side", "must be >= 1");
  for (const auto& s : curate.scorers) {
    if (s.name.empty()) throw ConfigError("curate.scorers", "scorer name must be nonempty");
    detail::check_range("curate.scorers.threshold", s.threshold, 0, 1);
  }
  if (curate.plugin_timeout_ms < 1) throw ConfigError("curate.plugin_timeout_ms", "must be >= 1");
  if (curate.jobs < 1) throw ConfigError("curate.jobs", "must be >= 1");

  for (const auto& m : eval.metrics)
    if (m != "psnr" && m != "ssim" && m != "warp")
      throw ConfigError("eval.metrics", "unknown metric '" + m + "'");
}

inline json RunConfig::model_json() const {
  json m;
  m["model"] = {{"latent_channels", model.latent_channels},
                {"vae_f", model.vae_f},
                {"vae_base_width", model.vae_base_width},
                {"vae_max_width", model.vae_max_width},
                {"width", model.width},
                {"blocks", model.blocks},
                {"heads", model.heads},
                {"patch", model.patch},
                {"mlp_ratio", model.mlp_ratio}};
  m["diffusion"] = {{"timesteps", diffusion.timesteps},
                    {"beta_start", diffusion.beta_start},
                    {"beta_end", diffusion.beta_end}};
  return m;
}

inline json RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["diffusion"] = {{"timesteps", diffusion.timesteps},
                    {"beta_start", diffusion.beta_start},
                    {"beta_end", diffusion.beta_end},
                    {"t_star", diffusion.t_star}};
  j["model"] = model_json()["model"];
  j["model"]["temporal_attention"] = model.temporal_attention;
  j["model"]["max_tokens"] = model.max_tokens;
  j["loss"] = {{"lambda1", loss.lambda1},
               {"lambda2", loss.lambda2},
               {"extractor_seed", loss.extractor_seed}};
  j["train"] = {{"stage", train.stage},
                {"phi", train.phi},
                {"iters", train.iters},
                {"lr", train.lr},
                {"batch_size", train.batch_size},
                {"clip_frames", train.clip_frames},
                {"beta1", train.beta1},
                {"beta2", train.beta2},
                {"weight_decay", train.weight_decay},
                {"grad_clip", train.grad_clip},
                {"log_every", train.log_every},
                {"checkpoint_every", train.checkpoint_every}};
  j["degrade"] = {{"blur_sigma_min", degrade.blur_sigma_min},
                  {"blur_sigma_max", degrade.blur_sigma_max},
                  {"blur2_sigma_min", degrade.blur2_sigma_min},
                  {"blur2_sigma_max", degrade.blur2_sigma_max},
                  {"aniso_prob", degrade.aniso_prob},
                  {"resize_min", degrade.resize_min},
                  {"resize_max", degrade.resize_max},
                  {"resize2_min", degrade.resize2_min},
                  {"resize2_max", degrade.resize2_max},
                  {"noise_sigma_min", degrade.noise_sigma_min},
                  {"noise_sigma_max", degrade.noise_sigma_max},
                  {"noise2_sigma_min", degrade.noise2_sigma_min},
                  {"noise2_sigma_max", degrade.noise2_sigma_max},
                  {"signal_dependent_prob", degrade.signal_dependent_prob},
                  {"quality_min", degrade.quality_min},
                  {"quality_max", degrade.quality_max},
                  {"quality2_min", degrade.quality2_min},
                  {"quality2_max", degrade.quality2_max},
                  {"scale", degrade.scale}};
  json scorers = json::array();
  for (const auto& s : curate.scorers)
    scorers.push_back({{"name", s.name}, {"command", s.command}, {"threshold", s.threshold}});
  j["curate"] = {{"min_short_side", curate.min_short_side},
                 {"min_frames", curate.min_frames},
                 {"scene_threshold", curate.scene_threshold},
                 {"scene_downscale", curate.scene_downscale},
                 {"sharpness_min", curate.sharpness_min},
                 {"contrast_min", curate.contrast_min},
                 {"colorfulness_min", curate.colorfulness_min},
                 {"tau", curate.tau},
                 {"padding", curate.padding},
                 {"min_crop_short_side", curate.min_crop_short_side},
                 {"scorers", scorers},
                 {"plugin_timeout_ms", curate.plugin_timeout_ms},
                 {"jobs", curate.jobs}};
  j["eval"] = {{"metrics", eval.metrics}};
  j["io"] = {{"train_lr", io.train_lr},
             {"train_hr", io.train_hr},
             {"image_lr", io.image_lr},
             {"image_hr", io.image_hr},
             {"out_dir", io.out_dir}};
  return j;
}

inline std::string fingerprint_hex(uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[h & 0xf];
    h >>= 4;
  }
  return s;
}

inline std::string RunConfig::fingerprint() const {
  return fingerprint_hex(Rng::hash_tag(to_json().dump()));
}

inline std::string RunConfig::model_fingerprint() const {
  return fingerprint_hex(Rng::hash_tag(model_json().dump()));
}

inline RunConfig parse_config_json(const json& root) {
  RunConfig cfg;
  detail::SectionReader top(root, "");
  top.integer("seed", cfg.seed);

  if (const json* s = top.take("diffusion")) {
    detail::SectionReader r(*s, "diffusion");
    r.integer("timesteps", cfg.diffusion.timesteps);
    r.number("beta_start", cfg.diffusion.beta_start);
    r.number("beta_end", cfg.diffusion.beta_end);
    r.integer("t_star", cfg.diffusion.t_star);
    r.finish();
  }
  if (const json* s = top.take("model")) {
    detail::SectionReader r(*s, "model");
    r.integer("latent_channels", cfg.model.latent_channels);
    r.integer("vae_f", cfg.model.vae_f);
    r.integer("vae_base_width", cfg.model.vae_base_width);
    r.integer("vae_max_width", cfg.model.vae_max_width);
    r.integer("width", cfg.model.width);
    r.integer("blocks", cfg.model.blocks);
    r.integer("heads", cfg.model.heads);
    r.integer("patch", cfg.model.patch);
    r.integer("mlp_ratio", cfg.model.mlp_ratio);
    r.boolean("temporal_attention", cfg.model.temporal_attention);
    r.integer("max_tokens", cfg.model.max_tokens);
    r.finish();
  }
  if (const json* s = top.take("loss")) {
    detail::SectionReader r(*s, "loss");
    r.number("lambda1", cfg.loss.lambda1);
    r.number("lambda2", cfg.loss.lambda2);
    r.integer("extractor_seed", cfg.loss.extractor_seed);
    r.finish();
  }
  if (const json* s = top.take("train")) {
    detail::SectionReader r(*s, "train");
    r.integer("stage", cfg.train.stage);
    r.number("phi", cfg.train.phi);
    r.integer("iters", cfg.train.iters);
    r.number("lr", cfg.train.lr);
    r.integer("batch_size", cfg.train.batch_size);
    r.integer("clip_frames", cfg.train.clip_frames);
    r.number("beta1", cfg.train.beta1);
    r.number("beta2", cfg.train.beta2);
    r.number("weight_decay", cfg.train.weight_decay);
    r.number("grad_clip", cfg.train.grad_clip);
    r.integer("log_every", cfg.train.log_every);
    r.integer("checkpoint_every", cfg.train.checkpoint_every);
    r.finish();
  }
  if (const json* s = top.take("degrade")) {
    detail::SectionReader r(*s, "degrade");
    r.number("blur_sigma_min", cfg.degrade.blur_sigma_min);
    r.number("blur_sigma_max", cfg.degrade.blur_sigma_max);
    r.number("blur2_sigma_min", cfg.degrade.blur2_sigma_min);
    r.number("blur2_sigma_max", cfg.degrade.blur2_sigma_max);
    r.number("aniso_prob", cfg.degrade.aniso_prob);
    r.number("resize_min", cfg.degrade.resize_min);
    r.number("resize_max", cfg.degrade.resize_max);
    r.number("resize2_min", cfg.degrade.resize2_min);
    r.number("resize2_max", cfg.degrade.resize2_max);
    r.number("noise_sigma_min", cfg.degrade.noise_sigma_min);
    r.number("noise_sigma_max", cfg.degrade.noise_sigma_max);
    r.number("noise2_sigma_min", cfg.degrade.noise2_sigma_min);
    r.number("noise2_sigma_max", cfg.degrade.noise2_sigma_max);
    r.number("signal_dependent_prob", cfg.degrade.signal_dependent_prob);
    r.number("quality_min", cfg.degrade.quality_min);
    r.number("quality_max", cfg.degrade.quality_max);
    r.number("quality2_min", cfg.degrade.quality2_min);
    r.number("quality2_max", cfg.degrade.quality2_max);
    r.integer("scale", cfg.degrade.scale);
    r.finish();
  }
  if (const json* s = top.take("curate")) {
    detail::SectionReader r(*s, "curate");
    r.integer("min_short_side", cfg.curate.min_short_side);
    r.integer("min_frames", cfg.curate.min_frames);
    r.number("scene_threshold", cfg.curate.scene_threshold);
    r.integer("scene_downscale", cfg.curate.scene_downscale);
    r.number("sharpness_min", cfg.curate.sharpness_min);
    r.number("contrast_min", cfg.curate.contrast_min);
    r.number("colorfulness_min", cfg.curate.colorfulness_min);
    r.number("tau", cfg.curate.tau);
    r.integer("padding", cfg.curate.padding);
    r.integer("min_crop_short_side", cfg.curate.min_crop_short_side);
    if (const json* sc = r.take("scorers")) {
      if (!sc->is_array()) throw ConfigError("curate.scorers", "expected an array");
      cfg.curate.scorers.clear();
      for (const auto& e : *sc) {
        detail::SectionReader er(e, "curate.scorers");
        ScorerSpec spec;
        er.text("name", spec.name);
        er.text("command", spec.command);
        er.number("threshold", spec.threshold);
        er.finish();
        cfg.curate.scorers.push_back(std::move(spec));
      }
    }
    r.integer("plugin_timeout_ms", cfg.curate.plugin_timeout_ms);
    r.integer("jobs", cfg.curate.jobs);
    r.finish();
  }
  if (const json* s = top.take("eval")) {
    detail::SectionReader r(*s, "eval");
    r.string_list("metrics", cfg.eval.metrics);
    r.finish();
  }
  if (const json* s = top.take("io")) {
    detail::SectionReader r(*s, "io");
    r.text("train_lr", cfg.io.train_lr);
    r.text("train_hr", cfg.io.train_hr);
    r.text("image_lr", cfg.io.image_lr);
    r.text("image_hr", cfg.io.image_hr);
    r.text("out_dir", cfg.io.out_dir);
    r.finish();
  }
  top.finish();
  cfg.validate();
  return cfg;
}

inline RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  std::string text = ss.str();
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) text = "{}";
  json root;
  try {
    root = json::parse(text);
  } catch (const std::exception& e) {
    throw ConfigError(path, std::string("invalid structured text: ") + e.what());
  }
  return parse_config_json(root);
}

}  // namespace dove
