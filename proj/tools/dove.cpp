// dove — command-line front end for the one-step video restoration toolkit.
//
// Subcommands: curate, degrade, train, restore, eval.
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
// The DOVE_SEED environment variable overrides the configured seed.
// Every run writes a run_record.json (config fingerprint, seed, versions,
// timings) into its output directory. Inputs are never modified.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dove/checkpoint.hpp"
#include "dove/config.hpp"
#include "dove/curator.hpp"
#include "dove/degradation.hpp"
#include "dove/media_io.hpp"
#include "dove/metrics.hpp"
#include "dove/restorer.hpp"
#include "dove/trainer.hpp"

namespace fs = std::filesystem;
using dove::json;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Shared plumbing

dove::RunConfig load_config_file(const std::string& path) {
  if (!fs::exists(path))
    throw dove::ConfigError("config", "file not found: " + path);
  return dove::parse_config(path);
}

// Returns the DOVE_SEED override when the variable is set; rejects non-integer
// values so a typo fails loudly instead of silently using the config seed.
std::optional<int64_t> env_seed_override() {
  const char* v = std::getenv("DOVE_SEED");
  if (!v) return std::nullopt;
  std::string s(v);
  try {
    size_t pos = 0;
    int64_t parsed = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return parsed;
  } catch (const std::exception&) {
    throw dove::ConfigError("DOVE_SEED", "must be an integer, got '" + s + "'");
  }
}

class RunRecord {
 public:
  RunRecord(std::string subcommand, fs::path dir)
      : subcommand_(std::move(subcommand)),
        dir_(std::move(dir)),
        t0_(std::chrono::steady_clock::now()) {}

  void set_fingerprint(std::string fp) { fingerprint_ = std::move(fp); }
  void set_seed(int64_t seed) { seed_ = seed; }
  void note(const std::string& key, double seconds) { phases_.emplace_back(key, seconds); }

  // Written only after the subcommand's real outputs succeeded, so a crash
  // never leaves a record claiming a run that produced nothing.
  void write() const {
    double total =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    ordered_json timings;
    timings["total_seconds"] = total;
    for (const auto& [k, v] : phases_) timings[k] = v;
    ordered_json rec;
    rec["subcommand"] = subcommand_;
    rec["config_fingerprint"] = fingerprint_;
    rec["seed"] = seed_;
    rec["versions"] = {{"dove", kVersion},
                       {"checkpoint_format", dove::detail::kCkptVersion},
                       {"compiler", __VERSION__}};
    rec["timings"] = timings;
    fs::create_directories(dir_);
    std::ofstream out(dir_ / "run_record.json");
    if (!out) throw dove::IoError("cannot write run record in " + dir_.string());
    out << rec.dump(2) << "\n";
  }

  double elapsed() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  std::string subcommand_;
  fs::path dir_;
  std::chrono::steady_clock::time_point t0_;
  std::string fingerprint_;
  int64_t seed_ = 0;
  std::vector<std::pair<std::string, double>> phases_;
};

std::vector<std::string> split_csv(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    size_t a = item.find_first_not_of(" \t");
    size_t b = item.find_last_not_of(" \t");
    if (a == std::string::npos) continue;
    out.push_back(item.substr(a, b - a + 1));
  }
  return out;
}

std::string pad_step(uint64_t step) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%08llu", static_cast<unsigned long long>(step));
  return buf;
}

// ---------------------------------------------------------------------------
// curate

struct CurateArgs {
  std::string input, output, config;
  int64_t jobs = 0;  // 0 = keep config value
};

int run_curate(const CurateArgs& a) {
  RunRecord record("curate", a.output);
  dove::RunConfig cfg = load_config_file(a.config);
  if (auto s = env_seed_override()) cfg.seed = *s;
  if (a.jobs > 0) cfg.curate.jobs = a.jobs;
  cfg.validate();
  record.set_fingerprint(cfg.fingerprint());
  record.set_seed(cfg.seed);

  dove::CurationManifest manifest = dove::run_pipeline(a.input, a.output, cfg.curate);
  dove::write_manifest(manifest, fs::path(a.output) / "manifest.json");

  int64_t accepted = 0;
  for (const auto& r : manifest.records) accepted += r.accepted ? 1 : 0;
  std::cout << "curate: " << accepted << "/" << manifest.records.size()
            << " clips accepted; manifest written to "
            << (fs::path(a.output) / "manifest.json").string() << "\n";
  record.write();
  return 0;
}

// ---------------------------------------------------------------------------
// degrade

struct DegradeArgs {
  std::string input, output, config;
  int64_t seed = 0;
};

int run_degrade(const DegradeArgs& a) {
  RunRecord record("degrade", a.output);
  dove::RunConfig cfg = load_config_file(a.config);
  cfg.validate();
  int64_t seed = a.seed;
  if (auto s = env_seed_override()) seed = *s;
  record.set_fingerprint(cfg.fingerprint());
  record.set_seed(seed);

  std::vector<fs::path> clips = dove::list_clip_dirs(a.input);
  if (clips.empty()) throw dove::DataError("degrade: no clips found under " + a.input);
  fs::create_directories(a.output);

  for (const fs::path& dir : clips) {
    const std::string name = dir.filename().string();
    // Each clip gets its own recipe stream derived from the run seed and the
    // clip name, so adding or removing clips never shifts the others.
    int64_t clip_seed = static_cast<int64_t>(
        dove::Rng::mix(static_cast<uint64_t>(seed), dove::Rng::hash_tag(name)));
    dove::DegradationRecipe recipe = dove::make_recipe(cfg.degrade, clip_seed);
    dove::VideoClip hq = dove::read_clip(dir);
    dove::VideoClip lq = dove::apply_degradation(hq, recipe);
    fs::path out_dir = fs::path(a.output) / name;
    dove::write_clip(lq, out_dir, /*force=*/true);
    std::ofstream rf(out_dir / "recipe.json");
    if (!rf) throw dove::IoError("cannot write recipe for clip " + name);
    rf << recipe.to_json().dump(2) << "\n";
    std::cout << "degrade: " << name << " " << hq.width() << "x" << hq.height() << " -> "
              << lq.width() << "x" << lq.height() << "\n";
  }
  record.write();
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string stage = "1";
  std::string config;
  std::string resume;
};

// Loads LR/HR clip pairs matched by directory name from the two roots.
dove::Dataset load_pairs(const std::string& lr_root, const std::string& hr_root,
                         const char* what) {
  std::vector<fs::path> lr_dirs = dove::list_clip_dirs(lr_root);
  if (lr_dirs.empty())
    throw dove::DataError(std::string(what) + ": no clips found under " + lr_root);
  dove::Dataset data;
  for (const fs::path& dir : lr_dirs) {
    fs::path hr_dir = fs::path(hr_root) / dir.filename();
    if (!fs::exists(hr_dir / "meta.json"))
      throw dove::DataError(std::string(what) + ": no matching reference clip for " +
                            dir.filename().string() + " under " + hr_root);
    dove::TrainSample s;
    s.lr = dove::read_clip(dir);
    s.hr = dove::read_clip(hr_dir);
    data.push_back(std::move(s));
  }
  return data;
}

int run_train(const TrainArgs& a) {
  dove::RunConfig cfg = load_config_file(a.config);
  if (a.stage != "vae" && a.stage != "1" && a.stage != "2")
    throw dove::ConfigError("train.stage", "must be one of vae, 1, 2; got '" + a.stage + "'");
  cfg.train.stage = (a.stage == "2") ? 2 : 1;
  if (auto s = env_seed_override()) cfg.seed = *s;
  cfg.validate();
  if (cfg.io.out_dir.empty())
    throw dove::ConfigError("io.out_dir", "required: train writes logs and checkpoints there");
  if (cfg.io.train_lr.empty() || cfg.io.train_hr.empty())
    throw dove::ConfigError("io.train_lr/train_hr", "required: train reads clip pairs from them");

  const std::string stage_tag = (a.stage == "vae") ? "vae" : ("stage" + a.stage);
  fs::path out_dir(cfg.io.out_dir);
  RunRecord record("train", out_dir);
  record.set_fingerprint(cfg.fingerprint());
  record.set_seed(cfg.seed);
  fs::create_directories(out_dir);

  dove::Dataset videos = load_pairs(cfg.io.train_lr, cfg.io.train_hr, "train");
  dove::Dataset images;
  bool has_images = !cfg.io.image_lr.empty() && !cfg.io.image_hr.empty();
  if (has_images) images = load_pairs(cfg.io.image_lr, cfg.io.image_hr, "train (images)");
  record.note("load_seconds", record.elapsed());

  dove::Trainer trainer(cfg);
  if (!a.resume.empty()) {
    dove::CheckpointData ckpt = dove::load_checkpoint(a.resume);
    trainer.load_resume(ckpt, stage_tag);
    std::cout << "train: resumed from " << a.resume << " at step " << trainer.step() << "\n";
  }

  std::ofstream log(out_dir / ("train_" + stage_tag + ".jsonl"),
                    a.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw dove::IoError("cannot open training log in " + out_dir.string());
  trainer.set_log(&log);
  trainer.set_checkpoint_sink([&](const dove::CheckpointData& c) {
    dove::save_checkpoint(c, out_dir / ("ckpt_" + stage_tag + "_" + pad_step(c.step) + ".dove"));
  });

  int64_t iters = cfg.effective_iters();
  dove::CheckpointData last;
  if (a.stage == "vae") {
    last = trainer.run_vae_stage(videos, iters);
  } else if (a.stage == "1") {
    last = trainer.train_stage1(videos, iters);
  } else {
    last = trainer.train_stage2(videos, has_images ? &images : nullptr, iters);
  }
  fs::path final_path = out_dir / ("ckpt_" + stage_tag + "_final.dove");
  dove::save_checkpoint(last, final_path);
  std::cout << "train: stage " << a.stage << " finished at step " << last.step
            << "; checkpoint " << final_path.string() << "\n";
  record.write();
  return 0;
}

// ---------------------------------------------------------------------------
// restore

struct RestoreArgs {
  std::string input, output, checkpoint, config;
  int64_t t_star = 399;
  bool t_star_set = false;
  int64_t scale = 4;
};

// Rebuilds the model sections a checkpoint was trained with. Fields that do
// not affect the weights (token budget, attention toggle) keep base values.
void apply_manifest_model(dove::RunConfig& rc, const ordered_json& m) {
  if (!m.contains("model") || !m.contains("diffusion"))
    throw dove::CorruptionError("checkpoint manifest lacks model/diffusion sections");
  const auto& mm = m.at("model");
  auto& mo = rc.model;
  mo.latent_channels = mm.value("latent_channels", mo.latent_channels);
  mo.vae_f = mm.value("vae_f", mo.vae_f);
  mo.vae_base_width = mm.value("vae_base_width", mo.vae_base_width);
  mo.vae_max_width = mm.value("vae_max_width", mo.vae_max_width);
  mo.width = mm.value("width", mo.width);
  mo.blocks = mm.value("blocks", mo.blocks);
  mo.heads = mm.value("heads", mo.heads);
  mo.patch = mm.value("patch", mo.patch);
  mo.mlp_ratio = mm.value("mlp_ratio", mo.mlp_ratio);
  const auto& dd = m.at("diffusion");
  rc.diffusion.timesteps = dd.value("timesteps", rc.diffusion.timesteps);
  rc.diffusion.beta_start = dd.value("beta_start", rc.diffusion.beta_start);
  rc.diffusion.beta_end = dd.value("beta_end", rc.diffusion.beta_end);
}

int run_restore(const RestoreArgs& a) {
  RunRecord record("restore", a.output);
  dove::CheckpointData ckpt = dove::load_checkpoint(a.checkpoint);

  dove::RunConfig rc;
  if (!a.config.empty()) {
    rc = load_config_file(a.config);
    rc.validate();
    if (rc.model_fingerprint() != ckpt.fingerprint)
      throw dove::IncompatibilityError("checkpoint fingerprint " + ckpt.fingerprint +
                                       " does not match configured model " +
                                       rc.model_fingerprint());
  }
  apply_manifest_model(rc, ckpt.model);
  if (rc.model_fingerprint() != ckpt.fingerprint)
    throw dove::IncompatibilityError(
        "checkpoint fingerprint " + ckpt.fingerprint +
        " does not match its own model manifest (" + rc.model_fingerprint() +
        "); the file is inconsistent");
  if (ckpt.model.value("stage", std::string()) == "vae")
    throw dove::IncompatibilityError(
        "checkpoint holds only autoencoder weights; restoration needs a denoiser");

  int64_t t_star = a.t_star_set ? a.t_star : (!a.config.empty() ? rc.diffusion.t_star : 399);
  if (t_star < 0 || t_star >= rc.diffusion.timesteps)
    throw dove::ConfigError("restore.t_star", "must lie in [0, " +
                                                  std::to_string(rc.diffusion.timesteps) + ")");
  if (a.scale < 1) throw dove::ConfigError("restore.scale", "must be >= 1");
  record.set_fingerprint(ckpt.fingerprint);
  if (auto s = env_seed_override()) record.set_seed(*s);

  dove::Restorer<float> r;
  r.vae.cfg = rc.vae_config();
  r.vae.params = dove::make_vae_params<float>(r.vae.cfg, 0);
  r.den.cfg = rc.denoiser_config();
  r.den.params = dove::make_denoiser_params<float>(r.den.cfg, 0);
  dove::apply_checkpoint(ckpt, r.vae.params);
  dove::apply_checkpoint(ckpt, r.den.params);
  r.schedule = rc.schedule();
  r.t_star = static_cast<int>(t_star);
  r.scale = a.scale;
  r.validate();

  std::vector<fs::path> clips = dove::list_clip_dirs(a.input);
  if (clips.empty()) throw dove::DataError("restore: no clips found under " + a.input);
  fs::create_directories(a.output);
  for (const fs::path& dir : clips) {
    dove::VideoClip lr = dove::read_clip(dir);
    dove::RestoreStats stats;
    dove::VideoClip sr = dove::restore(r, lr, &stats);
    dove::write_clip(sr, fs::path(a.output) / dir.filename(), /*force=*/true);
    std::cout << "restore: " << dir.filename().string() << " " << lr.width() << "x"
              << lr.height() << " -> " << sr.width() << "x" << sr.height() << " ("
              << lr.frame_count() << " frames, " << stats.denoises << " denoise passes)\n";
  }
  record.write();
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string pred, ref, metrics = "psnr,ssim,warp";
  std::string out;
};

int run_eval(const EvalArgs& a) {
  fs::path out_path(a.out);
  fs::path record_dir = out_path.has_parent_path() ? out_path.parent_path() : fs::path(".");
  RunRecord record("eval", record_dir);

  std::vector<std::string> metrics = split_csv(a.metrics);
  try {
    dove::validate_metric_names(metrics);
  } catch (const dove::ArgumentError& e) {
    throw dove::ConfigError("eval.metrics", e.what());
  }
  bool needs_ref = false;
  for (const auto& m : metrics) needs_ref = needs_ref || dove::metric_needs_reference(m);
  if (needs_ref && a.ref.empty())
    throw dove::ConfigError("eval.ref", "metrics '" + a.metrics + "' require --ref");

  dove::RunConfig rc;
  rc.eval.metrics = metrics;
  if (auto s = env_seed_override()) rc.seed = *s;
  record.set_fingerprint(rc.fingerprint());
  record.set_seed(rc.seed);

  std::optional<fs::path> ref;
  if (!a.ref.empty()) ref = fs::path(a.ref);
  dove::MetricReport report = dove::evaluate(a.pred, ref, metrics);

  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  std::ofstream out(out_path);
  if (!out) throw dove::IoError("cannot write report to " + a.out);
  out << report.to_json().dump(2) << "\n";

  for (const auto& m : metrics) {
    std::cout << "eval: mean " << m << " = " << report.means.at(m) << "\n";
  }
  std::cout << "eval: report written to " << a.out << "\n";
  record.write();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dove: one-step diffusion toolkit for video restoration"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  CurateArgs cu;
  CLI::App* curate = app.add_subcommand(
      "curate", "Filter, segment, score, and crop a corpus of training clips");
  curate->add_option("--input", cu.input, "Directory of source clip directories")->required();
  curate->add_option("--output", cu.output, "Directory for accepted clips and the manifest")
      ->required();
  curate->add_option("--config", cu.config, "JSON configuration file")->required();
  curate->add_option("--jobs", cu.jobs, "Worker count override");

  DegradeArgs de;
  CLI::App* degrade = app.add_subcommand(
      "degrade", "Synthesize low-quality counterparts of high-quality clips");
  degrade->add_option("--input", de.input, "Directory of source clip directories")->required();
  degrade->add_option("--output", de.output, "Directory for degraded clips")->required();
  degrade->add_option("--config", de.config, "JSON configuration file")->required();
  degrade->add_option("--seed", de.seed, "Sampling seed for degradation recipes")->required();

  TrainArgs tr;
  CLI::App* train =
      app.add_subcommand("train", "Run one training stage (vae pretrain, 1, or 2)");
  train->add_option("--stage", tr.stage, "Training stage: vae, 1, or 2")->required();
  train->add_option("--config", tr.config, "JSON configuration file")->required();
  train->add_option("--resume", tr.resume, "Checkpoint to warm-start from");

  RestoreArgs re;
  CLI::App* restore =
      app.add_subcommand("restore", "Upscale and restore clips with a trained model");
  restore->add_option("--input", re.input, "Directory of degraded clip directories")->required();
  restore->add_option("--output", re.output, "Directory for restored clips")->required();
  restore->add_option("--checkpoint", re.checkpoint, "Trained model checkpoint")->required();
  CLI::Option* tstar_opt =
      restore->add_option("--t-star", re.t_star, "Diffusion timestep for the single step");
  restore->add_option("--scale", re.scale, "Upscaling factor");
  restore->add_option("--config", re.config, "Optional config; must match the checkpoint");

  EvalArgs ev;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Score restored clips against references");
  eval_cmd->add_option("--pred", ev.pred, "Directory of predicted clip directories")->required();
  eval_cmd->add_option("--ref", ev.ref, "Directory of reference clip directories");
  eval_cmd->add_option("--metrics", ev.metrics, "Comma-separated metric names");
  eval_cmd->add_option("--out", ev.out, "Path for the JSON report")->required();

  try {
    app.parse(argc, argv);
    re.t_star_set = tstar_opt->count() > 0;
    if (curate->parsed()) return run_curate(cu);
    if (degrade->parsed()) return run_degrade(de);
    if (train->parsed()) return run_train(tr);
    if (restore->parsed()) return run_restore(re);
    if (eval_cmd->parsed()) return run_eval(ev);
    return 2;
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const dove::ConfigError& e) {
    std::cerr << "dove: " << e.what() << "\n";
    return 2;
  } catch (const dove::Error& e) {
    std::cerr << "dove: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "dove: " << e.what() << "\n";
    return 1;
  }
}
