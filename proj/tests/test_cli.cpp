// End-to-end tests for the command-line tool. Each test drives the real
// binary in a scratch directory and checks exit codes and on-disk artifacts.

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dove/dove.hpp"
#include "support/synth.hpp"

#ifndef DOVE_CLI_PATH
#error "DOVE_CLI_PATH must point at the built binary"
#endif

namespace fs = std::filesystem;
using namespace dove;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("dove_cli_" + tag + "_" +
                                            std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

struct RunResult {
  int exit_code = -1;
  std::string output;
};

// Runs the CLI with the given arguments, capturing combined stdout/stderr.
RunResult run_cli(const std::string& args, const std::string& env = "") {
  fs::path cap = fs::temp_directory_path() / ("dove_cli_out_" + std::to_string(::getpid()));
  std::string cmd = env + (env.empty() ? "" : " ") + std::string(DOVE_CLI_PATH) + " " + args +
                    " > " + cap.string() + " 2>&1";
  int rc = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  std::ifstream in(cap);
  std::stringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  fs::remove(cap);
  return r;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

// Tiny model + short schedule so train/restore runs take seconds.
std::string small_config(const fs::path& root) {
  json cfg = {
      {"seed", 7},
      {"model",
       {{"latent_channels", 4},
        {"vae_f", 4},
        {"vae_base_width", 8},
        {"vae_max_width", 16},
        {"width", 32},
        {"blocks", 1},
        {"heads", 2},
        {"patch", 2},
        {"mlp_ratio", 2}}},
      {"train", {{"iters", 2}, {"batch_size", 1}, {"clip_frames", 5}}},
      {"degrade", {{"scale", 4}}},
      {"io",
       {{"train_lr", (root / "lq").string()},
        {"train_hr", (root / "hq").string()},
        {"out_dir", (root / "run").string()}}}};
  fs::path p = root / "cfg.json";
  write_text(p, cfg.dump(2));
  return p.string();
}

void make_corpus(const fs::path& dir, int clips, int frames = 8) {
  for (int c = 0; c < clips; ++c) {
    VideoClip hq = synth::moving_texture(300 + c, frames, 32, 48, 0.6, 1.0, 0.12);
    write_clip(hq, dir / ("clip_" + std::to_string(c)), true);
  }
}

// A full scratch project shared by the pipeline tests: corpus, config,
// degraded inputs, and a stage-1 checkpoint trained for two steps.
struct Project {
  fs::path root;
  std::string cfg;
  fs::path ckpt;

  explicit Project(const std::string& tag) : root(temp_dir(tag)) {
    make_corpus(root / "hq", 2);
    cfg = small_config(root);
    RunResult d = run_cli("degrade --input " + (root / "hq").string() + " --output " +
                          (root / "lq").string() + " --config " + cfg + " --seed 11");
    EXPECT_EQ(d.exit_code, 0) << d.output;
    RunResult v = run_cli("train --stage vae --config " + cfg);
    EXPECT_EQ(v.exit_code, 0) << v.output;
    RunResult s1 = run_cli("train --stage 1 --config " + cfg + " --resume " +
                           (root / "run" / "ckpt_vae_final.dove").string());
    EXPECT_EQ(s1.exit_code, 0) << s1.output;
    ckpt = root / "run" / "ckpt_stage1_final.dove";
  }
  ~Project() { fs::remove_all(root); }
};

}  // namespace

TEST(Cli, HelpListsAllFiveSubcommandsAndExitsZero) {
  RunResult r = run_cli("--help");
  EXPECT_EQ(r.exit_code, 0);
  for (const char* sub : {"curate", "degrade", "train", "restore", "eval"})
    EXPECT_NE(r.output.find(sub), std::string::npos) << "missing " << sub;
}

TEST(Cli, UnknownSubcommandExitsTwo) {
  RunResult r = run_cli("frobnicate");
  EXPECT_EQ(r.exit_code, 2);
}

TEST(Cli, MissingRequiredFlagExitsTwo) {
  RunResult r = run_cli("eval --pred /nowhere");
  EXPECT_EQ(r.exit_code, 2);
}

TEST(Cli, BadConfigFileExitsTwo) {
  fs::path root = temp_dir("badcfg");
  write_text(root / "cfg.json", "{\"train\": {\"stage\": 9}}");
  RunResult r = run_cli("curate --input " + root.string() + " --output " +
                        (root / "out").string() + " --config " + (root / "cfg.json").string());
  EXPECT_EQ(r.exit_code, 2) << r.output;
  RunResult missing = run_cli("curate --input " + root.string() + " --output " +
                              (root / "out").string() + " --config " +
                              (root / "absent.json").string());
  EXPECT_EQ(missing.exit_code, 2) << missing.output;
  fs::remove_all(root);
}

TEST(Cli, DegradeWritesClipsRecipesAndRunRecord) {
  fs::path root = temp_dir("degrade");
  make_corpus(root / "hq", 2);
  std::string cfg = small_config(root);
  RunResult r = run_cli("degrade --input " + (root / "hq").string() + " --output " +
                        (root / "lq").string() + " --config " + cfg + " --seed 11");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  for (const char* clip : {"clip_0", "clip_1"}) {
    VideoClip lq = read_clip(root / "lq" / clip);
    EXPECT_EQ(lq.height(), 8);
    EXPECT_EQ(lq.width(), 12);
    DegradationRecipe recipe =
        DegradationRecipe::from_json(json::parse(read_file(root / "lq" / clip / "recipe.json")));
    recipe.validate();
  }
  json rec = json::parse(read_file(root / "lq" / "run_record.json"));
  EXPECT_EQ(rec.at("subcommand"), "degrade");
  EXPECT_EQ(rec.at("seed").get<int64_t>(), 11);
  EXPECT_TRUE(rec.contains("config_fingerprint"));
  EXPECT_TRUE(rec.contains("versions"));
  EXPECT_TRUE(rec.at("timings").contains("total_seconds"));

  // Distinct clips get distinct recipes from the same run seed.
  EXPECT_NE(read_file(root / "lq" / "clip_0" / "recipe.json"),
            read_file(root / "lq" / "clip_1" / "recipe.json"));
  fs::remove_all(root);
}

TEST(Cli, DegradeRerunIsByteIdenticalAndEnvSeedOverrides) {
  fs::path root = temp_dir("degrade_repro");
  make_corpus(root / "hq", 1);
  std::string cfg = small_config(root);
  std::string base = "degrade --input " + (root / "hq").string() + " --config " + cfg;
  ASSERT_EQ(run_cli(base + " --output " + (root / "a").string() + " --seed 11").exit_code, 0);
  ASSERT_EQ(run_cli(base + " --output " + (root / "b").string() + " --seed 11").exit_code, 0);
  ASSERT_EQ(run_cli(base + " --output " + (root / "c").string() + " --seed 11",
                    "DOVE_SEED=99")
                .exit_code,
            0);
  EXPECT_EQ(read_file(root / "a" / "clip_0" / "000001.png"),
            read_file(root / "b" / "clip_0" / "000001.png"));
  EXPECT_EQ(read_file(root / "a" / "clip_0" / "recipe.json"),
            read_file(root / "b" / "clip_0" / "recipe.json"));
  EXPECT_NE(read_file(root / "a" / "clip_0" / "recipe.json"),
            read_file(root / "c" / "clip_0" / "recipe.json"));
  json rec = json::parse(read_file(root / "c" / "run_record.json"));
  EXPECT_EQ(rec.at("seed").get<int64_t>(), 99);
  fs::remove_all(root);
}

TEST(Cli, TrainProducesJsonlLogWithContractFields) {
  Project p("train_log");
  std::string log = read_file(p.root / "run" / "train_stage1.jsonl");
  std::stringstream ss(log);
  std::string line;
  int lines = 0;
  while (std::getline(ss, line)) {
    json rec = json::parse(line);
    EXPECT_TRUE(rec.contains("step"));
    EXPECT_TRUE(rec.contains("branch"));
    EXPECT_TRUE(rec.contains("loss"));
    EXPECT_TRUE(rec.contains("loss_terms"));
    ++lines;
  }
  EXPECT_EQ(lines, 2);
  EXPECT_TRUE(fs::exists(p.root / "run" / "run_record.json"));
}

TEST(Cli, TrainStageRejectsUnknownValue) {
  fs::path root = temp_dir("badstage");
  make_corpus(root / "hq", 1);
  std::string cfg = small_config(root);
  RunResult r = run_cli("train --stage 3 --config " + cfg);
  EXPECT_EQ(r.exit_code, 2) << r.output;
  fs::remove_all(root);
}

TEST(Cli, RestoreUpscalesAndIsByteIdenticalAcrossReruns) {
  Project p("restore");
  std::string base = "restore --input " + (p.root / "lq").string() + " --checkpoint " +
                     p.ckpt.string();
  RunResult a = run_cli(base + " --output " + (p.root / "sr_a").string());
  ASSERT_EQ(a.exit_code, 0) << a.output;
  RunResult b = run_cli(base + " --output " + (p.root / "sr_b").string());
  ASSERT_EQ(b.exit_code, 0) << b.output;

  VideoClip sr = read_clip(p.root / "sr_a" / "clip_0");
  VideoClip lr = read_clip(p.root / "lq" / "clip_0");
  EXPECT_EQ(sr.height(), lr.height() * 4);
  EXPECT_EQ(sr.width(), lr.width() * 4);
  EXPECT_EQ(sr.frame_count(), lr.frame_count());
  for (int f = 1; f <= 3; ++f) {
    char name[16];
    std::snprintf(name, sizeof(name), "%06d.png", f);
    EXPECT_EQ(read_file(p.root / "sr_a" / "clip_0" / name),
              read_file(p.root / "sr_b" / "clip_0" / name))
        << name;
  }
}

TEST(Cli, RestoreRejectsMismatchedConfigAndVaeOnlyCheckpoint) {
  Project p("restore_mismatch");
  json other = json::parse(read_file(p.cfg));
  other["model"]["width"] = 64;
  write_text(p.root / "other.json", other.dump(2));
  RunResult r = run_cli("restore --input " + (p.root / "lq").string() + " --output " +
                        (p.root / "sr").string() + " --checkpoint " + p.ckpt.string() +
                        " --config " + (p.root / "other.json").string());
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_NE(r.output.find("does not match"), std::string::npos) << r.output;

  RunResult v = run_cli("restore --input " + (p.root / "lq").string() + " --output " +
                        (p.root / "sr").string() + " --checkpoint " +
                        (p.root / "run" / "ckpt_vae_final.dove").string());
  EXPECT_EQ(v.exit_code, 1);
  EXPECT_NE(v.output.find("autoencoder"), std::string::npos) << v.output;
}

TEST(Cli, RestoreRejectsOutOfRangeTStar) {
  Project p("restore_tstar");
  RunResult r = run_cli("restore --input " + (p.root / "lq").string() + " --output " +
                        (p.root / "sr").string() + " --checkpoint " + p.ckpt.string() +
                        " --t-star 1000");
  EXPECT_EQ(r.exit_code, 2) << r.output;
}

TEST(Cli, RestoreNeverTouchesItsInputs) {
  Project p("restore_inputs");
  auto snapshot = [&] {
    std::vector<std::pair<std::string, std::string>> files;
    for (const auto& e : fs::recursive_directory_iterator(p.root / "lq"))
      if (e.is_regular_file()) files.emplace_back(e.path().string(), read_file(e.path()));
    std::sort(files.begin(), files.end());
    return files;
  };
  auto before = snapshot();
  ASSERT_EQ(run_cli("restore --input " + (p.root / "lq").string() + " --output " +
                    (p.root / "sr").string() + " --checkpoint " + p.ckpt.string())
                .exit_code,
            0);
  EXPECT_EQ(before, snapshot());
}

TEST(Cli, EvalWritesReportAndSupportsNoRefMetrics) {
  Project p("eval");
  ASSERT_EQ(run_cli("restore --input " + (p.root / "lq").string() + " --output " +
                    (p.root / "sr").string() + " --checkpoint " + p.ckpt.string())
                .exit_code,
            0);
  fs::path report = p.root / "report.json";
  RunResult r = run_cli("eval --pred " + (p.root / "sr").string() + " --ref " +
                        (p.root / "hq").string() + " --metrics psnr,ssim,warp --out " +
                        report.string());
  ASSERT_EQ(r.exit_code, 0) << r.output;
  json rep = json::parse(read_file(report));
  EXPECT_EQ(rep.at("metrics").size(), 3u);
  EXPECT_EQ(rep.at("clips").size(), 2u);
  EXPECT_TRUE(rep.at("mean").contains("psnr"));

  // The flow-based warping metric needs no reference directory.
  RunResult warp_only = run_cli("eval --pred " + (p.root / "sr").string() +
                                " --metrics warp --out " + (p.root / "warp.json").string());
  EXPECT_EQ(warp_only.exit_code, 0) << warp_only.output;

  // Reference-based metrics without --ref are a usage error.
  RunResult no_ref = run_cli("eval --pred " + (p.root / "sr").string() +
                             " --metrics psnr --out " + (p.root / "x.json").string());
  EXPECT_EQ(no_ref.exit_code, 2);

  // Identical prediction and reference give the infinity sentinel.
  RunResult self = run_cli("eval --pred " + (p.root / "hq").string() + " --ref " +
                           (p.root / "hq").string() + " --metrics psnr --out " +
                           (p.root / "self.json").string());
  ASSERT_EQ(self.exit_code, 0) << self.output;
  json self_rep = json::parse(read_file(p.root / "self.json"));
  EXPECT_EQ(self_rep.at("mean").at("psnr"), "inf");
}

TEST(Cli, EvalReportIsByteIdenticalAcrossReruns) {
  Project p("eval_repro");
  ASSERT_EQ(run_cli("restore --input " + (p.root / "lq").string() + " --output " +
                    (p.root / "sr").string() + " --checkpoint " + p.ckpt.string())
                .exit_code,
            0);
  std::string base = "eval --pred " + (p.root / "sr").string() + " --ref " +
                     (p.root / "hq").string() + " --metrics psnr,ssim,warp --out ";
  ASSERT_EQ(run_cli(base + (p.root / "rep_a.json").string()).exit_code, 0);
  ASSERT_EQ(run_cli(base + (p.root / "rep_b.json").string()).exit_code, 0);
  EXPECT_EQ(read_file(p.root / "rep_a.json"), read_file(p.root / "rep_b.json"));
}

TEST(Cli, CurateRunsPipelineAndWritesManifest) {
  fs::path root = temp_dir("curate");
  // One clip passes everything; one is too short to survive the metadata gate.
  VideoClip good = synth::moving_texture(901, 60, 48, 64, 0.8, 1.2, 0.12);
  write_clip(good, root / "in" / "good", true);
  VideoClip tiny = synth::moving_texture(902, 3, 48, 64, 0.5, 0.5, 0.12);
  write_clip(tiny, root / "in" / "tiny", true);

  json cfg = {{"curate",
               {{"min_short_side", 24},
                {"min_frames", 8},
                {"tau", 0.2},
                {"padding", 2},
                {"min_crop_short_side", 16}}}};
  write_text(root / "cfg.json", cfg.dump(2));
  RunResult r = run_cli("curate --input " + (root / "in").string() + " --output " +
                        (root / "out").string() + " --config " +
                        (root / "cfg.json").string() + " --jobs 2");
  ASSERT_EQ(r.exit_code, 0) << r.output;

  json manifest = json::parse(read_file(root / "out" / "manifest.json"));
  ASSERT_EQ(manifest.at("clips").size(), 2u);
  EXPECT_EQ(manifest.at("clips")[0].at("name"), "good");
  EXPECT_TRUE(manifest.at("clips")[0].at("accepted").get<bool>());
  EXPECT_EQ(manifest.at("clips")[1].at("name"), "tiny");
  EXPECT_EQ(manifest.at("clips")[1].at("stage"), "metadata");
  EXPECT_TRUE(fs::exists(root / "out" / "good_s0" / "meta.json"));
  EXPECT_TRUE(fs::exists(root / "out" / "run_record.json"));

  // Rerun into a fresh directory: the manifest must match byte for byte.
  RunResult rr = run_cli("curate --input " + (root / "in").string() + " --output " +
                         (root / "out2").string() + " --config " +
                         (root / "cfg.json").string());
  ASSERT_EQ(rr.exit_code, 0) << rr.output;
  EXPECT_EQ(read_file(root / "out" / "manifest.json"),
            read_file(root / "out2" / "manifest.json"));
  fs::remove_all(root);
}

TEST(Cli, TrainCheckpointsAreByteIdenticalAcrossReruns) {
  fs::path root = temp_dir("train_repro");
  make_corpus(root / "hq", 1);
  std::string cfg_a = small_config(root);
  ASSERT_EQ(run_cli("degrade --input " + (root / "hq").string() + " --output " +
                    (root / "lq").string() + " --config " + cfg_a + " --seed 5")
                .exit_code,
            0);
  ASSERT_EQ(run_cli("train --stage vae --config " + cfg_a).exit_code, 0);

  json cfg = json::parse(read_file(cfg_a));
  cfg["io"]["out_dir"] = (root / "run2").string();
  write_text(root / "cfg2.json", cfg.dump(2));
  ASSERT_EQ(run_cli("train --stage vae --config " + (root / "cfg2.json").string()).exit_code, 0);

  EXPECT_EQ(read_file(root / "run" / "ckpt_vae_final.dove"),
            read_file(root / "run2" / "ckpt_vae_final.dove"));
  EXPECT_EQ(read_file(root / "run" / "train_vae.jsonl"),
            read_file(root / "run2" / "train_vae.jsonl"));
  fs::remove_all(root);
}
