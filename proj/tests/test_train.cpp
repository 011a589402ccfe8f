#include <cmath>
#include <cstring>
#include <sstream>

#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "dove/optimizer.hpp"
#include "dove/trainer.hpp"
#include "support/synth.hpp"

using namespace dove;

namespace {

RunConfig tiny_cfg() {
  RunConfig c;
  c.seed = 7;
  c.diffusion.timesteps = 10;
  c.diffusion.t_star = 4;
  c.model.latent_channels = 4;
  c.model.vae_f = 4;
  c.model.vae_base_width = 8;
  c.model.vae_max_width = 16;
  c.model.width = 16;
  c.model.blocks = 1;
  c.model.heads = 2;
  c.model.patch = 2;
  c.model.mlp_ratio = 2;
  c.loss.extractor_seed = 5;
  c.train.batch_size = 1;
  c.train.clip_frames = 3;
  c.train.lr = 1e-3;
  c.validate();
  return c;
}

// 3-frame clips, 8x8 LR, x2 -> 16x16 HR.
Dataset tiny_dataset(uint64_t seed, int64_t clips) {
  return synth::texture_dataset(seed, clips, 3, 16, 16, 2);
}

bool params_bitwise_equal(const ParamSet<float>& a, const ParamSet<float>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a.item(i).first != b.item(i).first) return false;
    const Tensor<float>& x = a.item(i).second;
    const Tensor<float>& y = b.item(i).second;
    if (!x.same_shape(y)) return false;
    for (int64_t j = 0; j < x.numel(); ++j)
      if (std::memcmp(&x[j], &y[j], sizeof(float)) != 0) return false;
  }
  return true;
}

}  // namespace

TEST(SampleBranch, ExtremesAndDeterminism) {
  for (int64_t s = 0; s < 50; ++s) {
    EXPECT_EQ(sample_branch(7, s, 1.0), Branch::Image);
    EXPECT_EQ(sample_branch(7, s, 0.0), Branch::Video);
    EXPECT_EQ(sample_branch(7, s, 0.8), sample_branch(7, s, 0.8));
  }
  EXPECT_THROW(sample_branch(7, 0, 1.5), ArgumentError);
}

TEST(SampleBranch, ConcentratesAroundPhi) {
  int images = 0;
  for (int64_t s = 0; s < 1000; ++s)
    if (sample_branch(42, s, 0.8) == Branch::Image) ++images;
  EXPECT_GE(images, 760);
  EXPECT_LE(images, 840);
}

TEST(AdamW, ZeroGradZeroDecayIsNoop) {
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.0;
  AdamW<float> opt(cfg);
  ParamSet<float> p;
  p.add("w", Tensor<float>({2}, {1.5f, -2.0f}));
  ParamSet<float> before = p;
  opt.init(p);
  ParamSet<float> g;
  g.add("w", Tensor<float>::zeros({2}));
  opt.step(p, g);
  EXPECT_TRUE(params_bitwise_equal(p, before));
}

TEST(AdamW, HandComputedSingleStep) {
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.beta1 = 0.9;
  cfg.beta2 = 0.95;
  cfg.eps = 1e-8;
  cfg.clip_norm = 0;  // disabled
  AdamW<double> opt(cfg);
  ParamSet<double> p;
  p.add("w", Tensor<double>({1}, {1.0}));
  opt.init(p);
  ParamSet<double> g;
  g.add("w", Tensor<double>({1}, {0.5}));
  double norm = opt.step(p, g);
  EXPECT_DOUBLE_EQ(norm, 0.5);

  double m = 0.1 * 0.5, v = 0.05 * 0.25;
  double mhat = m / 0.1, vhat = v / 0.05;
  double expected = 1.0 - 0.1 * (mhat / (std::sqrt(vhat) + 1e-8));
  EXPECT_NEAR(p.at("w")[0], expected, 1e-12);
}

TEST(AdamW, DecoupledDecayShrinksParam) {
  AdamWConfig cfg;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.1;
  AdamW<double> opt(cfg);
  ParamSet<double> p;
  p.add("w", Tensor<double>({1}, {2.0}));
  opt.init(p);
  ParamSet<double> g;
  g.add("w", Tensor<double>::zeros({1}));
  opt.step(p, g);
  EXPECT_NEAR(p.at("w")[0], 2.0 - 0.01 * 0.1 * 2.0, 1e-15);
}

TEST(AdamW, GlobalNormClipMatchesPrescaledGradients) {
  AdamWConfig clipped;
  clipped.lr = 0.05;
  clipped.clip_norm = 1.0;
  AdamWConfig open = clipped;
  open.clip_norm = 0;

  ParamSet<float> p1, p2;
  p1.add("w", Tensor<float>({3}, {0.5f, -1.0f, 2.0f}));
  p2.add("w", Tensor<float>({3}, {0.5f, -1.0f, 2.0f}));
  ParamSet<float> g;
  g.add("w", Tensor<float>({3}, {6.0f, 0.0f, 8.0f}));  // norm 10

  AdamW<float> a(clipped), b(open);
  a.init(p1);
  b.init(p2);
  double norm = a.step(p1, g);
  EXPECT_DOUBLE_EQ(norm, 10.0);

  ParamSet<float> gs;
  Tensor<float> scaled({3}, {0.0f, 0.0f, 0.0f});
  for (int64_t i = 0; i < 3; ++i)
    scaled[i] = static_cast<float>(static_cast<double>(g.at("w")[i]) * (1.0 / 10.0));
  gs.add("w", scaled);
  b.step(p2, gs);
  for (int64_t i = 0; i < 3; ++i) EXPECT_NEAR(p1.at("w")[i], p2.at("w")[i], 1e-7);
}

TEST(AdamW, RejectsNonFiniteGradients) {
  AdamW<float> opt;
  ParamSet<float> p;
  p.add("w", Tensor<float>({1}, {1.0f}));
  opt.init(p);
  ParamSet<float> g;
  g.add("w", Tensor<float>({1}, {std::numeric_limits<float>::quiet_NaN()}));
  EXPECT_THROW(opt.step(p, g), TrainingError);
}

TEST(Trainer, Stage1ZeroLearningRateLeavesParamsBitExact) {
  RunConfig cfg = tiny_cfg();
  cfg.train.lr = 0.0;
  Trainer tr(cfg);
  ParamSet<float> den_before = tr.denoiser().params;
  ParamSet<float> vae_before = tr.vae().params;
  tr.train_stage1(tiny_dataset(1, 2), 1);
  EXPECT_TRUE(params_bitwise_equal(tr.denoiser().params, den_before));
  EXPECT_TRUE(params_bitwise_equal(tr.vae().params, vae_before));
}

TEST(Trainer, Stage1LossDescends) {
  RunConfig cfg = tiny_cfg();
  cfg.train.batch_size = 2;
  Trainer tr(cfg);
  Dataset data = tiny_dataset(2, 4);
  double initial = tr.eval_stage1_loss(data);
  tr.train_stage1(data, 200);
  double final_loss = tr.eval_stage1_loss(data);
  EXPECT_LT(final_loss, initial);
  EXPECT_EQ(tr.records().size(), 200u);
}

TEST(Trainer, Stage1VaeStaysFrozen) {
  RunConfig cfg = tiny_cfg();
  Trainer tr(cfg);
  ParamSet<float> vae_before = tr.vae().params;
  tr.train_stage1(tiny_dataset(3, 2), 5);
  EXPECT_TRUE(params_bitwise_equal(tr.vae().params, vae_before));
}

TEST(Trainer, SameSeedSameFinalCheckpoint) {
  RunConfig cfg = tiny_cfg();
  Dataset data = tiny_dataset(4, 3);
  Trainer a(cfg), b(cfg);
  CheckpointData ca = a.train_stage1(data, 12);
  CheckpointData cb = b.train_stage1(data, 12);
  EXPECT_TRUE(params_bitwise_equal(ca.tensors, cb.tensors));
  EXPECT_EQ(ca.fingerprint, cb.fingerprint);
}

TEST(Trainer, ResumeReproducesUninterruptedRunBitExact) {
  RunConfig cfg = tiny_cfg();
  Dataset data = tiny_dataset(5, 3);

  Trainer full(cfg);
  CheckpointData straight = full.train_stage1(data, 25);

  Trainer head(cfg);
  CheckpointData mid = head.train_stage1(data, 15);
  EXPECT_EQ(mid.step, 15u);

  Trainer tail(cfg);
  tail.load_resume(mid, "stage1");
  EXPECT_EQ(tail.step(), 15);
  CheckpointData resumed = tail.train_stage1(data, 25);

  EXPECT_TRUE(params_bitwise_equal(straight.tensors, resumed.tensors));
  EXPECT_EQ(straight.step, resumed.step);
}

TEST(Trainer, ResumeRejectsMismatchedModel) {
  RunConfig cfg = tiny_cfg();
  Trainer a(cfg);
  CheckpointData ck = a.train_stage1(tiny_dataset(6, 2), 2);

  RunConfig wider = tiny_cfg();
  wider.model.width = 32;
  Trainer b(wider);
  EXPECT_THROW(b.load_resume(ck, "stage1"), IncompatibilityError);
}

TEST(Trainer, VaePretrainingDescends) {
  RunConfig cfg = tiny_cfg();
  cfg.train.lr = 3e-3;
  cfg.train.batch_size = 2;
  Trainer tr(cfg);
  Dataset data = tiny_dataset(7, 3);
  CheckpointData ck = tr.run_vae_stage(data, 80);
  ASSERT_GE(tr.records().size(), 80u);
  double first = tr.records().front().loss;
  double last = tr.records().back().loss;
  EXPECT_LT(last, first);
  EXPECT_EQ(ck.model["stage"], "vae");
  EXPECT_FALSE(ck.tensors.has("den.in.w"));
}

TEST(Trainer, VaeCheckpointSeedsStage1) {
  RunConfig cfg = tiny_cfg();
  Trainer pre(cfg);
  CheckpointData vae_ck = pre.run_vae_stage(tiny_dataset(8, 2), 10);

  Trainer tr(cfg);
  tr.load_resume(vae_ck, "stage1");
  EXPECT_EQ(tr.step(), 0);
  EXPECT_TRUE(params_bitwise_equal(tr.vae().params, pre.vae().params));
  tr.train_stage1(tiny_dataset(8, 2), 3);
  EXPECT_TRUE(params_bitwise_equal(tr.vae().params, pre.vae().params));
}

TEST(Trainer, Stage2BranchSelectionAndInstrumentation) {
  RunConfig cfg = tiny_cfg();
  cfg.train.stage = 2;

  cfg.train.phi = 0.0;
  Trainer video_only(cfg);
  video_only.train_stage2(tiny_dataset(9, 2), nullptr, 4);
  for (const StepRecord& r : video_only.records()) {
    EXPECT_EQ(r.branch, "video");
    EXPECT_EQ(r.stats.encodes, cfg.train.batch_size * 3);
    EXPECT_EQ(r.stats.decodes, cfg.train.batch_size * 3);
    bool has_fd = false, has_dists = false;
    for (const auto& [k, v] : r.terms) {
      has_fd |= k == "frame_diff";
      has_dists |= k == "dists";
    }
    EXPECT_TRUE(has_fd);
    EXPECT_TRUE(has_dists);
  }

  cfg.train.phi = 1.0;
  Trainer image_only(cfg);
  image_only.train_stage2(tiny_dataset(9, 2), nullptr, 4);
  for (const StepRecord& r : image_only.records()) {
    EXPECT_EQ(r.branch, "image");
    EXPECT_EQ(r.stats.encodes, cfg.train.batch_size);
    EXPECT_EQ(r.stats.decodes, cfg.train.batch_size);
    for (const auto& [k, v] : r.terms) EXPECT_NE(k, "frame_diff");
  }
}

TEST(Trainer, Stage2MixedRunsAndLogs) {
  RunConfig cfg = tiny_cfg();
  cfg.train.stage = 2;
  cfg.train.phi = 0.5;
  Trainer tr(cfg);
  std::ostringstream log;
  tr.set_log(&log);
  tr.train_stage2(tiny_dataset(10, 2), nullptr, 6);

  std::istringstream in(log.str());
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("step"));
    EXPECT_TRUE(j.contains("branch"));
    EXPECT_TRUE(j.contains("loss"));
    EXPECT_TRUE(j.contains("loss_terms"));
    EXPECT_TRUE(j["loss_terms"].contains("mse"));
    ++lines;
  }
  EXPECT_EQ(lines, 6);
}

TEST(Trainer, NonFiniteLossAborts) {
  RunConfig cfg = tiny_cfg();
  Trainer tr(cfg);
  tr.denoiser().params.at("den.in.w")[0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(tr.train_stage1(tiny_dataset(11, 2), 1), TrainingError);
}

TEST(Trainer, RejectsBadDatasets) {
  RunConfig cfg = tiny_cfg();
  Trainer tr(cfg);
  EXPECT_THROW(tr.train_stage1({}, 1), DataError);

  Dataset bad = tiny_dataset(12, 1);
  bad[0].lr.frames.pop_back();
  EXPECT_THROW(tr.train_stage1(bad, 1), DataError);

  Dataset misscaled = tiny_dataset(13, 1);
  misscaled[0].lr.frames[0] = Frame(7, 16);
  EXPECT_THROW(tr.train_stage1(misscaled, 1), DataError);
}

TEST(Trainer, CheckpointEverySavesPeriodically) {
  RunConfig cfg = tiny_cfg();
  cfg.train.checkpoint_every = 2;
  Trainer tr(cfg);
  int saves = 0;
  tr.set_checkpoint_sink([&](const CheckpointData&) { ++saves; });
  tr.train_stage1(tiny_dataset(14, 2), 5);
  // Steps 2 and 4 plus the final checkpoint.
  EXPECT_EQ(saves, 3);
}
