#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dove/curator.hpp"
#include "dove/rng.hpp"
#include "support/synth.hpp"

using namespace dove;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* name) {
  fs::path p = fs::temp_directory_path() / "dove_curate_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

fs::path write_script(const fs::path& dir, const char* name, const std::string& body) {
  fs::path p = dir / name;
  std::ofstream out(p);
  out << body;
  out.close();
  return p;
}

// Line-JSON scorer that answers every request with a fixed score.
std::string fixed_scorer_py(double value) {
  return "import sys, json\n"
         "for line in sys.stdin:\n"
         "    req = json.loads(line)\n"
         "    print(json.dumps({\"id\": req[\"id\"], \"scores\": {\"iqa\": " +
         std::to_string(value) + "}}), flush=True)\n";
}

VideoClip constant_luma_clip(float value, int frames, int h = 16, int w = 16) {
  return synth::constant_clip(value, frames, h, w);
}

FlowField zero_flow(int64_t h, int64_t w) {
  return FlowField{Tensor<double>(Shape{h, w}), Tensor<double>(Shape{h, w})};
}

CurateSection desk_cfg() {
  CurateSection cfg;
  cfg.min_short_side = 24;
  cfg.min_frames = 8;
  cfg.scene_threshold = 0.08;
  cfg.scene_downscale = 16;
  cfg.tau = 0.5;
  cfg.padding = 2;
  cfg.min_crop_short_side = 16;
  return cfg;
}

}  // namespace

TEST(FilterMetadata, StrictThresholdsAtPaperScale) {
  CurateSection cfg;  // min_short_side 720, min_frames 50
  ClipMeta m;
  m.width = 1280;
  m.height = 720;
  m.frame_count = 60;
  EXPECT_FALSE(filter_metadata(m, cfg));  // short side not strictly above 720
  m.height = 721;
  m.frame_count = 51;
  EXPECT_TRUE(filter_metadata(m, cfg));
  m.frame_count = 50;
  EXPECT_FALSE(filter_metadata(m, cfg));  // frame count not strictly above 50
}

TEST(FilterMetadata, DeskScaleParameterization) {
  CurateSection cfg;
  cfg.min_short_side = 64;
  ClipMeta m;
  m.width = 128;
  m.height = 96;
  m.frame_count = 51;
  EXPECT_TRUE(filter_metadata(m, cfg));
}

TEST(FilterMetadata, MissingFieldsRejected) {
  CurateSection cfg;
  ClipMeta m;  // zero dims = unpopulated
  EXPECT_THROW(filter_metadata(m, cfg), DataError);
}

TEST(Scenes, StaticClipIsOneKeptSegment) {
  CurateSection cfg = desk_cfg();
  cfg.min_frames = 50;
  VideoClip clip = constant_luma_clip(0.4f, 120);
  auto segs = detect_scenes(clip, cfg);
  ASSERT_EQ(segs.size(), 1u);
  EXPECT_EQ(segs[0].begin, 0);
  EXPECT_EQ(segs[0].end, 120);
}

TEST(Scenes, TwoShortScenesAreCutThenDropped) {
  CurateSection cfg = desk_cfg();
  cfg.min_frames = 50;
  VideoClip clip = constant_luma_clip(0.3f, 30);
  VideoClip second = constant_luma_clip(0.7f, 30);
  for (auto& f : second.frames) clip.frames.push_back(f);
  auto partition = scene_partition(clip, cfg);
  ASSERT_EQ(partition.size(), 2u);
  EXPECT_EQ(partition[0].begin, 0);
  EXPECT_EQ(partition[0].end, 30);
  EXPECT_EQ(partition[1].begin, 30);
  EXPECT_EQ(partition[1].end, 60);
  EXPECT_TRUE(detect_scenes(clip, cfg).empty());
}

TEST(Scenes, TwoLongScenesAreBothKept) {
  CurateSection cfg = desk_cfg();
  cfg.min_frames = 50;
  VideoClip clip = constant_luma_clip(0.3f, 60);
  VideoClip second = constant_luma_clip(0.7f, 60);
  for (auto& f : second.frames) clip.frames.push_back(f);
  auto segs = detect_scenes(clip, cfg);
  ASSERT_EQ(segs.size(), 2u);
  EXPECT_EQ(segs[0].length(), 60);
  EXPECT_EQ(segs[1].begin, 60);
  EXPECT_EQ(segs[1].length(), 60);
}

TEST(Scenes, SingleFrameIsOneSegment) {
  CurateSection cfg = desk_cfg();
  auto partition = scene_partition(constant_luma_clip(0.5f, 1), cfg);
  ASSERT_EQ(partition.size(), 1u);
  EXPECT_EQ(partition[0].length(), 1);
}

TEST(Quality, GrayClipHasZeroSharpnessAndIsRejected) {
  CurateSection cfg = desk_cfg();
  cfg.sharpness_min = 1e-6;  // any positive threshold
  VideoClip gray = constant_luma_clip(0.5f, 3);
  EXPECT_DOUBLE_EQ(sharpness_proxy(gray), 0.0);
  EXPECT_DOUBLE_EQ(contrast_proxy(gray), 0.0);
  EXPECT_DOUBLE_EQ(colorfulness_proxy(gray), 0.0);
  QualityOutcome q = score_quality(gray, cfg, "gray", "");
  EXPECT_FALSE(q.accepted);
  EXPECT_NE(q.reason.find("sharpness"), std::string::npos);
}

TEST(Quality, CheckerboardSharpnessAboveMidThreshold) {
  VideoClip clip;
  for (int t = 0; t < 3; ++t) clip.frames.push_back(synth::checkerboard_frame(16, 16));
  EXPECT_GT(sharpness_proxy(clip), 0.5);
  EXPECT_GT(contrast_proxy(clip), 0.5);
}

TEST(Quality, BuiltinScorerSpecAppliesItsThreshold) {
  CurateSection cfg = desk_cfg();
  cfg.scorers.push_back({"sharpness", "", 0.5});
  VideoClip gray = constant_luma_clip(0.5f, 2);
  QualityOutcome q = score_quality(gray, cfg, "g", "");
  EXPECT_FALSE(q.accepted);
  cfg.scorers[0].name = "no_such_proxy";
  EXPECT_THROW(score_quality(gray, cfg, "g", ""), ConfigError);
}

TEST(Quality, ExternalScorerAcceptsThroughPlugin) {
  fs::path dir = temp_dir("plugin_ok");
  fs::path script = write_script(dir, "scorer.py", fixed_scorer_py(1.0));
  CurateSection cfg = desk_cfg();
  cfg.scorers.push_back({"iqa", "python3 " + script.string(), 0.9});
  PluginScorer plugin("iqa", cfg.scorers.back().command);
  std::map<std::string, PluginScorer*> plugins{{"iqa", &plugin}};
  VideoClip clip = constant_luma_clip(0.5f, 2);
  QualityOutcome q = score_quality(clip, cfg, "c0", dir.string(), &plugins);
  EXPECT_TRUE(q.accepted);
  EXPECT_DOUBLE_EQ(q.scores.at("iqa"), 1.0);
}

TEST(Quality, PluginTimeoutRejectsConservatively) {
  CurateSection cfg = desk_cfg();
  cfg.plugin_timeout_ms = 200;
  cfg.scorers.push_back({"slow", "sleep 5", 0.1});
  PluginScorer plugin("slow", "sleep 5");
  std::map<std::string, PluginScorer*> plugins{{"slow", &plugin}};
  VideoClip clip = constant_luma_clip(0.5f, 2);
  QualityOutcome q = score_quality(clip, cfg, "c0", "", &plugins);
  EXPECT_FALSE(q.accepted);
  EXPECT_NE(q.reason.find("scorer error"), std::string::npos);
}

TEST(Quality, PluginProtocolViolationsRejected) {
  fs::path dir = temp_dir("plugin_bad");
  // Garbage output.
  PluginScorer garbage("bad", "echo 'not json'; sleep 5");
  EXPECT_THROW(garbage.score("c0", "", 500), PluginError);
  // Out-of-range score.
  fs::path hot = write_script(dir, "hot.py", fixed_scorer_py(1.5));
  PluginScorer out_of_range("hot", "python3 " + hot.string());
  EXPECT_THROW(out_of_range.score("c0", "", 5000), PluginError);
  // Mismatched id.
  fs::path wrong = write_script(
      dir, "wrong.py",
      "import sys, json\n"
      "for line in sys.stdin:\n"
      "    print(json.dumps({\"id\": \"nope\", \"scores\": {\"x\": 0.5}}), flush=True)\n");
  PluginScorer mismatch("wrong", "python3 " + wrong.string());
  EXPECT_THROW(mismatch.score("c0", "", 5000), PluginError);
}

TEST(MotionBBox, SinglePixelExample) {
  CurateSection cfg;
  cfg.tau = 1.0;
  cfg.padding = 2;
  FlowField f = zero_flow(16, 16);
  f.dx.at(5, 7) = 2.0;  // magnitude 2 > tau
  auto b = motion_bbox({f}, cfg);
  ASSERT_TRUE(b.has_value());
  EXPECT_EQ(b->i_min, 3);
  EXPECT_EQ(b->j_min, 5);
  EXPECT_EQ(b->i_max, 7);
  EXPECT_EQ(b->j_max, 9);
}

TEST(MotionBBox, TwoPixelExample) {
  CurateSection cfg;
  cfg.tau = 1.0;
  cfg.padding = 1;
  FlowField f = zero_flow(16, 16);
  f.dy.at(5, 7) = 1.5;
  f.dy.at(9, 3) = -1.5;
  auto b = motion_bbox({f}, cfg);
  ASSERT_TRUE(b.has_value());
  EXPECT_EQ(b->i_min, 4);
  EXPECT_EQ(b->j_min, 2);
  EXPECT_EQ(b->i_max, 10);
  EXPECT_EQ(b->j_max, 8);
}

TEST(MotionBBox, AllZeroFlowIsStatic) {
  CurateSection cfg;
  cfg.tau = 0.5;
  EXPECT_FALSE(motion_bbox({zero_flow(8, 8)}, cfg).has_value());
  EXPECT_THROW(motion_bbox({}, cfg), ArgumentError);
}

TEST(MotionBBox, AggregatesByMaxOverPairs) {
  CurateSection cfg;
  cfg.tau = 1.0;
  cfg.padding = 0;
  FlowField a = zero_flow(12, 12), b = zero_flow(12, 12);
  a.dx.at(2, 2) = 3.0;
  b.dy.at(9, 10) = 3.0;
  auto box = motion_bbox({a, b}, cfg);
  ASSERT_TRUE(box.has_value());
  EXPECT_EQ(box->i_min, 2);
  EXPECT_EQ(box->j_min, 2);
  EXPECT_EQ(box->i_max, 9);
  EXPECT_EQ(box->j_max, 10);
}

TEST(MotionBBox, MatchesBruteForceOnRandomMasks) {
  CurateSection cfg;
  cfg.tau = 1.0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng = Rng::derive(4242, "bboxtrial", trial);
    int64_t h = rng.uniform_int(4, 24), w = rng.uniform_int(4, 24);
    cfg.padding = rng.uniform_int(0, 3);
    FlowField f = zero_flow(h, w);
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j) {
        f.dy.at(i, j) = rng.uniform(-1.3, 1.3);
        f.dx.at(i, j) = rng.uniform(-1.3, 1.3);
      }
    // Brute-force oracle: double loop over all pixels.
    int64_t imin = h, imax = -1, jmin = w, jmax = -1;
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j)
        if (std::hypot(f.dy.at(i, j), f.dx.at(i, j)) > cfg.tau) {
          imin = std::min(imin, i);
          imax = std::max(imax, i);
          jmin = std::min(jmin, j);
          jmax = std::max(jmax, j);
        }
    auto box = motion_bbox({f}, cfg);
    if (imax < 0) {
      EXPECT_FALSE(box.has_value());
      continue;
    }
    ASSERT_TRUE(box.has_value());
    EXPECT_EQ(box->i_min, std::max<int64_t>(0, imin - cfg.padding));
    EXPECT_EQ(box->j_min, std::max<int64_t>(0, jmin - cfg.padding));
    EXPECT_EQ(box->i_max, std::min<int64_t>(h - 1, imax + cfg.padding));
    EXPECT_EQ(box->j_max, std::min<int64_t>(w - 1, jmax + cfg.padding));
  }
}

TEST(Crop, BoundaryShortSideRules) {
  CurateSection cfg = desk_cfg();  // min_crop_short_side = 16
  VideoClip clip = synth::moving_texture(50, 3, 32, 32, 0, 0);
  MotionBBox at_boundary{0, 0, 15, 20};  // short side exactly 16
  CropOutcome ok = crop_and_emit(clip, at_boundary, cfg);
  EXPECT_TRUE(ok.accepted);
  EXPECT_EQ(ok.clip.height(), 16);
  EXPECT_EQ(ok.clip.width(), 21);
  MotionBBox below{0, 0, 14, 20};  // short side 15
  CropOutcome rejected = crop_and_emit(clip, below, cfg);
  EXPECT_FALSE(rejected.accepted);
  EXPECT_NE(rejected.reason.find("short side"), std::string::npos);
}

TEST(Crop, FullFrameBoxIsIdentity) {
  CurateSection cfg = desk_cfg();
  VideoClip clip = synth::moving_texture(51, 2, 24, 24, 0, 0);
  MotionBBox full{0, 0, 23, 23};
  CropOutcome out = crop_and_emit(clip, full, cfg);
  ASSERT_TRUE(out.accepted);
  EXPECT_EQ(out.clip.height(), 24);
  EXPECT_EQ(out.clip.width(), 24);
  for (int64_t i = 0; i < clip.frames[0].pixels.numel(); ++i)
    EXPECT_EQ(out.clip.frames[0].pixels[i], clip.frames[0].pixels[i]);
  MotionBBox bad{4, 4, 40, 40};
  EXPECT_FALSE(crop_and_emit(clip, bad, cfg).accepted);
}

namespace {

// A labeled mini-corpus exercising each rejection stage plus valid clips.
void build_corpus(const fs::path& root) {
  // Too small spatially.
  write_clip(synth::moving_texture(60, 10, 20, 32, 1.0, 0.5), root / "a_lowres");
  // Too few frames.
  write_clip(synth::moving_texture(61, 6, 32, 32, 1.0, 0.5), root / "b_short");
  // Sharp but static.
  VideoClip static_clip;
  for (int t = 0; t < 10; ++t) static_clip.frames.push_back(synth::checkerboard_frame(32, 32));
  write_clip(static_clip, root / "c_static");
  // Valid: textured, moving.
  write_clip(synth::moving_texture(62, 10, 32, 32, 1.2, 0.8), root / "d_valid");
  // Scene cut between two valid halves with distinct luminance.
  VideoClip cut = synth::moving_texture(63, 10, 32, 32, 1.1, -0.6, 0.15, 6);
  VideoClip bright = synth::moving_texture(64, 10, 32, 32, -0.9, 1.0, 0.15, 6);
  for (auto& f : bright.frames) {
    for (auto& v : f.pixels.vec()) v = std::min(1.0f, v + 0.45f);
    cut.frames.push_back(f);
  }
  write_clip(cut, root / "e_scenecut");
  // Featureless gray (zero sharpness).
  write_clip(synth::constant_clip(0.5f, 10, 32, 32), root / "f_gray");
}

CurateSection corpus_cfg() {
  CurateSection cfg = desk_cfg();
  cfg.min_frames = 8;
  cfg.sharpness_min = 1e-4;
  return cfg;
}

}  // namespace

TEST(Pipeline, LabeledCorpusProducesExpectedDecisions) {
  fs::path in = temp_dir("corpus_in");
  fs::path out = temp_dir("corpus_out");
  build_corpus(in);
  CurationManifest m = run_pipeline(in, out, corpus_cfg());
  ASSERT_EQ(m.records.size(), 6u);
  std::map<std::string, const ClipRecord*> by_name;
  for (const auto& r : m.records) by_name[r.name] = &r;

  EXPECT_FALSE(by_name.at("a_lowres")->accepted);
  EXPECT_EQ(by_name.at("a_lowres")->stage, "metadata");
  EXPECT_FALSE(by_name.at("b_short")->accepted);
  EXPECT_EQ(by_name.at("b_short")->stage, "metadata");
  EXPECT_FALSE(by_name.at("c_static")->accepted);
  EXPECT_EQ(by_name.at("c_static")->stage, "motion");
  EXPECT_TRUE(by_name.at("d_valid")->accepted);
  EXPECT_TRUE(by_name.at("e_scenecut")->accepted);
  ASSERT_EQ(by_name.at("e_scenecut")->segments.size(), 2u);
  EXPECT_TRUE(by_name.at("e_scenecut")->segments[0].accepted);
  EXPECT_TRUE(by_name.at("e_scenecut")->segments[1].accepted);
  EXPECT_FALSE(by_name.at("f_gray")->accepted);
  EXPECT_EQ(by_name.at("f_gray")->stage, "quality");

  EXPECT_TRUE(fs::exists(out / "d_valid_s0" / "meta.json"));
  EXPECT_TRUE(fs::exists(out / "e_scenecut_s0" / "meta.json"));
  EXPECT_TRUE(fs::exists(out / "e_scenecut_s1" / "meta.json"));
  EXPECT_FALSE(fs::exists(out / "c_static_s0"));

  // Accepted outputs pass the curation size rules they were cut by.
  VideoClip emitted = read_clip(out / "d_valid_s0");
  EXPECT_GE(std::min(emitted.height(), emitted.width()), 16);
}

TEST(Pipeline, RerunsAreByteIdentical) {
  fs::path in = temp_dir("rerun_in");
  fs::path out1 = temp_dir("rerun_out1");
  fs::path out2 = temp_dir("rerun_out2");
  build_corpus(in);
  CurationManifest m1 = run_pipeline(in, out1, corpus_cfg());
  CurationManifest m2 = run_pipeline(in, out2, corpus_cfg());
  EXPECT_EQ(m1.to_json().dump(2), m2.to_json().dump(2));
  // Emitted frame files byte-identical too.
  for (const char* name : {"d_valid_s0", "e_scenecut_s0"}) {
    std::ifstream f1(out1 / name / "000001.png", std::ios::binary);
    std::ifstream f2(out2 / name / "000001.png", std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    ASSERT_FALSE(b1.empty());
    EXPECT_EQ(b1, b2);
  }
}

TEST(Pipeline, PluginScorerIntegrates) {
  fs::path dir = temp_dir("plugin_pipe");
  fs::path in = dir / "in";
  fs::create_directories(in);
  write_clip(synth::moving_texture(70, 10, 32, 32, 1.0, 0.5), in / "clip0");
  fs::path accept_script = write_script(dir, "ok.py", fixed_scorer_py(0.9));
  fs::path reject_script = write_script(dir, "low.py", fixed_scorer_py(0.2));

  CurateSection cfg = corpus_cfg();
  cfg.scorers.push_back({"iqa", "python3 " + accept_script.string(), 0.5});
  CurationManifest accepted = run_pipeline(in, dir / "out_ok", cfg);
  ASSERT_EQ(accepted.records.size(), 1u);
  EXPECT_TRUE(accepted.records[0].accepted);
  EXPECT_DOUBLE_EQ(accepted.records[0].segments[0].scores.at("iqa"), 0.9);

  cfg.scorers.back().command = "python3 " + reject_script.string();
  CurationManifest rejected = run_pipeline(in, dir / "out_low", cfg);
  EXPECT_FALSE(rejected.records[0].accepted);
  EXPECT_EQ(rejected.records[0].stage, "quality");
}

TEST(Pipeline, PerClipErrorsAreRecordedAndPipelineContinues) {
  fs::path in = temp_dir("err_in");
  write_clip(synth::moving_texture(71, 10, 32, 32, 1.0, 0.5), in / "clip_good");
  // Corrupt clip: meta promises more frames than exist.
  fs::path bad = in / "clip_bad";
  write_clip(synth::moving_texture(72, 3, 32, 32, 0.5, 0.5), bad);
  {
    std::ifstream mi(bad / "meta.json");
    nlohmann::json j;
    mi >> j;
    j["frame_count"] = 99;
    std::ofstream mo(bad / "meta.json");
    mo << j.dump(2) << "\n";
  }
  CurationManifest m = run_pipeline(in, temp_dir("err_out"), corpus_cfg());
  ASSERT_EQ(m.records.size(), 2u);
  std::map<std::string, const ClipRecord*> by_name;
  for (const auto& r : m.records) by_name[r.name] = &r;
  EXPECT_EQ(by_name.at("clip_bad")->stage, "error");
  EXPECT_FALSE(by_name.at("clip_bad")->accepted);
  EXPECT_TRUE(by_name.at("clip_good")->accepted);
}
