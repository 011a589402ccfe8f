#pragma once
// Corpus curation pipeline: metadata filter -> scene split -> quality filter
// -> motion-area cropping. Every decision is recorded in a manifest that is
// byte-identical across reruns of the same (corpus, config).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "dove/common.hpp"
#include "dove/config.hpp"
#include "dove/flow.hpp"
#include "dove/media.hpp"
#include "dove/media_io.hpp"
#include "dove/tensor.hpp"

namespace dove {

// ---------------------------------------------------------------------------
// Step 1: metadata filter. Both thresholds are strict ("exceeds", "over").
// ---------------------------------------------------------------------------

inline bool filter_metadata(const ClipMeta& meta, const CurateSection& cfg) {
  if (meta.width < 1 || meta.height < 1 || meta.frame_count < 1)
    throw DataError("meta: width, height, and frame_count must be positive");
  return std::min(meta.width, meta.height) > cfg.min_short_side &&
         meta.frame_count > cfg.min_frames;
}

// ---------------------------------------------------------------------------
// Step 2: scene detection on downscaled luminance.
// ---------------------------------------------------------------------------

struct SceneSegment {
  int64_t begin = 0;  // first frame, inclusive
  int64_t end = 0;    // one past last frame
  int64_t length() const { return end - begin; }
};

namespace detail {

// Area-mean downscale of a luminance plane by an integer factor.
inline Tensor<double> downscale_luma(const Tensor<double>& l, int64_t factor) {
  int64_t h = l.dim(0), w = l.dim(1);
  int64_t nh = std::max<int64_t>(1, h / factor), nw = std::max<int64_t>(1, w / factor);
  Tensor<double> out(Shape{nh, nw});
  for (int64_t bi = 0; bi < nh; ++bi) {
    int64_t i0 = bi * h / nh, i1 = std::max(i0 + 1, (bi + 1) * h / nh);
    for (int64_t bj = 0; bj < nw; ++bj) {
      int64_t j0 = bj * w / nw, j1 = std::max(j0 + 1, (bj + 1) * w / nw);
      double acc = 0.0;
      for (int64_t i = i0; i < i1; ++i)
        for (int64_t j = j0; j < j1; ++j) acc += l.at(i, j);
      out.at(bi, bj) = acc / static_cast<double>((i1 - i0) * (j1 - j0));
    }
  }
  return out;
}

}  // namespace detail

// Cuts wherever the mean absolute difference of consecutive downscaled
// luminance frames exceeds the threshold; the segments partition the clip.
inline std::vector<SceneSegment> scene_partition(const VideoClip& clip,
                                                 const CurateSection& cfg) {
  validate_clip(clip);
  int64_t n = clip.frame_count();
  std::vector<SceneSegment> segments;
  Tensor<double> prev = detail::downscale_luma(luma(clip.frames[0]), cfg.scene_downscale);
  int64_t begin = 0;
  for (int64_t t = 1; t < n; ++t) {
    Tensor<double> cur = detail::downscale_luma(luma(clip.frames[t]), cfg.scene_downscale);
    double diff = 0.0;
    for (int64_t i = 0; i < cur.numel(); ++i) diff += std::abs(cur[i] - prev[i]);
    diff /= static_cast<double>(cur.numel());
    if (diff > cfg.scene_threshold) {
      segments.push_back({begin, t});
      begin = t;
    }
    prev = std::move(cur);
  }
  segments.push_back({begin, n});
  return segments;
}

// Scene partition with segments shorter than min_frames discarded.
inline std::vector<SceneSegment> detect_scenes(const VideoClip& clip,
                                               const CurateSection& cfg) {
  std::vector<SceneSegment> kept;
  for (const SceneSegment& s : scene_partition(clip, cfg))
    if (s.length() >= cfg.min_frames) kept.push_back(s);
  return kept;
}

inline VideoClip slice_clip(const VideoClip& clip, const SceneSegment& seg) {
  if (seg.begin < 0 || seg.end > clip.frame_count() || seg.begin >= seg.end)
    throw ArgumentError("slice_clip: segment out of range");
  VideoClip out;
  out.fps = clip.fps;
  out.frames.assign(clip.frames.begin() + seg.begin, clip.frames.begin() + seg.end);
  return out;
}

// ---------------------------------------------------------------------------
// Step 3: quality proxies and scorer plugins.
// ---------------------------------------------------------------------------

namespace detail {

// Two-pass variance: exactly zero on constant input (no cancellation).
inline double variance(const double* v, int64_t n) {
  double mean = 0.0;
  for (int64_t i = 0; i < n; ++i) mean += v[i];
  mean /= static_cast<double>(n);
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += (v[i] - mean) * (v[i] - mean);
  return acc / static_cast<double>(n);
}

}  // namespace detail

// Laplacian-variance sharpness, averaged over frames and squashed to [0,1].
// A constant (defocused-to-nothing) clip scores exactly 0.
inline double sharpness_proxy(const VideoClip& clip) {
  validate_clip(clip);
  double total = 0.0;
  for (const Frame& f : clip.frames) {
    Tensor<double> l = luma(f);
    int64_t h = l.dim(0), w = l.dim(1);
    Tensor<double> lap(Shape{h, w});
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j) {
        int64_t im = std::max<int64_t>(i - 1, 0), ip = std::min<int64_t>(i + 1, h - 1);
        int64_t jm = std::max<int64_t>(j - 1, 0), jp = std::min<int64_t>(j + 1, w - 1);
        lap.at(i, j) =
            4.0 * l.at(i, j) - l.at(im, j) - l.at(ip, j) - l.at(i, jm) - l.at(i, jp);
      }
    total += std::min(1.0, detail::variance(lap.vec().data(), lap.numel()) / 0.5);
  }
  return total / static_cast<double>(clip.frame_count());
}

// RMS contrast: luminance standard deviation scaled by its maximum (0.5).
inline double contrast_proxy(const VideoClip& clip) {
  validate_clip(clip);
  double total = 0.0;
  for (const Frame& f : clip.frames) {
    Tensor<double> l = luma(f);
    double var = detail::variance(l.vec().data(), l.numel());
    total += std::min(1.0, std::sqrt(var) / 0.5);
  }
  return total / static_cast<double>(clip.frame_count());
}

// Opponent-axis colorfulness (spread + offset of rg / yb axes), squashed so a
// vividly colored frame saturates toward 1 and any gray frame scores 0.
inline double colorfulness_proxy(const VideoClip& clip) {
  validate_clip(clip);
  double total = 0.0;
  for (const Frame& f : clip.frames) {
    double n = static_cast<double>(f.height() * f.width());
    double s_rg = 0, ss_rg = 0, s_yb = 0, ss_yb = 0;
    for (int64_t i = 0; i < f.height(); ++i)
      for (int64_t j = 0; j < f.width(); ++j) {
        double r = f.pixels.at(0, i, j), g = f.pixels.at(1, i, j), b = f.pixels.at(2, i, j);
        double rg = r - g, yb = 0.5 * (r + g) - b;
        s_rg += rg;
        ss_rg += rg * rg;
        s_yb += yb;
        ss_yb += yb * yb;
      }
    double var_rg = std::max(0.0, ss_rg / n - (s_rg / n) * (s_rg / n));
    double var_yb = std::max(0.0, ss_yb / n - (s_yb / n) * (s_yb / n));
    double mean_mag = std::hypot(s_rg / n, s_yb / n);
    double m = std::sqrt(var_rg + var_yb) + 0.3 * mean_mag;
    total += std::min(1.0, m / 0.3);
  }
  return total / static_cast<double>(clip.frame_count());
}

// One external scorer: a child process speaking line-delimited JSON on stdio.
// Request {"id": ..., "clip_path": ...}; response {"id": ..., "scores":
// {name: value in [0,1]}}. The child is started once and fed clips serially.
class PluginScorer {
 public:
  PluginScorer(std::string name, std::string command)
      : name_(std::move(name)), command_(std::move(command)) {}
  ~PluginScorer() { stop(); }
  PluginScorer(const PluginScorer&) = delete;
  PluginScorer& operator=(const PluginScorer&) = delete;

  const std::string& name() const { return name_; }

  void start() {
    if (pid_ > 0) return;
    int to_child[2], from_child[2];
    if (pipe(to_child) != 0 || pipe(from_child) != 0)
      throw PluginError("scorer '" + name_ + "': pipe failed");
    pid_ = fork();
    if (pid_ < 0) throw PluginError("scorer '" + name_ + "': fork failed");
    if (pid_ == 0) {
      dup2(to_child[0], STDIN_FILENO);
      dup2(from_child[1], STDOUT_FILENO);
      close(to_child[0]);
      close(to_child[1]);
      close(from_child[0]);
      close(from_child[1]);
      execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
      _exit(127);
    }
    close(to_child[0]);
    close(from_child[1]);
    in_fd_ = to_child[1];
    out_fd_ = from_child[0];
  }

  // Scores one clip; throws PluginError on timeout, crash, malformed output,
  // mismatched id, or out-of-range score.
  std::map<std::string, double> score(const std::string& id, const std::string& clip_path,
                                      int64_t timeout_ms) {
    start();
    nlohmann::ordered_json req;
    req["id"] = id;
    req["clip_path"] = clip_path;
    std::string line = req.dump() + "\n";
    if (write(in_fd_, line.data(), line.size()) != static_cast<ssize_t>(line.size()))
      throw PluginError("scorer '" + name_ + "': write failed (plugin gone?)");
    std::string resp = read_line(timeout_ms);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(resp);
    } catch (const nlohmann::json::exception&) {
      throw PluginError("scorer '" + name_ + "': malformed response: " + resp);
    }
    if (!j.contains("id") || j.at("id") != id)
      throw PluginError("scorer '" + name_ + "': response id mismatch");
    if (!j.contains("scores") || !j.at("scores").is_object())
      throw PluginError("scorer '" + name_ + "': response lacks scores object");
    std::map<std::string, double> out;
    for (const auto& [k, v] : j.at("scores").items()) {
      if (!v.is_number())
        throw PluginError("scorer '" + name_ + "': score '" + k + "' is not a number");
      double d = v.get<double>();
      if (!(d >= 0.0 && d <= 1.0))
        throw PluginError("scorer '" + name_ + "': score '" + k + "' outside [0,1]");
      out[k] = d;
    }
    if (out.empty()) throw PluginError("scorer '" + name_ + "': empty scores");
    return out;
  }

  void stop() {
    if (pid_ <= 0) return;
    close(in_fd_);
    close(out_fd_);
    // Grace period, then force; the wait must not hang on a stuck plugin.
    int status = 0;
    for (int i = 0; i < 50; ++i) {
      if (waitpid(pid_, &status, WNOHANG) == pid_) {
        pid_ = -1;
        return;
      }
      usleep(10 * 1000);
    }
    kill(pid_, SIGKILL);
    waitpid(pid_, &status, 0);
    pid_ = -1;
  }

 private:
  std::string read_line(int64_t timeout_ms) {
    while (true) {
      size_t nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return line;
      }
      struct pollfd pfd = {out_fd_, POLLIN, 0};
      int r = poll(&pfd, 1, static_cast<int>(timeout_ms));
      if (r == 0) throw PluginError("scorer '" + name_ + "': timed out");
      if (r < 0) throw PluginError("scorer '" + name_ + "': poll failed");
      char chunk[4096];
      ssize_t got = read(out_fd_, chunk, sizeof(chunk));
      if (got <= 0) throw PluginError("scorer '" + name_ + "': plugin closed its output");
      buffer_.append(chunk, static_cast<size_t>(got));
    }
  }

  std::string name_;
  std::string command_;
  pid_t pid_ = -1;
  int in_fd_ = -1;
  int out_fd_ = -1;
  std::string buffer_;
};

struct QualityOutcome {
  bool accepted = true;
  std::map<std::string, double> scores;
  std::string reason;  // set when rejected
};

// Built-in proxies always run against their config thresholds (default 0 =
// accept everything); external scorers run through their plugins and compare
// against each ScorerSpec threshold. Plugin failures reject conservatively.
inline QualityOutcome score_quality(const VideoClip& clip, const CurateSection& cfg,
                                    const std::string& id, const std::string& clip_path,
                                    std::map<std::string, PluginScorer*>* plugins = nullptr) {
  QualityOutcome out;
  auto check = [&](const std::string& name, double value, double threshold) {
    out.scores[name] = value;
    if (out.accepted && value < threshold) {
      out.accepted = false;
      out.reason = "quality: " + name + " below threshold";
    }
  };
  check("sharpness", sharpness_proxy(clip), cfg.sharpness_min);
  check("contrast", contrast_proxy(clip), cfg.contrast_min);
  check("colorfulness", colorfulness_proxy(clip), cfg.colorfulness_min);
  for (const ScorerSpec& spec : cfg.scorers) {
    if (spec.command.empty()) {
      // Built-in proxy referenced by name with its own threshold.
      if (!out.scores.count(spec.name))
        throw ConfigError("curate.scorers", "unknown built-in scorer '" + spec.name + "'");
      check(spec.name, out.scores.at(spec.name), spec.threshold);
      continue;
    }
    if (!plugins || !plugins->count(spec.name))
      throw ArgumentError("score_quality: no plugin registered for '" + spec.name + "'");
    try {
      auto scores = plugins->at(spec.name)->score(id, clip_path, cfg.plugin_timeout_ms);
      for (const auto& [k, v] : scores) {
        std::string key = scores.size() == 1 ? spec.name : spec.name + "." + k;
        check(key, v, spec.threshold);
      }
    } catch (const PluginError& e) {
      out.accepted = false;
      out.reason = std::string("scorer error: ") + e.what();
      out.scores[spec.name] = -1.0;  // sentinel: no valid score
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Step 4: motion map, mask, bounding box, crop.
// ---------------------------------------------------------------------------

struct MotionBBox {
  int64_t i_min = 0, j_min = 0, i_max = 0, j_max = 0;  // inclusive pixel bounds

  int64_t height() const { return i_max - i_min + 1; }
  int64_t width() const { return j_max - j_min + 1; }
};

// M = per-pixel max over the flow sequence of the flow magnitude; S = pixels
// with M strictly above tau; none when S is empty (static video); otherwise
// the padded min/max box clamped to the frame.
inline std::optional<MotionBBox> motion_bbox(const std::vector<FlowField>& flows,
                                             const CurateSection& cfg) {
  if (flows.empty()) throw ArgumentError("motion_bbox: need at least one flow field");
  int64_t h = flows.front().height(), w = flows.front().width();
  for (const FlowField& f : flows)
    if (f.height() != h || f.width() != w)
      throw ShapeError("motion_bbox: flow fields must share dims");
  int64_t i_min = h, i_max = -1, j_min = w, j_max = -1;
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      double m = 0.0;
      for (const FlowField& f : flows) m = std::max(m, f.magnitude(i, j));
      if (m > cfg.tau) {
        i_min = std::min(i_min, i);
        i_max = std::max(i_max, i);
        j_min = std::min(j_min, j);
        j_max = std::max(j_max, j);
      }
    }
  if (i_max < 0) return std::nullopt;
  MotionBBox b;
  b.i_min = std::max<int64_t>(0, i_min - cfg.padding);
  b.j_min = std::max<int64_t>(0, j_min - cfg.padding);
  b.i_max = std::min<int64_t>(h - 1, i_max + cfg.padding);
  b.j_max = std::min<int64_t>(w - 1, j_max + cfg.padding);
  return b;
}

struct CropOutcome {
  bool accepted = false;
  VideoClip clip;      // valid when accepted
  std::string reason;  // set when rejected
};

// Crops all frames to the box; rejects when the cropped short side falls
// strictly below min_crop_short_side (the boundary value is accepted).
inline CropOutcome crop_and_emit(const VideoClip& clip, const MotionBBox& bbox,
                                 const CurateSection& cfg) {
  CropOutcome out;
  if (bbox.i_min < 0 || bbox.j_min < 0 || bbox.i_max >= clip.height() ||
      bbox.j_max >= clip.width() || bbox.i_min > bbox.i_max || bbox.j_min > bbox.j_max) {
    out.reason = "motion: degenerate or out-of-bounds bbox";
    return out;
  }
  if (std::min(bbox.height(), bbox.width()) < cfg.min_crop_short_side) {
    out.reason = "motion: crop short side below minimum";
    return out;
  }
  out.accepted = true;
  out.clip = crop(clip, bbox.i_min, bbox.j_min, bbox.height(), bbox.width());
  return out;
}

// ---------------------------------------------------------------------------
// The four-step pipeline over a corpus of clip directories.
// ---------------------------------------------------------------------------

struct SegmentRecord {
  SceneSegment segment;
  bool accepted = false;
  std::string reason;
  std::map<std::string, double> scores;
  std::optional<MotionBBox> bbox;
  std::string output;  // relative output dir when accepted
};

struct ClipRecord {
  std::string name;
  bool accepted = false;       // any segment accepted
  std::string stage;           // where the clip fell out, or "accepted"
  std::string reason;
  std::vector<SegmentRecord> segments;
};

struct CurationManifest {
  std::vector<ClipRecord> records;
  nlohmann::ordered_json config_echo;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["config"] = config_echo;
    j["clips"] = nlohmann::ordered_json::array();
    for (const ClipRecord& r : records) {
      nlohmann::ordered_json cj;
      cj["name"] = r.name;
      cj["accepted"] = r.accepted;
      cj["stage"] = r.stage;
      if (!r.reason.empty()) cj["reason"] = r.reason;
      cj["segments"] = nlohmann::ordered_json::array();
      for (const SegmentRecord& s : r.segments) {
        nlohmann::ordered_json sj;
        sj["begin"] = s.segment.begin;
        sj["end"] = s.segment.end;
        sj["accepted"] = s.accepted;
        if (!s.reason.empty()) sj["reason"] = s.reason;
        for (const auto& [k, v] : s.scores) sj["scores"][k] = v;
        if (s.bbox)
          sj["bbox"] = {s.bbox->i_min, s.bbox->j_min, s.bbox->i_max, s.bbox->j_max};
        if (!s.output.empty()) sj["output"] = s.output;
        cj["segments"].push_back(sj);
      }
      j["clips"].push_back(cj);
    }
    return j;
  }
};

namespace detail {

// Flow on up to eight evenly spaced consecutive pairs bounds the motion-step
// cost on long segments; static content stays static under any subset.
inline std::vector<FlowField> segment_flows(const VideoClip& seg) {
  int64_t pairs = seg.frame_count() - 1;
  int64_t use = std::min<int64_t>(pairs, 8);
  std::vector<FlowField> flows;
  for (int64_t k = 0; k < use; ++k) {
    int64_t t = pairs <= 8 ? k : k * pairs / use;
    flows.push_back(compute_flow(seg.frames[t], seg.frames[t + 1]));
  }
  return flows;
}

}  // namespace detail

// Runs steps 1-4 over every clip directory under input_root, writing accepted
// crops under output_root and recording every decision in input order.
// Per-clip failures are recorded and the pipeline continues.
inline CurationManifest run_pipeline(const fs::path& input_root, const fs::path& output_root,
                                     const CurateSection& cfg) {
  CurationManifest manifest;
  manifest.config_echo = {
      {"min_short_side", cfg.min_short_side},
      {"min_frames", cfg.min_frames},
      {"scene_threshold", cfg.scene_threshold},
      {"scene_downscale", cfg.scene_downscale},
      {"sharpness_min", cfg.sharpness_min},
      {"contrast_min", cfg.contrast_min},
      {"colorfulness_min", cfg.colorfulness_min},
      {"tau", cfg.tau},
      {"padding", cfg.padding},
      {"min_crop_short_side", cfg.min_crop_short_side},
  };

  std::vector<std::unique_ptr<PluginScorer>> plugin_store;
  std::map<std::string, PluginScorer*> plugins;
  for (const ScorerSpec& spec : cfg.scorers) {
    if (spec.command.empty()) continue;
    plugin_store.push_back(std::make_unique<PluginScorer>(spec.name, spec.command));
    plugins[spec.name] = plugin_store.back().get();
  }

  fs::create_directories(output_root);
  for (const fs::path& dir : list_clip_dirs(input_root)) {
    ClipRecord rec;
    rec.name = dir.filename().string();
    try {
      ClipMeta meta = read_clip_meta(dir);
      if (!filter_metadata(meta, cfg)) {
        rec.stage = "metadata";
        rec.reason = "short side or frame count at/below minimum";
        manifest.records.push_back(std::move(rec));
        continue;
      }
      VideoClip clip = read_clip(dir);
      std::vector<SceneSegment> segments = detect_scenes(clip, cfg);
      if (segments.empty()) {
        rec.stage = "scene";
        rec.reason = "no segment reaches min_frames";
        manifest.records.push_back(std::move(rec));
        continue;
      }
      for (size_t si = 0; si < segments.size(); ++si) {
        SegmentRecord sr;
        sr.segment = segments[si];
        VideoClip seg = slice_clip(clip, segments[si]);
        std::string seg_id = rec.name + "_s" + std::to_string(si);
        QualityOutcome q = score_quality(seg, cfg, seg_id, dir.string(),
                                         plugins.empty() ? nullptr : &plugins);
        sr.scores = q.scores;
        if (!q.accepted) {
          sr.reason = q.reason;
          rec.segments.push_back(std::move(sr));
          continue;
        }
        sr.bbox = motion_bbox(detail::segment_flows(seg), cfg);
        if (!sr.bbox) {
          sr.reason = "motion: static segment";
          rec.segments.push_back(std::move(sr));
          continue;
        }
        CropOutcome cropped = crop_and_emit(seg, *sr.bbox, cfg);
        if (!cropped.accepted) {
          sr.reason = cropped.reason;
          rec.segments.push_back(std::move(sr));
          continue;
        }
        sr.accepted = true;
        sr.output = seg_id;
        write_clip(cropped.clip, output_root / seg_id, /*force=*/true);
        rec.segments.push_back(std::move(sr));
      }
      for (const SegmentRecord& s : rec.segments) rec.accepted = rec.accepted || s.accepted;
      if (rec.accepted) {
        rec.stage = "accepted";
      } else {
        rec.stage = rec.segments.front().reason.rfind("quality", 0) == 0 ||
                            rec.segments.front().reason.rfind("scorer", 0) == 0
                        ? "quality"
                        : "motion";
        rec.reason = "no segment accepted";
      }
    } catch (const Error& e) {
      rec.stage = "error";
      rec.reason = e.what();
      rec.accepted = false;
    }
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

inline void write_manifest(const CurationManifest& manifest, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest: " + path.string());
  out << manifest.to_json().dump(2) << "\n";
}

}  // namespace dove
