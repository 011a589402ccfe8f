#pragma once

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dove/common.hpp"
#include "dove/media.hpp"

namespace dove {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

struct ClipMeta {
  double fps = 24.0;
  int64_t width = 0;
  int64_t height = 0;
  int64_t frame_count = 0;
  std::string colorspace = "rgb8";
};

namespace detail {

inline std::string frame_name(int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06lld.png", static_cast<long long>(index));
  return buf;
}

struct PngCloser {
  std::FILE* f = nullptr;
  ~PngCloser() {
    if (f) std::fclose(f);
  }
};

inline void write_png_rgb8(const fs::path& path, const Frame& frame) {
  const int64_t h = frame.height(), w = frame.width();
  std::vector<png_byte> row(static_cast<size_t>(w) * 3);
  PngCloser fc{std::fopen(path.string().c_str(), "wb")};
  if (!fc.f) throw IoError("cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png write failed: " + path.string());
  }
  png_init_io(png, fc.f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int64_t i = 0; i < h; ++i) {
    for (int64_t j = 0; j < w; ++j)
      for (int64_t c = 0; c < 3; ++c) {
        float v = dove::clamp01(frame.at(c, i, j));
        row[static_cast<size_t>(j) * 3 + static_cast<size_t>(c)] =
            static_cast<png_byte>(std::lround(v * 255.0f));
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, info);
  png_destroy_write_struct(&png, &info);
}

inline Frame read_png_rgb8(const fs::path& path) {
  PngCloser fc{std::fopen(path.string().c_str(), "rb")};
  if (!fc.f) throw IoError("cannot open for reading: " + path.string());
  png_byte header[8];
  if (std::fread(header, 1, 8, fc.f) != 8 || png_sig_cmp(header, 0, 8))
    throw DataError("not a png file: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("png read failed: " + path.string());
  }
  png_init_io(png, fc.f);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  // Normalize everything to 8-bit RGB.
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
      png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const int64_t w = png_get_image_width(png, info);
  const int64_t h = png_get_image_height(png, info);
  Frame frame(h, w);
  std::vector<png_byte> row(static_cast<size_t>(w) * 3);
  for (int64_t i = 0; i < h; ++i) {
    png_read_row(png, row.data(), nullptr);
    for (int64_t j = 0; j < w; ++j)
      for (int64_t c = 0; c < 3; ++c)
        frame.at(c, i, j) = static_cast<float>(row[static_cast<size_t>(j) * 3 + c]) / 255.0f;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return frame;
}

}  // namespace detail

inline ClipMeta read_clip_meta(const fs::path& dir) {
  fs::path meta_path = dir / "meta.json";
  std::ifstream in(meta_path);
  if (!in) throw DataError("missing meta.json in " + dir.string());
  ordered_json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed meta.json in " + dir.string() + ": " + e.what());
  }
  ClipMeta m;
  try {
    m.fps = j.at("fps").get<double>();
    m.width = j.at("width").get<int64_t>();
    m.height = j.at("height").get<int64_t>();
    m.frame_count = j.at("frame_count").get<int64_t>();
    m.colorspace = j.at("colorspace").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("meta.json missing field in " + dir.string() + ": " + e.what());
  }
  if (m.colorspace != "rgb8")
    throw DataError("unsupported colorspace '" + m.colorspace + "' in " + dir.string());
  return m;
}

// Writes a clip as numbered lossless frames plus a meta.json sidecar.
// Refuses to overwrite an existing frame directory unless `force` is set.
inline void write_clip(const VideoClip& clip, const fs::path& dir, bool force = false) {
  validate_clip(clip);
  if (fs::exists(dir / "meta.json") && !force)
    throw IoError("refusing to overwrite existing clip dir (use force): " + dir.string());
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory: " + dir.string());
  for (int64_t i = 0; i < clip.frame_count(); ++i)
    detail::write_png_rgb8(dir / detail::frame_name(i + 1), clip.frames[i]);
  ordered_json j;
  j["fps"] = clip.fps;
  j["width"] = clip.width();
  j["height"] = clip.height();
  j["frame_count"] = clip.frame_count();
  j["colorspace"] = "rgb8";
  std::ofstream out(dir / "meta.json");
  if (!out) throw IoError("cannot write meta.json in " + dir.string());
  out << j.dump(2) << "\n";
}

inline void write_image(const ImageSample& img, const fs::path& dir, bool force = false) {
  VideoClip clip;
  clip.frames.push_back(img);
  write_clip(clip, dir, force);
}

// Reads a frame directory: frames must be numbered 000001..N with no gaps and
// must agree with meta.json on count and shape.
inline VideoClip read_clip(const fs::path& dir) {
  ClipMeta meta = read_clip_meta(dir);
  VideoClip clip;
  clip.fps = meta.fps;
  if (meta.frame_count < 1) throw DataError("meta declares no frames: " + dir.string());
  // Gap detection: every index in [1, frame_count] must exist, and no extra
  // numbered frames may follow.
  for (int64_t i = 1; i <= meta.frame_count; ++i) {
    fs::path p = dir / detail::frame_name(i);
    if (!fs::exists(p))
      throw DataError("gap in frame numbering: missing " + p.string());
    Frame f = detail::read_png_rgb8(p);
    if (f.height() != meta.height || f.width() != meta.width)
      throw DataError("frame shape inconsistent with meta: " + p.string());
    clip.frames.push_back(std::move(f));
  }
  if (fs::exists(dir / detail::frame_name(meta.frame_count + 1)))
    throw DataError("more frames on disk than meta.frame_count in " + dir.string());
  return clip;
}

// Sorted list of clip directories (those containing meta.json) under root.
inline std::vector<fs::path> list_clip_dirs(const fs::path& root) {
  std::vector<fs::path> out;
  if (!fs::exists(root)) throw IoError("no such directory: " + root.string());
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "meta.json")) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace dove
