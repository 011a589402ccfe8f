#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dove/common.hpp"
#include "dove/params.hpp"

namespace dove {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload layout assumes a little-endian host");

// On-disk layout: magic "DOVEckpt", version u32 LE, manifest length u64 LE,
// manifest JSON (UTF-8), then raw f32 LE payloads in manifest order. The
// manifest records the step counter, a config fingerprint, the model section
// of the config (so inference can rebuild the architecture), and one entry
// per tensor.
struct CheckpointData {
  uint64_t step = 0;
  std::string fingerprint;
  nlohmann::ordered_json model;  // opaque model/diffusion config payload
  ParamSet<float> tensors;
};

namespace detail {

constexpr char kCkptMagic[8] = {'D', 'O', 'V', 'E', 'c', 'k', 'p', 't'};
constexpr uint32_t kCkptVersion = 1;

inline void put_u32_le(std::ostream& os, uint32_t v) {
  char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff),
               char((v >> 24) & 0xff)};
  os.write(b, 4);
}

inline void put_u64_le(std::ostream& os, uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = char((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

inline uint32_t get_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw CorruptionError("checkpoint: truncated header");
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

inline uint64_t get_u64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw CorruptionError("checkpoint: truncated header");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const CheckpointData& ckpt, const std::filesystem::path& path) {
  nlohmann::ordered_json manifest;
  manifest["step"] = ckpt.step;
  manifest["fingerprint"] = ckpt.fingerprint;
  manifest["model"] = ckpt.model;
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  for (size_t i = 0; i < ckpt.tensors.size(); ++i) {
    const auto& [name, t] = ckpt.tensors.item(i);
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "f32"}});
  }
  manifest["tensors"] = std::move(tensors);
  const std::string text = manifest.dump();

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("checkpoint: cannot write " + path.string());
    os.write(detail::kCkptMagic, 8);
    detail::put_u32_le(os, detail::kCkptVersion);
    detail::put_u64_le(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (size_t i = 0; i < ckpt.tensors.size(); ++i) {
      const auto& t = ckpt.tensors.item(i).second;
      os.write(reinterpret_cast<const char*>(t.data()),
               static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    if (!os) throw IoError("checkpoint: write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointData load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw CorruptionError("checkpoint: bad magic in " + path.string());
  uint32_t version = detail::get_u32_le(is);
  if (version != detail::kCkptVersion)
    throw CorruptionError("checkpoint: unsupported version " + std::to_string(version));
  uint64_t mlen = detail::get_u64_le(is);
  std::string text(mlen, '\0');
  is.read(text.data(), static_cast<std::streamsize>(mlen));
  if (!is) throw CorruptionError("checkpoint: truncated manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("checkpoint: manifest parse error: ") + e.what());
  }

  CheckpointData ckpt;
  try {
    ckpt.step = manifest.at("step").get<uint64_t>();
    ckpt.fingerprint = manifest.at("fingerprint").get<std::string>();
    ckpt.model = manifest.value("model", nlohmann::json::object());
    for (const auto& entry : manifest.at("tensors")) {
      std::string name = entry.at("name").get<std::string>();
      Shape shape = entry.at("shape").get<Shape>();
      if (entry.at("dtype").get<std::string>() != "f32")
        throw CorruptionError("checkpoint: unsupported dtype for " + name);
      Tensor<float> t(shape);
      is.read(reinterpret_cast<char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(float)));
      if (!is) throw CorruptionError("checkpoint: truncated payload for " + name);
      ckpt.tensors.add(std::move(name), std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  return ckpt;
}

inline CheckpointData load_checkpoint(const std::filesystem::path& path,
                                      const std::string& expected_fingerprint) {
  CheckpointData ckpt = load_checkpoint(path);
  if (ckpt.fingerprint != expected_fingerprint)
    throw IncompatibilityError("checkpoint fingerprint " + ckpt.fingerprint +
                               " does not match expected " + expected_fingerprint);
  return ckpt;
}

// Copies checkpoint tensors into an architecture-defined parameter set,
// requiring exact name and shape agreement for every target parameter.
inline void apply_checkpoint(const CheckpointData& ckpt, ParamSet<float>& target) {
  for (size_t i = 0; i < target.size(); ++i) {
    auto& [name, t] = target.item(i);
    if (!ckpt.tensors.has(name))
      throw IncompatibilityError("checkpoint is missing parameter " + name);
    const Tensor<float>& src = ckpt.tensors.at(name);
    if (!src.same_shape(t))
      throw IncompatibilityError("checkpoint parameter " + name + " has shape " +
                                 shape_str(src.shape()) + ", model expects " +
                                 shape_str(t.shape()));
    t = src;
  }
}

}  // namespace dove
