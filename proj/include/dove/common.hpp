#pragma once

#include <cstddef>
#include <cstdlib>
#include <new>
#include <stdexcept>
#include <string>

namespace dove {

// 64-byte-aligned storage so SIMD kernels peel loops identically for every
// allocation; bit-exact reproducibility depends on it.
template <typename T, std::size_t Align = 64>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) noexcept {}
  template <typename U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };
  T* allocate(std::size_t n) {
    std::size_t bytes = ((n * sizeof(T) + Align - 1) / Align) * Align;
    void* p = std::aligned_alloc(Align, bytes);
    if (!p) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) noexcept { std::free(p); }
  bool operator==(const AlignedAllocator&) const noexcept { return true; }
  bool operator!=(const AlignedAllocator&) const noexcept { return false; }
};

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/frame dimensions do not match what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A caller-supplied value is outside the documented domain.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// An index (e.g. a timestep) is outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

// Filesystem-level failure: unreadable, unwritable, refusing to overwrite.
class IoError : public Error {
 public:
  using Error::Error;
};

// Input data violates a structural contract (missing meta, frame gaps, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

// Configuration file problem; message names the offending key path.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& key, const std::string& msg)
      : Error("config key '" + key + "': " + msg), key_(key) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

// Input exceeds a configured capacity (e.g. denoiser token budget).
class CapacityError : public Error {
 public:
  using Error::Error;
};

// Checkpoint does not match the current model/config.
class IncompatibilityError : public Error {
 public:
  using Error::Error;
};

// Checkpoint payload is truncated or structurally broken.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

// External scorer plugin misbehaved (timeout, protocol violation).
class PluginError : public Error {
 public:
  using Error::Error;
};

// Training diverged or hit non-finite values; message carries diagnostics.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace dove
