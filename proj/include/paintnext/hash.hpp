#pragma once

#include <memory>
#include <span>
#include <string>
#include <string_view>

namespace paintnext {

/// Incremental SHA-256 producing lowercase hex.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(const void* data, std::size_t bytes);
  Sha256& update(std::string_view text) { return update(text.data(), text.size()); }
  template <typename T>
  Sha256& update(std::span<const T> values) {
    return update(values.data(), values.size_bytes());
  }
  std::string hex();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

inline std::string sha256_hex(std::string_view text) { return Sha256().update(text).hex(); }

}  // namespace paintnext
