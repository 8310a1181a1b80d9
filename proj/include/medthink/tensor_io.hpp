#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "medthink/tensor.hpp"

namespace medthink {

// Named-tensor container.
//
// Layout:
//   medthink-tensors 1
//   meta <key> <value to end of line>          (zero or more)
//   tensor <name> <rank> <dims...> <offset>    (zero or more)
//   payload <bytes>
//   <raw little-endian IEEE-754 binary64 values>
//
// Offsets are byte offsets into the payload. Values round-trip bit-exactly.
struct TensorArchive {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
  const std::string* find_meta(const std::string& key) const;
};

void write_archive(std::ostream& out, const TensorArchive& archive);
TensorArchive read_archive(std::istream& in);

void save_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive load_archive(const std::filesystem::path& path);

// FNV-1a over the payload bytes of the given tensors, in order.
std::uint64_t fingerprint(const std::vector<const Tensor*>& tensors);

}  // namespace medthink
