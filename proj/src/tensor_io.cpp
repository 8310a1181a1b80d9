#include "medthink/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "medthink/errors.hpp"

namespace medthink {
namespace {

constexpr const char* kMagic = "medthink-tensors 1";

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
  return v;
}

void check_token(const std::string& s, const char* what) {
  if (s.empty() || s.find_first_of(" \t\r\n") != std::string::npos)
    throw CheckpointError(std::string("archive ") + what + " must be a non-empty token without whitespace: '" + s + "'");
}

}  // namespace

const Tensor* TensorArchive::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

const std::string* TensorArchive::find_meta(const std::string& key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return &v;
  return nullptr;
}

void write_archive(std::ostream& out, const TensorArchive& archive) {
  out << kMagic << '\n';
  for (const auto& [key, value] : archive.meta) {
    check_token(key, "meta key");
    if (value.find('\n') != std::string::npos)
      throw CheckpointError("archive meta value for '" + key + "' contains a newline");
    out << "meta " << key << ' ' << value << '\n';
  }
  std::uint64_t offset = 0;
  for (const auto& [name, t] : archive.tensors) {
    check_token(name, "tensor name");
    out << "tensor " << name << ' ' << t.rank();
    for (auto d : t.shape()) out << ' ' << d;
    out << ' ' << offset << '\n';
    offset += t.size() * sizeof(double);
  }
  out << "payload " << offset << '\n';
  for (const auto& [name, t] : archive.tensors) {
    for (double v : t.data()) {
      const std::uint64_t bits = to_le(std::bit_cast<std::uint64_t>(v));
      char buf[8];
      std::memcpy(buf, &bits, 8);
      out.write(buf, 8);
    }
  }
  if (!out) throw CheckpointError("failed writing tensor archive");
}

TensorArchive read_archive(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMagic)
    throw CheckpointError("not a tensor archive (bad header)");
  TensorArchive archive;
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  std::uint64_t payload = 0;
  for (;;) {
    if (!std::getline(in, line)) throw CheckpointError("truncated tensor archive index");
    if (line.rfind("meta ", 0) == 0) {
      const auto sp = line.find(' ', 5);
      if (sp == std::string::npos) throw CheckpointError("malformed meta line: " + line);
      archive.meta.emplace_back(line.substr(5, sp - 5), line.substr(sp + 1));
    } else if (line.rfind("tensor ", 0) == 0) {
      std::istringstream ls(line.substr(7));
      Entry e;
      std::size_t rank = 0;
      if (!(ls >> e.name >> rank)) throw CheckpointError("malformed tensor line: " + line);
      e.shape.resize(rank);
      for (auto& d : e.shape)
        if (!(ls >> d)) throw CheckpointError("malformed tensor line: " + line);
      if (!(ls >> e.offset)) throw CheckpointError("malformed tensor line: " + line);
      entries.push_back(std::move(e));
    } else if (line.rfind("payload ", 0) == 0) {
      payload = std::stoull(line.substr(8));
      break;
    } else {
      throw CheckpointError("unexpected archive line: " + line);
    }
  }
  std::string bytes(payload, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(payload));
  if (static_cast<std::uint64_t>(in.gcount()) != payload)
    throw CheckpointError("tensor archive payload truncated");
  for (auto& e : entries) {
    const std::size_t n = shape_size(e.shape);
    if (e.offset + n * 8 > payload)
      throw CheckpointError("tensor '" + e.name + "' extends past payload");
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, bytes.data() + e.offset + i * 8, 8);
      data[i] = std::bit_cast<double>(to_le(bits));
    }
    archive.tensors.emplace_back(e.name, Tensor(e.shape, std::move(data)));
  }
  return archive;
}

void save_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  write_archive(out, archive);
}

TensorArchive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  return read_archive(in);
}

std::uint64_t fingerprint(const std::vector<const Tensor*>& tensors) {
  std::uint64_t h = 1469598103934665603ull;
  for (const Tensor* t : tensors)
    for (double v : t->data()) {
      const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xffu;
        h *= 1099511628211ull;
      }
    }
  return h;
}

}  // namespace medthink
