#pragma once

// Checkpoint files, FNV-1a hashing and small CSV/JSON writers.
//
// Checkpoint layout (little-endian):
//   "HPERCKPT" | u32 version | u64 length + config JSON | u32 record count |
//   records of { u32 name length, name bytes, u32 rank, u64 dims[rank], f64 data[] }

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hiper/errors.hpp"
#include "hiper/model.hpp"
#include "hiper/tensor.hpp"

namespace hiper {

inline constexpr char kCheckpointMagic[8] = {'H', 'P', 'E', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string file_hash(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  return hex64(fnv1a(bytes.data(), bytes.size()));
}

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  void raw(std::string_view s) { buf_.append(s); }
  const std::string& bytes() const { return buf_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : buf_(std::move(bytes)) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  double f64() { return std::bit_cast<double>(le(8)); }
  std::string raw(std::size_t n) {
    need(n);
    auto s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw FormatError("checkpoint: truncated file");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

struct Checkpoint {
  nlohmann::json config;
  NamedTensors tensors;

  bool has(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return true;
    return false;
  }

  const Tensor& get(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw FormatError("checkpoint: missing tensor '" + name + "'");
  }
};

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.raw(std::string_view(kCheckpointMagic, 8));
  w.u32(kCheckpointVersion);
  const auto cfg = ck.config.dump();
  w.u64(cfg.size());
  w.raw(cfg);
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.raw(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    for (double v : t.values()) w.f64(v);
  }
  return w.bytes();
}

inline Checkpoint deserialize_checkpoint(std::string bytes) {
  detail::ByteReader r(std::move(bytes));
  if (r.raw(8) != std::string_view(kCheckpointMagic, 8)) throw FormatError("checkpoint: bad magic");
  if (auto v = r.u32(); v != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(v));
  Checkpoint ck;
  ck.config = nlohmann::json::parse(r.raw(r.u64()));
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.raw(r.u32());
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u64();
    std::vector<double> data(numel(shape));
    for (auto& v : data) v = r.f64();
    ck.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  return ck;
}

// Returns the FNV-1a hash of the written bytes.
inline std::string save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("checkpoint: write failed for " + path.string());
  return hex64(fnv1a(bytes.data(), bytes.size()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint: " + path.string() + " not found");
  return deserialize_checkpoint(read_bytes(path));
}

// Copies checkpoint tensors into same-named parameters, checking shapes.
inline void assign_parameters(const NamedTensors& params, const Checkpoint& ck) {
  for (const auto& [name, dst] : params) {
    const Tensor& src = ck.get(name);
    if (src.shape() != dst.shape())
      throw DimensionError("checkpoint: tensor '" + name + "' has shape " + shape_str(src.shape()) + ", expected " +
                           shape_str(dst.shape()));
    Tensor handle = dst;
    std::copy(src.values().begin(), src.values().end(), handle.data().begin());
  }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// Numbers are printed with round-trip precision.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header) : out_(path) {
    if (!out_) throw IoError("cannot write " + path.string());
    out_ << std::setprecision(17);
    row(header);
  }

  template <typename... Ts>
  void write(const Ts&... cells) {
    bool first = true;
    ((out_ << (first ? "" : ",") << cells, first = false), ...);
    out_ << '\n';
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

inline void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& losses) {
  CsvWriter csv(path, {"step", "loss"});
  for (std::size_t i = 0; i < losses.size(); ++i) csv.write(i + 1, losses[i]);
}

}  // namespace hiper
