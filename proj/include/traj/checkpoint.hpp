// Binary checkpoint: dims, every parameter tensor, the embedding state and a
// free-form string metadata table.
//
// Layout (host byte order, little-endian on all supported targets):
//   "TRAJCKPT" u32 version
//   u64 n, num_users, num_items, feature_dim
//   u64 tensor_count, then per tensor: str name, u64 rows, u64 cols, f64[rows*cols]
//   f64[num_users*n] user_dyn, f64[num_items*n] item_dyn
//   per user: u8 has_time, f64 time; per item: u8 has_time, f64 time
//   per user: u8 has_item, u64 item
//   u64 metadata_count, then (str key, str value) pairs
//   "END!"
// where str = u64 length + bytes. Doubles are stored bit-for-bit.

#pragma once

#include "traj/model.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>

namespace traj {

inline constexpr char kCheckpointMagic[8] = {'T', 'R', 'A', 'J', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams params;
  EmbeddingState state;
  std::map<std::string, std::string> metadata;
};

namespace detail {

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}
  template <class T>
  void pod(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void doubles(std::span<const double> v) {
    out_.write(reinterpret_cast<const char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

 private:
  std::ostream& out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& in) : in_(in) {}
  template <class T>
  T pod() {
    T v{};
    read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
  }
  void doubles(std::span<double> v) {
    read(reinterpret_cast<char*>(v.data()), v.size() * sizeof(double));
  }
  std::string str() {
    const auto len = pod<std::uint64_t>();
    if (len > (1u << 24)) throw Error("corrupt checkpoint: string too long");
    std::string s(len, '\0');
    read(s.data(), len);
    return s;
  }
  void read(char* dst, std::size_t bytes) {
    in_.read(dst, static_cast<std::streamsize>(bytes));
    if (static_cast<std::size_t>(in_.gcount()) != bytes) throw Error("truncated checkpoint");
  }

 private:
  std::istream& in_;
};

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
  detail::BinaryWriter w(out);
  const auto& d = ck.params.dims();
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.pod(kCheckpointVersion);
  for (std::uint64_t v : {d.embedding_dim, d.num_users, d.num_items, d.feature_dim}) w.pod(v);
  w.pod<std::uint64_t>(kTensorCount);
  for (std::size_t t = 0; t < kTensorCount; ++t) {
    const auto& info = ck.params.info(static_cast<Tensor>(t));
    w.str(std::string(info.name));
    w.pod<std::uint64_t>(info.rows);
    w.pod<std::uint64_t>(info.cols);
    w.doubles(ck.params[static_cast<Tensor>(t)].values());
  }
  const auto& s = ck.state;
  if (s.user_dyn.rows() != d.num_users || s.item_dyn.rows() != d.num_items ||
      s.user_dyn.cols() != d.embedding_dim || s.item_dyn.cols() != d.embedding_dim) {
    throw Error("write_checkpoint: state shape does not match parameter dims");
  }
  w.doubles(s.user_dyn.values());
  w.doubles(s.item_dyn.values());
  for (const auto* times : {&s.user_last_time, &s.item_last_time}) {
    for (const auto& t : *times) {
      w.pod<std::uint8_t>(t.has_value());
      w.pod<double>(t.value_or(0.0));
    }
  }
  for (const auto& it : s.user_last_item) {
    w.pod<std::uint8_t>(it.has_value());
    w.pod<std::uint64_t>(it.value_or(0));
  }
  w.pod<std::uint64_t>(ck.metadata.size());
  for (const auto& [k, v] : ck.metadata) {
    w.str(k);
    w.str(v);
  }
  out.write("END!", 4);
  if (!out) throw Error("write_checkpoint: stream failure");
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint '" + path + "'");
  write_checkpoint(out, ck);
}

inline Checkpoint read_checkpoint(std::istream& in) {
  detail::BinaryReader r(in);
  char magic[sizeof(kCheckpointMagic)] = {};
  in.read(magic, sizeof(magic));
  if (in.gcount() != sizeof(magic) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw Error("bad checkpoint version/magic");
  }
  if (in.peek() == std::char_traits<char>::eof()) throw Error("bad checkpoint version/magic");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) throw Error("bad checkpoint version/magic");

  ModelDims d;
  d.embedding_dim = r.pod<std::uint64_t>();
  d.num_users = r.pod<std::uint64_t>();
  d.num_items = r.pod<std::uint64_t>();
  d.feature_dim = r.pod<std::uint64_t>();
  if (d.embedding_dim == 0 || d.embedding_dim > (1u << 16) || d.num_users > (1u << 28) ||
      d.num_items > (1u << 28) || d.feature_dim > (1u << 20)) {
    throw Error("corrupt checkpoint: implausible dimensions");
  }
  Checkpoint ck{ModelParams(d), {}, {}};
  if (r.pod<std::uint64_t>() != kTensorCount) throw Error("corrupt checkpoint: tensor count");
  for (std::size_t t = 0; t < kTensorCount; ++t) {
    const auto& info = ck.params.info(static_cast<Tensor>(t));
    const std::string name = r.str();
    const auto rows = r.pod<std::uint64_t>();
    const auto cols = r.pod<std::uint64_t>();
    if (name != info.name || rows != info.rows || cols != info.cols) {
      throw Error("corrupt checkpoint: tensor '" + name + "' does not match expected '" +
                  std::string(info.name) + "' " + shape_string(info.rows, info.cols));
    }
    r.doubles(ck.params[static_cast<Tensor>(t)].values());
  }
  auto& s = ck.state;
  s.user_dyn = Mat(d.num_users, d.embedding_dim);
  s.item_dyn = Mat(d.num_items, d.embedding_dim);
  r.doubles(s.user_dyn.values());
  r.doubles(s.item_dyn.values());
  s.user_last_time.resize(d.num_users);
  s.item_last_time.resize(d.num_items);
  for (auto* times : {&s.user_last_time, &s.item_last_time}) {
    for (auto& t : *times) {
      const bool has = r.pod<std::uint8_t>() != 0;
      const double v = r.pod<double>();
      t = has ? std::optional<double>(v) : std::nullopt;
    }
  }
  s.user_last_item.resize(d.num_users);
  for (auto& it : s.user_last_item) {
    const bool has = r.pod<std::uint8_t>() != 0;
    const auto v = r.pod<std::uint64_t>();
    it = has ? std::optional<std::size_t>(v) : std::nullopt;
  }
  const auto meta = r.pod<std::uint64_t>();
  if (meta > (1u << 16)) throw Error("corrupt checkpoint: metadata count");
  for (std::uint64_t k = 0; k < meta; ++k) {
    auto key = r.str();
    ck.metadata[std::move(key)] = r.str();
  }
  char end[4] = {};
  r.read(end, 4);
  if (std::memcmp(end, "END!", 4) != 0) throw Error("corrupt checkpoint: missing end marker");
  return ck;
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  return read_checkpoint(in);
}

}  // namespace traj
