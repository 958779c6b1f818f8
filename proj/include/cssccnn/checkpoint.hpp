#pragma once

// Checkpoint file: "CSSN", version byte, u32 tensor count, then per tensor
//   u32 name length, name bytes, u32 rank, rank x u32 dims, prod(dims) x f32 values
// all little-endian, values in row-major order of `dims`. Run metadata travels as one
// zero-element tensor whose name starts with "meta/".

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cssccnn/error.hpp"
#include "cssccnn/io.hpp"
#include "cssccnn/network.hpp"

namespace cssccnn::nn {

inline constexpr std::uint8_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::string stage;
  std::uint64_t seed = 0;
  std::string config_hash;
  NetConfig net;
};

namespace detail {

// Row-major flat index of a stored matrix. Conv weights are kept as cout x (9*cin) with
// column k*cin + ci but serialised as [cout, cin, 3, 3].
template <class T>
std::vector<float> flatten(const Param<T>& p) {
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(p.value.size()));
  if (p.shape.size() == 4) {
    const auto cout = p.shape[0], cin = p.shape[1];
    for (std::uint32_t o = 0; o < cout; ++o) {
      for (std::uint32_t ci = 0; ci < cin; ++ci) {
        for (std::uint32_t k = 0; k < 9; ++k) out.push_back(static_cast<float>(p.value(o, k * cin + ci)));
      }
    }
  } else if (p.shape.size() == 2) {
    for (std::uint32_t r = 0; r < p.shape[0]; ++r) {
      for (std::uint32_t c = 0; c < p.shape[1]; ++c) out.push_back(static_cast<float>(p.value(r, c)));
    }
  } else {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) out.push_back(static_cast<float>(p.value(i)));
  }
  return out;
}

template <class T>
void unflatten(const std::vector<float>& v, Param<T>& p) {
  std::size_t i = 0;
  if (p.shape.size() == 4) {
    const auto cout = p.shape[0], cin = p.shape[1];
    for (std::uint32_t o = 0; o < cout; ++o) {
      for (std::uint32_t ci = 0; ci < cin; ++ci) {
        for (std::uint32_t k = 0; k < 9; ++k) p.value(o, k * cin + ci) = static_cast<T>(v[i++]);
      }
    }
  } else if (p.shape.size() == 2) {
    for (std::uint32_t r = 0; r < p.shape[0]; ++r) {
      for (std::uint32_t c = 0; c < p.shape[1]; ++c) p.value(r, c) = static_cast<T>(v[i++]);
    }
  } else {
    for (Eigen::Index k = 0; k < p.value.size(); ++k) p.value(k) = static_cast<T>(v[i++]);
  }
}

inline std::string encode_meta(const CheckpointMeta& m) {
  std::ostringstream s;
  s << "meta/stage=" << m.stage << ";seed=" << m.seed << ";config=" << m.config_hash
    << ";widths=" << m.net.c1 << "," << m.net.c2 << "," << m.net.c3 << "," << m.net.rot << ","
    << m.net.dens << "," << m.net.classes;
  return s.str();
}

inline CheckpointMeta decode_meta(const std::string& name) {
  CheckpointMeta m;
  std::map<std::string, std::string> kv;
  for (const auto& item : io::split(name.substr(5), ';')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw IoError("checkpoint metadata entry without '=': " + item);
    kv[item.substr(0, eq)] = item.substr(eq + 1);
  }
  m.stage = kv["stage"];
  m.config_hash = kv["config"];
  try {
    m.seed = std::stoull(kv.at("seed"));
    const auto w = io::split(kv.at("widths"), ',');
    if (w.size() != 6) throw IoError("bad widths");
    m.net.c1 = std::stoi(w[0]);
    m.net.c2 = std::stoi(w[1]);
    m.net.c3 = std::stoi(w[2]);
    m.net.rot = std::stoi(w[3]);
    m.net.dens = std::stoi(w[4]);
    m.net.classes = std::stoi(w[5]);
  } catch (const std::exception&) {
    throw IoError("checkpoint metadata is malformed: " + name);
  }
  return m;
}

}  // namespace detail

template <class T>
std::string encode_checkpoint(const Network<T>& net, const CheckpointMeta& meta) {
  std::string buf = "CSSN";
  buf.push_back(static_cast<char>(kCheckpointVersion));
  io::put_u32(buf, static_cast<std::uint32_t>(net.params().size() + 1));
  auto put_name = [&](const std::string& n) {
    io::put_u32(buf, static_cast<std::uint32_t>(n.size()));
    buf += n;
  };
  CheckpointMeta m = meta;
  m.net = net.config();
  put_name(detail::encode_meta(m));
  io::put_u32(buf, 1);
  io::put_u32(buf, 0);
  for (const auto& p : net.params()) {
    put_name(p.name);
    io::put_u32(buf, static_cast<std::uint32_t>(p.shape.size()));
    for (auto d : p.shape) io::put_u32(buf, d);
    for (float v : detail::flatten(p)) io::put_f32(buf, v);
  }
  return buf;
}

template <class T>
struct LoadedCheckpoint {
  Network<T> net;
  CheckpointMeta meta;
};

template <class T>
LoadedCheckpoint<T> decode_checkpoint(std::string_view bytes, const std::string& context = "checkpoint") {
  io::Reader rd(bytes, context);
  if (rd.take(4) != "CSSN") throw IoError(context + ": bad magic");
  if (const auto v = rd.u8(); v != kCheckpointVersion) {
    throw IoError(context + ": unsupported version " + std::to_string(v));
  }
  const std::uint32_t count = rd.u32();
  struct Raw {
    std::vector<std::uint32_t> dims;
    std::vector<float> values;
  };
  std::map<std::string, Raw> tensors;
  std::optional<CheckpointMeta> meta;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::string name(rd.take(rd.u32()));
    Raw raw;
    const std::uint32_t rank = rd.u32();
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      raw.dims.push_back(rd.u32());
      n *= raw.dims.back();
    }
    raw.values.resize(n);
    for (float& v : raw.values) v = rd.f32();
    if (name.rfind("meta/", 0) == 0) {
      meta = detail::decode_meta(name);
    } else {
      tensors[name] = std::move(raw);
    }
  }
  if (!rd.done()) throw IoError(context + ": trailing bytes");
  if (!meta) throw IoError(context + ": no metadata record");
  LoadedCheckpoint<T> out{Network<T>(meta->net, 0), *meta};
  for (std::size_t i = 0; i < out.net.params().size(); ++i) {
    const auto& spec = out.net.params()[i];
    const auto it = tensors.find(spec.name);
    if (it == tensors.end()) throw IoError(context + ": missing tensor " + spec.name);
    if (it->second.dims != spec.shape) throw IoError(context + ": shape mismatch for " + spec.name);
    detail::unflatten(it->second.values, out.net.mutable_param(i));
  }
  return out;
}

template <class T>
void save_checkpoint(const std::filesystem::path& p, const Network<T>& net, const CheckpointMeta& meta) {
  io::write_file(p, encode_checkpoint(net, meta));
}

template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& p) {
  return decode_checkpoint<T>(io::read_file(p), p.string());
}

}  // namespace cssccnn::nn
