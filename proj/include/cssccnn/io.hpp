#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cssccnn/error.hpp"

namespace cssccnn::io {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

/// Records every path opened through this module. Training code paths that
/// must not see annotations are audited against it.
class AccessLog {
 public:
  static AccessLog& instance() {
    static AccessLog log;
    return log;
  }

  void record(const std::filesystem::path& p) {
    std::lock_guard lock(mu_);
    if (enabled_) entries_.push_back(std::filesystem::weakly_canonical(p).string());
  }
  void start() {
    std::lock_guard lock(mu_);
    entries_.clear();
    enabled_ = true;
  }
  std::vector<std::string> stop() {
    std::lock_guard lock(mu_);
    enabled_ = false;
    return std::move(entries_);
  }
  std::vector<std::string> entries() const {
    std::lock_guard lock(mu_);
    return entries_;
  }

 private:
  mutable std::mutex mu_;
  bool enabled_ = false;
  std::vector<std::string> entries_;
};

inline std::string read_file(const std::filesystem::path& p) {
  AccessLog::instance().record(p);
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + p.string());
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, std::string_view bytes) {
  if (p.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(p.parent_path(), ec);
  }
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + p.string());
}

// Little-endian encoding helpers.

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f32(std::string& buf, float f) { put_u32(buf, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  Reader(std::string_view bytes, std::string context)
      : bytes_(bytes), context_(std::move(context)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError("truncated data in " + context_);
  }
  std::string_view bytes_;
  std::string context_;
  std::size_t pos_ = 0;
};

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline double parse_double(const std::string& s, const std::string& context) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IoError("not a number '" + s + "' in " + context);
  }
}

/// Reads a one-value-per-line CSV; blank lines and a non-numeric header line are skipped.
inline std::vector<double> read_value_column(const std::filesystem::path& p) {
  std::istringstream in(read_file(p));
  std::vector<double> values;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto field = split(t, ',').front();
    try {
      values.push_back(parse_double(field, p.string() + ":" + std::to_string(lineno)));
    } catch (const IoError&) {
      if (lineno == 1) continue;
      throw;
    }
  }
  return values;
}

inline std::string format_double(double v) {
  std::ostringstream ss;
  ss.precision(10);
  ss << v;
  return ss.str();
}

}  // namespace cssccnn::io
