#include "docplug/util.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace docplug {

Hash32 sha256(const void* data, size_t len) {
  Hash32 out{};
  unsigned int out_len = 0;
  if (!EVP_Digest(data, len, out.data(), &out_len, EVP_sha256(), nullptr) || out_len != 32) {
    throw std::runtime_error("sha256 failed");
  }
  return out;
}

Hash32 sha256(const std::string& s) { return sha256(s.data(), s.size()); }

std::string hex(const Hash32& h) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (uint8_t b : h) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 0xf]);
  }
  return s;
}

Hash32 unhex32(const std::string& s) {
  if (s.size() != 64) throw FormatError("expected 64 hex chars, got " + std::to_string(s.size()));
  auto nib = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw FormatError("bad hex char");
  };
  Hash32 h{};
  for (size_t i = 0; i < 32; ++i) {
    h[i] = static_cast<uint8_t>((nib(s[2 * i]) << 4) | nib(s[2 * i + 1]));
  }
  return h;
}

uint64_t Rng::next_below(uint64_t n) {
  if (n == 0) throw UsageError("next_below(0)");
  // rejection sampling keeps the draw unbiased
  uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t v;
  do {
    v = state_();
  } while (v >= limit);
  return v % n;
}

double Rng::normal(double mean, double stddev) {
  if (have_spare_) {
    have_spare_ = false;
    return mean + stddev * spare_;
  }
  double u1, u2;
  do {
    u1 = next_double();
  } while (u1 <= 0.0);
  u2 = next_double();
  double mag = std::sqrt(-2.0 * std::log(u1));
  spare_ = mag * std::sin(2.0 * M_PI * u2);
  have_spare_ = true;
  return mean + stddev * mag * std::cos(2.0 * M_PI * u2);
}

std::map<std::string, std::string> read_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;
    size_t eq = line.find('=', start);
    if (eq == std::string::npos) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected key=value");
    }
    auto trim = [](std::string s) {
      size_t a = s.find_first_not_of(" \t\r");
      size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    std::string key = trim(line.substr(start, eq - start));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty()) throw FormatError(path + ":" + std::to_string(lineno) + ": empty key");
    kv[key] = val;
  }
  return kv;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, const std::string& content) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for write: " + tmp);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw IoError("rename failed: " + path);
  }
}

bool file_exists(const std::string& path) {
  std::ifstream in(path);
  return static_cast<bool>(in);
}

std::string format_bytes_le_f32(const std::vector<double>& values) {
  std::string bytes(values.size() * 4, '\0');
  for (size_t i = 0; i < values.size(); ++i) {
    float f = static_cast<float>(values[i]);
    uint32_t u;
    std::memcpy(&u, &f, 4);
    bytes[4 * i + 0] = static_cast<char>(u & 0xff);
    bytes[4 * i + 1] = static_cast<char>((u >> 8) & 0xff);
    bytes[4 * i + 2] = static_cast<char>((u >> 16) & 0xff);
    bytes[4 * i + 3] = static_cast<char>((u >> 24) & 0xff);
  }
  return bytes;
}

std::vector<double> parse_bytes_le_f32(const std::string& bytes) {
  if (bytes.size() % 4 != 0) throw FormatError("f32 blob length not a multiple of 4");
  std::vector<double> values(bytes.size() / 4);
  for (size_t i = 0; i < values.size(); ++i) {
    uint32_t u = (static_cast<uint32_t>(static_cast<uint8_t>(bytes[4 * i + 0]))) |
                 (static_cast<uint32_t>(static_cast<uint8_t>(bytes[4 * i + 1])) << 8) |
                 (static_cast<uint32_t>(static_cast<uint8_t>(bytes[4 * i + 2])) << 16) |
                 (static_cast<uint32_t>(static_cast<uint8_t>(bytes[4 * i + 3])) << 24);
    float f;
    std::memcpy(&f, &u, 4);
    values[i] = static_cast<double>(f);
  }
  return values;
}

}  // namespace docplug
