#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace docplug {

// Error taxonomy. Callers distinguish bad input from bad files from
// incompatible artifacts, so keep these as separate types.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CorruptionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NotFoundError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CompatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Hash32 = std::array<uint8_t, 32>;

Hash32 sha256(const void* data, size_t len);
Hash32 sha256(const std::string& s);
std::string hex(const Hash32& h);
Hash32 unhex32(const std::string& s);

// Deterministic RNG helpers. std::mt19937_64 gives a portable bit stream;
// the float/normal transforms below are pinned here so golden fixtures do
// not depend on libstdc++ distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}
  uint64_t next_u64() { return state_(); }
  // uniform in [0, 1)
  double next_double() { return static_cast<double>(state_() >> 11) * 0x1.0p-53; }
  // uniform in [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }
  // uniform integer in [0, n)
  uint64_t next_below(uint64_t n);
  // Box-Muller, one value per call (spare cached)
  double normal(double mean, double stddev);
  uint64_t fork_seed() { return state_(); }

 private:
  std::mt19937_64 state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Flat key=value config files ('#' comments, blank lines ignored).
std::map<std::string, std::string> read_kv_file(const std::string& path);

std::string read_file(const std::string& path);
// Writes tmp file then renames, so failed runs leave no partial artifact.
void write_file_atomic(const std::string& path, const std::string& content);
bool file_exists(const std::string& path);

std::string format_bytes_le_f32(const std::vector<double>& values);
std::vector<double> parse_bytes_le_f32(const std::string& bytes);

}  // namespace docplug
