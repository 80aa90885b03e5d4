#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace bonedn {

// Error hierarchy. The CLI maps these onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated file content.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// A statistic or fit is undefined for the given data (zero variance etc).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values during optimisation.
class NumericError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// Invalid run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

using Index3 = std::array<std::size_t, 3>;  // (x, y, z)
using Offset3 = std::array<int, 3>;         // (x, y, z)
using Spacing3 = std::array<double, 3>;     // mm, (x, y, z)

/// Voxel size of the clinical reconstructions, mm.
inline constexpr Spacing3 kClinicalSpacing{0.172, 0.172, 0.340};

/// SplitMix64 finaliser; used to derive independent stream seeds from a
/// master seed plus stream coordinates.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <typename... Rest>
constexpr std::uint64_t mix_seed(std::uint64_t x, std::uint64_t y, Rest... rest) {
  return mix_seed(mix_seed(x) ^ y, static_cast<std::uint64_t>(rest)...);
}

/// Symmetric (half-sample) mirror of an index into [0, n). Repeats the
/// reflection for offsets larger than n.
inline std::ptrdiff_t mirror_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

}  // namespace bonedn
