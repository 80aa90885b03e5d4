#pragma once

// Dense 3D density volumes, TVOL file I/O, lattice symmetries and patch
// extraction.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bonedn/common.hpp"

namespace bonedn {

/// Density grid in mg/cm^3, x-fastest, with physical voxel spacing in mm.
class Volume {
 public:
  Volume() = default;

  Volume(Index3 dims, Spacing3 spacing, double fill = 0.0)
      : dims_(dims), spacing_(spacing), data_(dims[0] * dims[1] * dims[2], fill) {
    validate_geometry();
  }

  Volume(Index3 dims, Spacing3 spacing, std::vector<double> data)
      : dims_(dims), spacing_(spacing), data_(std::move(data)) {
    validate_geometry();
    if (data_.size() != dims_[0] * dims_[1] * dims_[2])
      throw ShapeError("volume data length " + std::to_string(data_.size()) +
                       " does not match dims");
    for (double v : data_)
      if (!std::isfinite(v)) throw ArgumentError("volume contains non-finite value");
  }

  const Index3& dims() const { return dims_; }
  std::size_t nx() const { return dims_[0]; }
  std::size_t ny() const { return dims_[1]; }
  std::size_t nz() const { return dims_[2]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  const Spacing3& spacing() const { return spacing_; }

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return (z * dims_[1] + y) * dims_[0] + x;
  }
  double& operator()(std::size_t x, std::size_t y, std::size_t z) { return data_[index(x, y, z)]; }
  double operator()(std::size_t x, std::size_t y, std::size_t z) const {
    return data_[index(x, y, z)];
  }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  std::vector<double>& storage() { return data_; }

  /// Sub-box copy; corner + size must lie inside the volume.
  Volume crop(Index3 corner, Index3 size) const {
    for (int a = 0; a < 3; ++a)
      if (corner[a] + size[a] > dims_[a]) throw ShapeError("crop box exceeds volume");
    Volume out(size, spacing_);
    for (std::size_t z = 0; z < size[2]; ++z)
      for (std::size_t y = 0; y < size[1]; ++y) {
        const double* src = &data_[index(corner[0], corner[1] + y, corner[2] + z)];
        std::copy(src, src + size[0], &out(0, y, z));
      }
    return out;
  }

  /// Centered sub-box of the given size.
  Volume center_crop(Index3 size) const {
    Index3 corner{};
    for (int a = 0; a < 3; ++a) {
      if (size[a] > dims_[a]) throw ShapeError("center crop larger than volume");
      corner[a] = (dims_[a] - size[a]) / 2;
    }
    return crop(corner, size);
  }

  friend bool operator==(const Volume&, const Volume&) = default;

 private:
  void validate_geometry() const {
    for (int a = 0; a < 3; ++a) {
      if (dims_[a] == 0) throw ShapeError("volume dims must be positive");
      if (!(spacing_[a] > 0.0) || !std::isfinite(spacing_[a]))
        throw ArgumentError("volume spacing must be positive");
    }
  }

  Index3 dims_{0, 0, 0};
  Spacing3 spacing_{1.0, 1.0, 1.0};
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// TVOL: "TVOL" | u32 version=1 | u32 nx,ny,nz | f32 sx,sy,sz | f32 payload.
// All little-endian.

namespace tvol {

inline constexpr char kMagic[4] = {'T', 'V', 'O', 'L'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 4 + 4 + 12 + 12;

namespace detail {

template <typename T>
void put_le(std::string& buf, T value) {
  static_assert(sizeof(T) == 4);
  auto bits = std::bit_cast<std::uint32_t>(value);
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

template <typename T>
T get_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<T>(bits);
}

}  // namespace detail

inline std::string encode(const Volume& v) {
  std::string buf;
  buf.reserve(kHeaderBytes + 4 * v.size());
  buf.append(kMagic, 4);
  detail::put_le(buf, kVersion);
  for (auto d : v.dims()) detail::put_le(buf, static_cast<std::uint32_t>(d));
  for (auto s : v.spacing()) detail::put_le(buf, static_cast<float>(s));
  for (double x : v.data()) detail::put_le(buf, static_cast<float>(x));
  return buf;
}

inline Volume decode(std::span<const unsigned char> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError("TVOL: bad magic at byte offset 0");
  if (bytes.size() < kHeaderBytes)
    throw FormatError("TVOL: header truncated at byte offset " + std::to_string(bytes.size()));
  const unsigned char* p = bytes.data();
  const auto version = detail::get_le<std::uint32_t>(p + 4);
  if (version != kVersion)
    throw FormatError("TVOL: unsupported version " + std::to_string(version) +
                      " at byte offset 4");
  Index3 dims{};
  Spacing3 spacing{};
  for (int a = 0; a < 3; ++a) {
    dims[a] = detail::get_le<std::uint32_t>(p + 8 + 4 * a);
    if (dims[a] == 0)
      throw FormatError("TVOL: zero dimension at byte offset " + std::to_string(8 + 4 * a));
  }
  for (int a = 0; a < 3; ++a) {
    const float s = detail::get_le<float>(p + 20 + 4 * a);
    if (!(s > 0.0f) || !std::isfinite(s))
      throw FormatError("TVOL: invalid spacing at byte offset " + std::to_string(20 + 4 * a));
    spacing[a] = s;
  }
  const std::size_t n = dims[0] * dims[1] * dims[2];
  const std::size_t expected = kHeaderBytes + 4 * n;
  if (bytes.size() < expected)
    throw FormatError("TVOL: payload truncated at byte offset " + std::to_string(bytes.size()) +
                      " (expected " + std::to_string(expected) + " bytes)");
  if (bytes.size() > expected)
    throw FormatError("TVOL: trailing data at byte offset " + std::to_string(expected));
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float f = detail::get_le<float>(p + kHeaderBytes + 4 * i);
    if (!std::isfinite(f))
      throw FormatError("TVOL: non-finite value at byte offset " +
                        std::to_string(kHeaderBytes + 4 * i));
    data[i] = f;
  }
  return Volume(dims, spacing, std::move(data));
}

}  // namespace tvol

inline void write_volume(const Volume& v, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  const std::string buf = tvol::encode(v);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error("failed writing " + path.string());
}

inline Volume read_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  try {
    return tvol::decode(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Lattice symmetries of a patch with square cross-section: the 8 in-plane
// dihedral maps times the z reflection. Element k encodes
// bit0 = flip x, bit1 = flip y, bit2 = transpose x<->y (applied first),
// bit3 = flip z.

class Symmetry {
 public:
  static constexpr int kCount = 16;

  explicit Symmetry(int k) : k_(k) {
    if (k < 0 || k >= kCount) throw ArgumentError("symmetry index must be in 0..15");
  }

  int id() const { return k_; }
  bool transposes() const { return (k_ & 4) != 0; }

  /// Destination voxel of source voxel p in a grid of the given dims.
  Index3 map(Index3 p, Index3 dims) const {
    if (k_ & 4) std::swap(p[0], p[1]);
    if (k_ & 1) p[0] = dims[0] - 1 - p[0];
    if (k_ & 2) p[1] = dims[1] - 1 - p[1];
    if (k_ & 8) p[2] = dims[2] - 1 - p[2];
    return p;
  }

  /// Composition: (this ∘ first)(p) = this(first(p)).
  Symmetry after(const Symmetry& first) const {
    const Index3 dims{3, 3, 2};
    for (int k = 0; k < kCount; ++k) {
      const Symmetry s(k);
      bool same = true;
      for (std::size_t z = 0; z < dims[2] && same; ++z)
        for (std::size_t y = 0; y < dims[1] && same; ++y)
          for (std::size_t x = 0; x < dims[0] && same; ++x)
            same = s.map({x, y, z}, dims) == map(first.map({x, y, z}, dims), dims);
      if (same) return s;
    }
    throw Error("symmetry composition not closed");
  }

  template <typename T>
  void apply(std::span<const T> src, std::span<T> dst, Index3 dims) const {
    if (transposes() && dims[0] != dims[1])
      throw ArgumentError("transposing symmetry requires nx == ny");
    for (std::size_t z = 0; z < dims[2]; ++z)
      for (std::size_t y = 0; y < dims[1]; ++y)
        for (std::size_t x = 0; x < dims[0]; ++x) {
          const Index3 q = map({x, y, z}, dims);
          dst[(q[2] * dims[1] + q[1]) * dims[0] + q[0]] = src[(z * dims[1] + y) * dims[0] + x];
        }
  }

  Volume apply(const Volume& v) const {
    Volume out(v.dims(), v.spacing());
    apply<double>(v.data(), out.data(), v.dims());
    return out;
  }

  friend bool operator==(const Symmetry&, const Symmetry&) = default;

 private:
  int k_;
};

// ---------------------------------------------------------------------------
// Patches

enum class Role { GroundTruth, Noisy };

inline std::string to_string(Role r) { return r == Role::GroundTruth ? "ground-truth" : "noisy"; }

inline Role role_from_string(const std::string& s) {
  if (s == "ground-truth") return Role::GroundTruth;
  if (s == "noisy") return Role::Noisy;
  throw FormatError("unknown role '" + s + "'");
}

struct Provenance {
  std::string phantom;
  Index3 corner{0, 0, 0};
  double mAs = 0.0;
  int repetition = 0;
  Role role = Role::GroundTruth;
};

inline constexpr Index3 kPatchSize{41, 41, 21};
inline constexpr Index3 kPatchOffset{16, 16, 8};

struct Patch {
  Volume data;
  Provenance provenance;
};

/// Corners of the regular lattice that fit inside dims.
inline std::vector<Index3> patch_lattice(Index3 dims, Index3 size, Index3 offset) {
  std::vector<Index3> corners;
  for (int a = 0; a < 3; ++a) {
    if (size[a] > dims[a]) return corners;
    if (offset[a] == 0) throw ArgumentError("patch offset must be positive");
  }
  for (std::size_t z = 0; z + size[2] <= dims[2]; z += offset[2])
    for (std::size_t y = 0; y + size[1] <= dims[1]; y += offset[1])
      for (std::size_t x = 0; x + size[0] <= dims[0]; x += offset[0]) corners.push_back({x, y, z});
  return corners;
}

/// True iff every voxel of the box is inside the mask (mask > 0.5).
inline bool box_inside_mask(const Volume& mask, Index3 corner, Index3 size) {
  for (std::size_t z = 0; z < size[2]; ++z)
    for (std::size_t y = 0; y < size[1]; ++y)
      for (std::size_t x = 0; x < size[0]; ++x)
        if (!(mask(corner[0] + x, corner[1] + y, corner[2] + z) > 0.5)) return false;
  return true;
}

/// Corners of the lattice whose patch lies entirely within the mask.
inline std::vector<Index3> masked_patch_corners(const Volume& mask, Index3 size = kPatchSize,
                                                Index3 offset = kPatchOffset) {
  std::vector<Index3> out;
  for (const auto& c : patch_lattice(mask.dims(), size, offset))
    if (box_inside_mask(mask, c, size)) out.push_back(c);
  return out;
}

/// Fully-masked patches on the regular lattice. Patches straddling the mask
/// boundary are dropped.
inline std::vector<Patch> extract_patches(const Volume& v, const Volume& mask,
                                          Index3 size = kPatchSize, Index3 offset = kPatchOffset,
                                          const Provenance& base = {}) {
  if (mask.dims() != v.dims()) throw ShapeError("mask dims differ from volume dims");
  std::vector<Patch> out;
  for (const auto& c : masked_patch_corners(mask, size, offset)) {
    Provenance prov = base;
    prov.corner = c;
    out.push_back({v.crop(c, size), prov});
  }
  return out;
}

inline Patch augment_patch(const Patch& p, int k) {
  const Symmetry s(k);
  return {s.apply(p.data), p.provenance};
}

}  // namespace bonedn
