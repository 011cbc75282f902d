#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "reidforge/matrix.hpp"

namespace reidforge {

/// N x D embedding matrix. When `normalized` is set every row has unit norm.
class FeatureMatrix {
 public:
  FeatureMatrix() = default;
  /// Validates rows, dim >= 1, finiteness and, if requested, unit row norms.
  explicit FeatureMatrix(Matrix data, bool normalized = false);

  std::size_t rows() const { return data_.rows(); }
  std::size_t dim() const { return data_.cols(); }
  bool normalized() const { return normalized_; }
  const Matrix& data() const { return data_; }
  std::span<const double> row(std::size_t r) const { return data_.row(r); }

  bool operator==(const FeatureMatrix&) const = default;

 private:
  Matrix data_;
  bool normalized_ = false;
};

inline constexpr double kUnitNormTolerance = 1e-5;

struct ManifestEntry {
  std::string item_id;
  std::int64_t identity = 0;
  std::int64_t camera = 0;
  std::int64_t tracklet = -1;  // -1 = unknown
  std::int64_t frame = -1;     // -1 = unknown

  bool operator==(const ManifestEntry&) const = default;
};

/// Per-item metadata paired row-for-row with a FeatureMatrix.
class GalleryManifest {
 public:
  GalleryManifest() = default;
  /// Checks item_id uniqueness and that no tracklet spans two cameras.
  explicit GalleryManifest(std::vector<ManifestEntry> entries);

  std::size_t size() const { return entries_.size(); }
  const ManifestEntry& operator[](std::size_t i) const { return entries_[i]; }
  const std::vector<ManifestEntry>& entries() const { return entries_; }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  GalleryManifest slice(std::span<const std::size_t> indices) const;

  bool operator==(const GalleryManifest&) const = default;

 private:
  std::vector<ManifestEntry> entries_;
};

struct DatasetSplit {
  std::vector<std::size_t> query;
  std::vector<std::size_t> gallery;
  bool disjoint = true;

  /// Throws InvalidArgument if an index is >= item_count or the disjointness flag is violated.
  void validate(std::size_t item_count) const;
};

// FEAT binary container: "FEAT", u32 version, u64 rows, u64 cols, u32 flags,
// then rows*cols little-endian f32 values.
inline constexpr std::uint32_t kFeatVersion = 1;
inline constexpr std::size_t kFeatHeaderBytes = 28;
inline constexpr std::uint32_t kFeatFlagNormalized = 1u;

std::size_t write_features(const FeatureMatrix& matrix, std::ostream& sink);
FeatureMatrix read_features(std::istream& source);

void save_features(const FeatureMatrix& matrix, const std::string& path);
FeatureMatrix load_features(const std::string& path);

/// Raw FEAT payload without the FeatureMatrix invariants (rows/cols may carry
/// signed distances, flags are preserved verbatim). Used for distance matrices.
struct FeatBlock {
  Matrix data;
  std::uint32_t flags = 0;
};
std::size_t write_feat_block(const Matrix& data, std::uint32_t flags, std::ostream& sink);
FeatBlock read_feat_block(std::istream& source);

GalleryManifest read_manifest(std::istream& source);
void write_manifest(const GalleryManifest& manifest, std::ostream& sink);
GalleryManifest load_manifest(const std::string& path);
void save_manifest(const GalleryManifest& manifest, const std::string& path);

/// Divides each row by its Euclidean norm. Throws NumericError on a zero row.
FeatureMatrix l2_normalize_rows(const FeatureMatrix& matrix);

}  // namespace reidforge
