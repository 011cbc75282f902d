#include "reidforge/featstore.hpp"

#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "reidforge/errors.hpp"

namespace reidforge {

FeatureMatrix::FeatureMatrix(Matrix data, bool normalized)
    : data_(std::move(data)), normalized_(normalized) {
  if (data_.rows() < 1 || data_.cols() < 1) {
    throw ShapeError("feature matrix needs at least one row and one column");
  }
  if (!all_finite(data_)) throw NumericError("feature matrix contains non-finite values");
  if (normalized_) {
    for (std::size_t r = 0; r < data_.rows(); ++r) {
      if (std::abs(norm2(data_.row(r)) - 1.0) > kUnitNormTolerance) {
        throw InvalidArgument("row " + std::to_string(r) +
                              " is flagged normalized but does not have unit norm");
      }
    }
  }
}

GalleryManifest::GalleryManifest(std::vector<ManifestEntry> entries)
    : entries_(std::move(entries)) {
  std::unordered_set<std::string> ids;
  std::unordered_map<std::int64_t, std::int64_t> tracklet_camera;
  for (const auto& e : entries_) {
    if (!ids.insert(e.item_id).second) throw InvalidArgument("duplicate item_id '" + e.item_id + "'");
    if (e.tracklet == -1) continue;
    auto [it, inserted] = tracklet_camera.emplace(e.tracklet, e.camera);
    if (!inserted && it->second != e.camera) {
      throw InvalidArgument("tracklet " + std::to_string(e.tracklet) + " spans cameras " +
                            std::to_string(it->second) + " and " + std::to_string(e.camera));
    }
  }
}

GalleryManifest GalleryManifest::slice(std::span<const std::size_t> indices) const {
  std::vector<ManifestEntry> out;
  out.reserve(indices.size());
  for (auto i : indices) {
    if (i >= entries_.size()) throw InvalidArgument("manifest index out of range");
    out.push_back(entries_[i]);
  }
  return GalleryManifest(std::move(out));
}

void DatasetSplit::validate(std::size_t item_count) const {
  for (auto i : query) {
    if (i >= item_count) throw InvalidArgument("query index out of range");
  }
  for (auto i : gallery) {
    if (i >= item_count) throw InvalidArgument("gallery index out of range");
  }
  if (disjoint) {
    std::unordered_set<std::size_t> q(query.begin(), query.end());
    for (auto i : gallery) {
      if (q.count(i)) throw InvalidArgument("query and gallery overlap at index " + std::to_string(i));
    }
  }
}

// ---------------------------------------------------------------------------
// FEAT encoding

namespace {

constexpr std::array<char, 4> kMagic = {'F', 'E', 'A', 'T'};

template <typename T>
void put_le(std::string& buf, T value) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    buf.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
  }
}

template <typename T>
T get_le(const unsigned char* p) {
  std::make_unsigned_t<T> u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    u |= static_cast<std::make_unsigned_t<T>>(p[i]) << (8 * i);
  }
  return static_cast<T>(u);
}

bool read_exact(std::istream& in, unsigned char* dst, std::size_t n) {
  in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
  return static_cast<std::size_t>(in.gcount()) == n;
}

}  // namespace

std::size_t write_feat_block(const Matrix& data, std::uint32_t flags, std::ostream& sink) {
  if (!all_finite(data)) throw FormatError(FormatErrorKind::kNonFinite, "refusing to write non-finite values");
  std::string buf;
  buf.reserve(kFeatHeaderBytes + data.size() * 4);
  buf.append(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(buf, kFeatVersion);
  put_le<std::uint64_t>(buf, data.rows());
  put_le<std::uint64_t>(buf, data.cols());
  put_le<std::uint32_t>(buf, flags);
  for (double v : data.values()) {
    float f = static_cast<float>(v);
    if (!std::isfinite(f)) {
      throw FormatError(FormatErrorKind::kNonFinite, "value overflows f32");
    }
    put_le<std::uint32_t>(buf, std::bit_cast<std::uint32_t>(f));
  }
  sink.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!sink) throw FormatError(FormatErrorKind::kIo, "write to sink failed");
  return buf.size();
}

FeatBlock read_feat_block(std::istream& source) {
  std::array<unsigned char, kFeatHeaderBytes> header{};
  if (!read_exact(source, header.data(), 4)) {
    throw FormatError(FormatErrorKind::kTruncated, "stream ended inside FEAT magic");
  }
  if (!std::equal(kMagic.begin(), kMagic.end(), header.begin(),
                  [](char a, unsigned char b) { return static_cast<unsigned char>(a) == b; })) {
    throw FormatError(FormatErrorKind::kBadMagic, "bad FEAT magic");
  }
  if (!read_exact(source, header.data() + 4, kFeatHeaderBytes - 4)) {
    throw FormatError(FormatErrorKind::kTruncated, "stream ended inside FEAT header");
  }
  const auto version = get_le<std::uint32_t>(header.data() + 4);
  if (version != kFeatVersion) {
    throw FormatError(FormatErrorKind::kVersionMismatch,
                      "unsupported FEAT version " + std::to_string(version));
  }
  const auto rows = get_le<std::uint64_t>(header.data() + 8);
  const auto cols = get_le<std::uint64_t>(header.data() + 16);
  const auto flags = get_le<std::uint32_t>(header.data() + 24);
  if (rows == 0 || cols == 0) throw FormatError(FormatErrorKind::kInvalidHeader, "FEAT shape has a zero extent");
  if (cols > std::numeric_limits<std::uint64_t>::max() / rows / 4) {
    throw FormatError(FormatErrorKind::kInvalidHeader, "FEAT shape overflows");
  }

  // Read row by row so a lying header cannot force a huge up-front allocation.
  std::vector<double> values;
  std::vector<unsigned char> row_bytes(cols * 4);
  for (std::uint64_t r = 0; r < rows; ++r) {
    if (!read_exact(source, row_bytes.data(), row_bytes.size())) {
      throw FormatError(FormatErrorKind::kTruncated, "FEAT payload truncated at row " + std::to_string(r));
    }
    for (std::uint64_t c = 0; c < cols; ++c) {
      values.push_back(std::bit_cast<float>(get_le<std::uint32_t>(row_bytes.data() + 4 * c)));
    }
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw FormatError(FormatErrorKind::kNonFinite, "FEAT payload contains NaN/Inf");
  }
  return {Matrix(rows, cols, std::move(values)), flags};
}

std::size_t write_features(const FeatureMatrix& matrix, std::ostream& sink) {
  return write_feat_block(matrix.data(), matrix.normalized() ? kFeatFlagNormalized : 0u, sink);
}

FeatureMatrix read_features(std::istream& source) {
  auto block = read_feat_block(source);
  return FeatureMatrix(std::move(block.data), (block.flags & kFeatFlagNormalized) != 0);
}

void save_features(const FeatureMatrix& matrix, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot open '" + path + "' for writing");
  write_features(matrix, out);
}

FeatureMatrix load_features(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot open '" + path + "'");
  return read_features(in);
}

// ---------------------------------------------------------------------------
// Manifest text format

namespace {

std::int64_t parse_int(std::string_view field, std::size_t line, const char* name) {
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size() || field.empty()) {
    throw ParseError(line, std::string("field '") + name + "' is not an integer: '" + std::string(field) + "'");
  }
  return v;
}

}  // namespace

GalleryManifest read_manifest(std::istream& source) {
  std::vector<ManifestEntry> entries;
  std::unordered_map<std::string, std::size_t> seen;
  std::unordered_map<std::int64_t, std::int64_t> tracklet_camera;
  std::string text;
  std::size_t line = 0;
  while (std::getline(source, text)) {
    ++line;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.empty() || text.front() == '#') continue;

    std::vector<std::string_view> fields;
    std::string_view rest(text);
    while (true) {
      auto pos = rest.find(',');
      fields.push_back(rest.substr(0, pos));
      if (pos == std::string_view::npos) break;
      rest.remove_prefix(pos + 1);
    }
    if (fields.size() != 5) {
      throw ParseError(line, "expected 5 comma-separated fields, got " + std::to_string(fields.size()));
    }
    ManifestEntry e;
    e.item_id = std::string(fields[0]);
    if (e.item_id.empty()) throw ParseError(line, "empty item_id");
    e.identity = parse_int(fields[1], line, "identity");
    e.camera = parse_int(fields[2], line, "camera");
    e.tracklet = parse_int(fields[3], line, "tracklet");
    e.frame = parse_int(fields[4], line, "frame");
    if (e.tracklet < -1) throw ParseError(line, "tracklet must be >= -1");
    if (e.frame < -1) throw ParseError(line, "frame must be >= -1");

    if (auto [it, inserted] = seen.emplace(e.item_id, line); !inserted) {
      throw ParseError(line, "duplicate item_id '" + e.item_id + "' (first on line " +
                                 std::to_string(it->second) + ")");
    }
    if (e.tracklet != -1) {
      auto [it, inserted] = tracklet_camera.emplace(e.tracklet, e.camera);
      if (!inserted && it->second != e.camera) {
        throw ParseError(line, "tracklet " + std::to_string(e.tracklet) + " spans cameras " +
                                   std::to_string(it->second) + " and " + std::to_string(e.camera));
      }
    }
    entries.push_back(std::move(e));
  }
  return GalleryManifest(std::move(entries));
}

void write_manifest(const GalleryManifest& manifest, std::ostream& sink) {
  for (const auto& e : manifest) {
    sink << e.item_id << ',' << e.identity << ',' << e.camera << ',' << e.tracklet << ',' << e.frame << '\n';
  }
  if (!sink) throw FormatError(FormatErrorKind::kIo, "manifest write failed");
}

GalleryManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot open '" + path + "'");
  return read_manifest(in);
}

void save_manifest(const GalleryManifest& manifest, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot open '" + path + "' for writing");
  write_manifest(manifest, out);
}

FeatureMatrix l2_normalize_rows(const FeatureMatrix& matrix) {
  Matrix out = matrix.data();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double n = norm2(row);
    if (n == 0.0) throw NumericError("cannot normalize zero row " + std::to_string(r));
    for (double& v : row) v /= n;
  }
  return FeatureMatrix(std::move(out), true);
}

}  // namespace reidforge
