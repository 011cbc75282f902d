#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "reidforge/featstore.hpp"
#include "reidforge/matrix.hpp"

namespace reidforge {

enum class MetricTag : std::uint8_t { kEuclidean = 0, kCosine = 1, kJaccardFused = 2, kCustom = 3 };

std::string to_string(MetricTag tag);
MetricTag metric_from_string(const std::string& name);

/// Q x G query-to-gallery dissimilarities.
struct DistanceMatrix {
  Matrix data;
  MetricTag tag = MetricTag::kCustom;

  std::size_t queries() const { return data.rows(); }
  std::size_t gallery() const { return data.cols(); }
  double operator()(std::size_t q, std::size_t g) const { return data(q, g); }

  /// Finite entries; non-negative for euclidean/cosine.
  void validate() const;

  bool operator==(const DistanceMatrix&) const = default;
};

// Distance matrices travel as FEAT blocks. Bits 8..15 of the flags word carry the metric tag.
void save_distances(const DistanceMatrix& dist, const std::string& path);
DistanceMatrix load_distances(const std::string& path);

/// Euclidean, or cosine distance 1 - <q, g> (requires unit rows).
DistanceMatrix pairwise_distance(const FeatureMatrix& queries, const FeatureMatrix& gallery, MetricTag metric);

struct RerankParams {
  std::size_t k1 = 20;
  std::size_t k2 = 6;
  double lambda_jaccard = 0.3;

  void validate() const;
};

/// k-reciprocal encoding re-ranking over the joint (Q+G) item set.
///
/// Neighborhoods and Gaussian-kernel weights come from the squared input
/// distances scaled by each row's maximum; the blend uses the input distance
/// itself, so lambda_jaccard = 1 returns dist_qg unchanged.
DistanceMatrix k_reciprocal_rerank(const DistanceMatrix& dist_qg, const DistanceMatrix& dist_qq,
                                   const DistanceMatrix& dist_gg, const RerankParams& params);

/// How an external orientation/camera matrix should be read. Recorded, never
/// used to transform the matrix: fusion applies D_v - l1 D_o - l2 D_c as given.
enum class AuxKind { kDistance, kSimilarity };
std::string to_string(AuxKind kind);
AuxKind aux_kind_from_string(const std::string& name);

struct FusionParams {
  double lambda1 = 0.1;  // orientation
  double lambda2 = 0.1;  // camera

  void validate() const;
};

DistanceMatrix fuse_distances(const DistanceMatrix& d_v, const DistanceMatrix& d_o, const DistanceMatrix& d_c,
                              const FusionParams& params);

/// Replaces each tracklet member's feature with the mean over a centered
/// window of up to `window` frames (clipped at tracklet ends, ordered by frame).
/// Items with tracklet -1 are copied unchanged. Re-normalizes if the input was normalized.
FeatureMatrix tracklet_rerank(const FeatureMatrix& gallery, const GalleryManifest& manifest, std::size_t window);

enum class EnsembleNorm { kMinMax, kRaw };
EnsembleNorm ensemble_norm_from_string(const std::string& name);

/// Elementwise mean of members, each min-max scaled to [0, 1] first unless kRaw.
DistanceMatrix ensemble_distances(std::span<const DistanceMatrix> members, EnsembleNorm norm = EnsembleNorm::kMinMax);

/// Per query: gallery indices by ascending distance, ties to the lower index.
using RankedList = std::vector<std::vector<std::size_t>>;
RankedList rank(const DistanceMatrix& dist);

}  // namespace reidforge
