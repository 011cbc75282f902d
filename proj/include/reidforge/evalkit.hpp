#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "reidforge/featstore.hpp"
#include "reidforge/retrieval.hpp"

namespace reidforge {

struct EvalProtocol {
  /// Drop gallery items that share both identity and camera with the query.
  bool cross_camera_filter = true;
  /// Identities removed from the gallery; a query carrying one is an error.
  std::set<std::int64_t> junk_ids;
  /// When set, queries without any valid match score AP = 0 and count as
  /// misses instead of being excluded.
  bool score_unmatched_as_zero = false;
  /// AP truncated at this rank (CityFlow-style mAP@100); nullopt = full list.
  std::optional<std::size_t> truncate_at;
};

struct EvalReport {
  double map = 0.0;
  std::vector<double> cmc;            // cmc[k] = rate of first hit within rank k+1
  std::vector<double> per_query_ap;   // one per query; NaN for excluded queries
  std::size_t evaluated_queries = 0;
};

/// Mean over relevant positions r of (#relevant in top r) / r.
/// `relevance[i]` flags `ranked[i]`; throws InvalidArgument when nothing is relevant.
double average_precision(std::span<const std::size_t> ranked, std::span<const bool> relevance);

/// Truncated variant: precision terms only for hits at rank <= cutoff,
/// normalized by min(#relevant, cutoff).
double average_precision_at(std::span<const bool> relevance, std::size_t cutoff);

EvalReport evaluate(const DistanceMatrix& dist, const GalleryManifest& query_meta,
                    const GalleryManifest& gallery_meta, const EvalProtocol& protocol, std::size_t max_rank);

/// `map=` and `cmc_<k>=` lines.
void write_report(const EvalReport& report, std::ostream& out);
/// query_index,ap  (excluded queries carry an empty ap field)
void write_per_query_csv(const EvalReport& report, std::ostream& out);

}  // namespace reidforge
