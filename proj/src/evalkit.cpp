#include "reidforge/evalkit.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <ostream>

#include <fmt/format.h>

#include "reidforge/errors.hpp"

namespace reidforge {

double average_precision(std::span<const std::size_t> ranked, std::span<const bool> relevance) {
  if (ranked.size() != relevance.size()) throw ShapeError("average_precision: ranked and relevance lists differ");
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t i = 0; i < relevance.size(); ++i) {
    if (!relevance[i]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  if (hits == 0) throw InvalidArgument("average_precision: no relevant item");
  return sum / static_cast<double>(hits);
}

double average_precision_at(std::span<const bool> relevance, std::size_t cutoff) {
  if (cutoff == 0) throw InvalidArgument("average_precision_at: cutoff must be >= 1");
  std::size_t total = 0;
  for (bool r : relevance) total += r;
  if (total == 0) throw InvalidArgument("average_precision_at: no relevant item");
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t i = 0; i < relevance.size() && i < cutoff; ++i) {
    if (!relevance[i]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  return sum / static_cast<double>(std::min(total, cutoff));
}

EvalReport evaluate(const DistanceMatrix& dist, const GalleryManifest& query_meta,
                    const GalleryManifest& gallery_meta, const EvalProtocol& protocol, std::size_t max_rank) {
  if (dist.queries() != query_meta.size()) throw ShapeError("evaluate: distance rows != query metadata");
  if (dist.gallery() != gallery_meta.size()) throw ShapeError("evaluate: distance cols != gallery metadata");
  if (max_rank < 1) throw InvalidArgument("evaluate: max_rank must be >= 1");
  if (!all_finite(dist.data)) throw NumericError("evaluate: non-finite distances");

  const RankedList ranking = rank(dist);
  EvalReport report;
  report.cmc.assign(max_rank, 0.0);
  report.per_query_ap.assign(dist.queries(), std::numeric_limits<double>::quiet_NaN());

  double ap_sum = 0.0;
  // std::vector<bool> is not contiguous, so relevance lives in a plain buffer.
  const auto relevance_buf = std::make_unique<bool[]>(dist.gallery());
  std::size_t relevant_count = 0;
  for (std::size_t q = 0; q < dist.queries(); ++q) {
    const auto& query = query_meta[q];
    if (protocol.junk_ids.count(query.identity)) {
      throw InvalidArgument("evaluate: query " + std::to_string(q) + " carries junk identity " +
                            std::to_string(query.identity));
    }
    relevant_count = 0;
    for (std::size_t g : ranking[q]) {
      const auto& item = gallery_meta[g];
      if (protocol.junk_ids.count(item.identity)) continue;
      const bool same_id = item.identity == query.identity;
      if (protocol.cross_camera_filter && same_id && item.camera == query.camera) continue;
      relevance_buf[relevant_count++] = same_id;
    }
    const std::span<const bool> relevance(relevance_buf.get(), relevant_count);

    std::size_t first_hit = relevance.size();
    for (std::size_t i = 0; i < relevance.size(); ++i) {
      if (relevance[i]) {
        first_hit = i;
        break;
      }
    }
    if (first_hit == relevance.size()) {
      if (protocol.score_unmatched_as_zero) {
        report.per_query_ap[q] = 0.0;
        ++report.evaluated_queries;
      }
      continue;
    }

    double ap = 0.0;
    if (protocol.truncate_at) {
      ap = average_precision_at(relevance, *protocol.truncate_at);
    } else {
      std::size_t hits = 0;
      for (std::size_t i = 0; i < relevance.size(); ++i) {
        if (!relevance[i]) continue;
        ++hits;
        ap += static_cast<double>(hits) / static_cast<double>(i + 1);
      }
      ap /= static_cast<double>(hits);
    }
    report.per_query_ap[q] = ap;
    ap_sum += ap;
    ++report.evaluated_queries;
    for (std::size_t k = first_hit; k < max_rank; ++k) report.cmc[k] += 1.0;
  }

  if (report.evaluated_queries == 0) throw InvalidArgument("evaluate: no query has a valid gallery match");
  const auto n = static_cast<double>(report.evaluated_queries);
  report.map = ap_sum / n;
  for (double& c : report.cmc) c /= n;
  return report;
}

void write_report(const EvalReport& report, std::ostream& out) {
  out << fmt::format("map={:.9f}\n", report.map);
  for (std::size_t k = 0; k < report.cmc.size(); ++k) out << fmt::format("cmc_{}={:.9f}\n", k + 1, report.cmc[k]);
  out << fmt::format("evaluated_queries={}\n", report.evaluated_queries);
}

void write_per_query_csv(const EvalReport& report, std::ostream& out) {
  out << "query_index,ap\n";
  for (std::size_t q = 0; q < report.per_query_ap.size(); ++q) {
    const double ap = report.per_query_ap[q];
    if (std::isnan(ap)) {
      out << q << ",\n";
    } else {
      out << fmt::format("{},{:.9f}\n", q, ap);
    }
  }
}

}  // namespace reidforge
