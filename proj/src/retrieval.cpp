#include "reidforge/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "reidforge/errors.hpp"

namespace reidforge {

std::string to_string(MetricTag tag) {
  switch (tag) {
    case MetricTag::kEuclidean: return "euclidean";
    case MetricTag::kCosine: return "cosine";
    case MetricTag::kJaccardFused: return "jaccard-fused";
    case MetricTag::kCustom: return "custom";
  }
  return "custom";
}

MetricTag metric_from_string(const std::string& name) {
  if (name == "euclidean") return MetricTag::kEuclidean;
  if (name == "cosine") return MetricTag::kCosine;
  if (name == "jaccard-fused") return MetricTag::kJaccardFused;
  if (name == "custom") return MetricTag::kCustom;
  throw InvalidArgument("unknown metric '" + name + "'");
}

void DistanceMatrix::validate() const {
  if (data.rows() == 0 || data.cols() == 0) throw ShapeError("distance matrix is empty");
  if (!all_finite(data)) throw NumericError("distance matrix has non-finite entries");
  if (tag == MetricTag::kEuclidean || tag == MetricTag::kCosine) {
    for (double v : data.values()) {
      if (v < 0.0) throw NumericError("negative entry in a " + to_string(tag) + " distance matrix");
    }
  }
}

void save_distances(const DistanceMatrix& dist, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot open '" + path + "' for writing");
  write_feat_block(dist.data, static_cast<std::uint32_t>(dist.tag) << 8, out);
}

DistanceMatrix load_distances(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot open '" + path + "'");
  auto block = read_feat_block(in);
  const auto tag_bits = (block.flags >> 8) & 0xFF;
  if (tag_bits > static_cast<std::uint32_t>(MetricTag::kCustom)) {
    throw FormatError(FormatErrorKind::kInvalidHeader, "unknown metric tag in '" + path + "'");
  }
  DistanceMatrix d{std::move(block.data), static_cast<MetricTag>(tag_bits)};
  d.validate();
  return d;
}

namespace {

bool rows_are_unit(const FeatureMatrix& m) {
  if (m.normalized()) return true;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    if (std::abs(norm2(m.row(r)) - 1.0) > kUnitNormTolerance) return false;
  }
  return true;
}

}  // namespace

DistanceMatrix pairwise_distance(const FeatureMatrix& queries, const FeatureMatrix& gallery, MetricTag metric) {
  if (queries.dim() != gallery.dim()) throw ShapeError("pairwise_distance: dimension mismatch");
  DistanceMatrix out{Matrix(queries.rows(), gallery.rows()), metric};
  switch (metric) {
    case MetricTag::kEuclidean:
      for (std::size_t q = 0; q < queries.rows(); ++q) {
        auto a = queries.row(q);
        for (std::size_t g = 0; g < gallery.rows(); ++g) {
          auto b = gallery.row(g);
          double s = 0.0;
          for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
          out.data(q, g) = std::sqrt(s);
        }
      }
      break;
    case MetricTag::kCosine:
      if (!rows_are_unit(queries) || !rows_are_unit(gallery)) {
        throw InvalidArgument("pairwise_distance: cosine metric requires L2-normalized rows");
      }
      for (std::size_t q = 0; q < queries.rows(); ++q) {
        for (std::size_t g = 0; g < gallery.rows(); ++g) {
          // Clamp rounding excursions so the [0, 2] range holds exactly.
          out.data(q, g) = std::clamp(1.0 - dot(queries.row(q), gallery.row(g)), 0.0, 2.0);
        }
      }
      break;
    default:
      throw InvalidArgument("pairwise_distance supports euclidean and cosine only");
  }
  return out;
}

// ---------------------------------------------------------------------------
// k-reciprocal re-ranking

void RerankParams::validate() const {
  if (k2 < 1 || k1 < k2) throw InvalidArgument("rerank: need k1 >= k2 >= 1");
  if (!(lambda_jaccard >= 0.0 && lambda_jaccard <= 1.0)) throw InvalidArgument("rerank: lambda_jaccard must lie in [0, 1]");
}

namespace {

using Neighbors = std::vector<std::size_t>;

// Members of the (k+1)-nearest list of `i` that also hold `i` in their own (k+1)-nearest list.
Neighbors reciprocal_neighbors(const std::vector<Neighbors>& ranking, std::size_t i, std::size_t k) {
  Neighbors out;
  const auto& forward = ranking[i];
  for (std::size_t f = 0; f <= k; ++f) {
    const std::size_t cand = forward[f];
    const auto& back = ranking[cand];
    if (std::find(back.begin(), back.begin() + static_cast<std::ptrdiff_t>(k + 1), i) !=
        back.begin() + static_cast<std::ptrdiff_t>(k + 1)) {
      out.push_back(cand);
    }
  }
  return out;
}

}  // namespace

DistanceMatrix k_reciprocal_rerank(const DistanceMatrix& dist_qg, const DistanceMatrix& dist_qq,
                                   const DistanceMatrix& dist_gg, const RerankParams& params) {
  params.validate();
  const std::size_t nq = dist_qg.queries();
  const std::size_t ng = dist_qg.gallery();
  if (dist_qq.queries() != nq || dist_qq.gallery() != nq) throw ShapeError("rerank: dist_qq must be Q x Q");
  if (dist_gg.queries() != ng || dist_gg.gallery() != ng) throw ShapeError("rerank: dist_gg must be G x G");
  if (!all_finite(dist_qg.data) || !all_finite(dist_qq.data) || !all_finite(dist_gg.data)) {
    throw NumericError("rerank: non-finite input distance");
  }
  const std::size_t n = nq + ng;
  if (params.k1 >= n) {
    throw InvalidArgument("rerank: k1 = " + std::to_string(params.k1) + " needs more than " + std::to_string(n) +
                          " items");
  }
  if (params.lambda_jaccard == 1.0) return dist_qg;

  auto joint = [&](std::size_t i, std::size_t j) {
    if (i < nq) return j < nq ? dist_qq(i, j) : dist_qg(i, j - nq);
    return j < nq ? dist_qg(j, i - nq) : dist_gg(i - nq, j - nq);
  };

  // Squared distances scaled by the row maximum.
  Matrix scaled(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = joint(i, j);
      scaled(i, j) = d * d;
      mx = std::max(mx, scaled(i, j));
    }
    if (mx > 0.0) {
      for (std::size_t j = 0; j < n; ++j) scaled(i, j) /= mx;
    }
  }

  std::vector<Neighbors> ranking(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& order = ranking[i];
    order.resize(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scaled(i, a) < scaled(i, b); });
  }

  const auto half_k1 = static_cast<std::size_t>(std::nearbyint(static_cast<double>(params.k1) / 2.0));

  // Sparse soft-assignment rows: V[i] as (column, weight) pairs sorted by column.
  using SparseRow = std::vector<std::pair<std::size_t, double>>;
  std::vector<SparseRow> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Neighbors base = reciprocal_neighbors(ranking, i, params.k1);
    std::vector<char> in_base(n, 0), in_expansion(n, 0);
    for (auto b : base) in_base[b] = in_expansion[b] = 1;
    for (auto cand : base) {
      const Neighbors cand_set = reciprocal_neighbors(ranking, cand, half_k1);
      std::size_t overlap = 0;
      for (auto c : cand_set) overlap += in_base[c];
      if (static_cast<double>(overlap) > 2.0 / 3.0 * static_cast<double>(cand_set.size())) {
        for (auto c : cand_set) in_expansion[c] = 1;
      }
    }
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!in_expansion[j]) continue;
      const double w = std::exp(-scaled(i, j));
      v[i].emplace_back(j, w);
      total += w;
    }
    for (auto& [j, w] : v[i]) w /= total;
  }

  // Local query expansion: average the rows of the k2 nearest items.
  if (params.k2 != 1) {
    std::vector<SparseRow> expanded(n);
    std::vector<double> acc(n, 0.0);
    std::vector<char> touched(n, 0);
    const double inv_k2 = 1.0 / static_cast<double>(params.k2);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t t = 0; t < params.k2; ++t) {
        for (const auto& [j, w] : v[ranking[i][t]]) {
          acc[j] += w;
          touched[j] = 1;
        }
      }
      for (std::size_t j = 0; j < n; ++j) {
        if (!touched[j]) continue;
        expanded[i].emplace_back(j, acc[j] * inv_k2);
        acc[j] = 0.0;
        touched[j] = 0;
      }
    }
    v = std::move(expanded);
  }

  // Inverted index: column -> rows with a non-zero weight there.
  std::vector<std::vector<std::pair<std::size_t, double>>> inverted(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& [j, w] : v[i]) {
      if (w != 0.0) inverted[j].emplace_back(i, w);
    }
  }

  DistanceMatrix out{Matrix(nq, ng), MetricTag::kJaccardFused};
  std::vector<double> shared(n);
  const double lambda = params.lambda_jaccard;
  for (std::size_t q = 0; q < nq; ++q) {
    std::fill(shared.begin(), shared.end(), 0.0);
    for (const auto& [col, wq] : v[q]) {
      if (wq == 0.0) continue;
      for (const auto& [row, wr] : inverted[col]) shared[row] += std::min(wq, wr);
    }
    for (std::size_t g = 0; g < ng; ++g) {
      const double inter = shared[nq + g];
      const double jaccard = 1.0 - inter / (2.0 - inter);
      out.data(q, g) = jaccard * (1.0 - lambda) + dist_qg(q, g) * lambda;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string to_string(AuxKind kind) { return kind == AuxKind::kDistance ? "distance" : "similarity"; }

AuxKind aux_kind_from_string(const std::string& name) {
  if (name == "distance") return AuxKind::kDistance;
  if (name == "similarity") return AuxKind::kSimilarity;
  throw InvalidArgument("aux matrix kind must be 'distance' or 'similarity', got '" + name + "'");
}

void FusionParams::validate() const {
  if (!std::isfinite(lambda1) || !std::isfinite(lambda2) || lambda1 < 0.0 || lambda2 < 0.0) {
    throw InvalidArgument("fusion weights must be finite and >= 0");
  }
}

DistanceMatrix fuse_distances(const DistanceMatrix& d_v, const DistanceMatrix& d_o, const DistanceMatrix& d_c,
                              const FusionParams& params) {
  params.validate();
  if (!d_v.data.same_shape(d_o.data) || !d_v.data.same_shape(d_c.data)) {
    throw ShapeError("fuse_distances: matrices differ in shape");
  }
  DistanceMatrix out{Matrix(d_v.queries(), d_v.gallery()), MetricTag::kJaccardFused};
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data.values()[i] =
        d_v.data.values()[i] - params.lambda1 * d_o.data.values()[i] - params.lambda2 * d_c.data.values()[i];
  }
  return out;
}

FeatureMatrix tracklet_rerank(const FeatureMatrix& gallery, const GalleryManifest& manifest, std::size_t window) {
  if (window < 1) throw InvalidArgument("tracklet window must be >= 1");
  if (manifest.size() != gallery.rows()) throw ShapeError("tracklet_rerank: manifest size != gallery rows");
  if (window == 1) return gallery;

  std::map<std::int64_t, std::vector<std::size_t>> tracklets;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    if (manifest[i].tracklet != -1) tracklets[manifest[i].tracklet].push_back(i);
  }

  Matrix out = gallery.data();
  const std::size_t before = (window - 1) / 2;
  for (auto& [id, members] : tracklets) {
    std::stable_sort(members.begin(), members.end(),
                     [&](std::size_t a, std::size_t b) { return manifest[a].frame < manifest[b].frame; });
    const std::size_t len = members.size();
    for (std::size_t p = 0; p < len; ++p) {
      // Centered window [p - before, p - before + window), clipped to the tracklet.
      const auto lo = static_cast<std::ptrdiff_t>(p) - static_cast<std::ptrdiff_t>(before);
      const auto start = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, lo));
      const auto stop = static_cast<std::size_t>(
          std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(len), lo + static_cast<std::ptrdiff_t>(window)));
      auto dst = out.row(members[p]);
      std::fill(dst.begin(), dst.end(), 0.0);
      for (std::size_t t = start; t < stop; ++t) {
        auto src = gallery.row(members[t]);
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
      for (double& x : dst) x /= static_cast<double>(stop - start);
    }
  }
  FeatureMatrix averaged(std::move(out), false);
  return gallery.normalized() ? l2_normalize_rows(averaged) : averaged;
}

EnsembleNorm ensemble_norm_from_string(const std::string& name) {
  if (name == "minmax") return EnsembleNorm::kMinMax;
  if (name == "raw") return EnsembleNorm::kRaw;
  throw InvalidArgument("ensemble norm must be 'minmax' or 'raw', got '" + name + "'");
}

DistanceMatrix ensemble_distances(std::span<const DistanceMatrix> members, EnsembleNorm norm) {
  if (members.empty()) throw InvalidArgument("ensemble_distances: no members");
  const auto& first = members.front().data;
  DistanceMatrix out{Matrix(first.rows(), first.cols()), MetricTag::kCustom};
  for (const auto& m : members) {
    if (!m.data.same_shape(first)) throw ShapeError("ensemble_distances: members differ in shape");
    double lo = 0.0, scale = 1.0;
    if (norm == EnsembleNorm::kMinMax) {
      const auto [mn, mx] = std::minmax_element(m.data.values().begin(), m.data.values().end());
      lo = *mn;
      scale = *mx > *mn ? 1.0 / (*mx - *mn) : 0.0;
    }
    for (std::size_t i = 0; i < first.size(); ++i) out.data.values()[i] += (m.data.values()[i] - lo) * scale;
  }
  const double inv = 1.0 / static_cast<double>(members.size());
  for (double& v : out.data.values()) v *= inv;
  return out;
}

RankedList rank(const DistanceMatrix& dist) {
  RankedList out(dist.queries());
  for (std::size_t q = 0; q < dist.queries(); ++q) {
    auto& order = out[q];
    order.resize(dist.gallery());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dist(q, a) < dist(q, b); });
  }
  return out;
}

}  // namespace reidforge
