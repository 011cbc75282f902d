#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "oracles/finite_diff.hpp"
#include "oracles/rerank_oracle.hpp"
#include "reidforge/errors.hpp"
#include "reidforge/retrieval.hpp"

using namespace reidforge;
using reidforge::testing::random_matrix;

namespace {

DistanceMatrix euclid(const Matrix& a, const Matrix& b) {
  return pairwise_distance(FeatureMatrix(a), FeatureMatrix(b), MetricTag::kEuclidean);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

}  // namespace

TEST_CASE("pairwise distance small cases") {
  const FeatureMatrix e1(Matrix(1, 2, {1.0, 0.0}), true);
  const FeatureMatrix e12(Matrix(2, 2, {1.0, 0.0, 0.0, 1.0}), true);
  const auto cos = pairwise_distance(e1, e12, MetricTag::kCosine);
  CHECK(cos.data == Matrix(1, 2, {0.0, 1.0}));
  CHECK(cos.tag == MetricTag::kCosine);
  const auto d = euclid(Matrix(1, 2, {0.0, 0.0}), Matrix(1, 2, {3.0, 4.0}));
  CHECK(d(0, 0) == 5.0);
  CHECK_THROWS(pairwise_distance(FeatureMatrix(Matrix(1, 2, {3.0, 4.0})), e12, MetricTag::kCosine));
  CHECK_THROWS_AS(euclid(Matrix(1, 2), Matrix(1, 3)), ShapeError);
}

TEST_CASE("pairwise distance matches a scalar loop") {
  std::mt19937_64 rng(4);
  const Matrix a = random_matrix(rng, 20, 16), b = random_matrix(rng, 20, 16);
  const auto d = euclid(a, b);
  for (std::size_t i = 0; i < 20; ++i) {
    for (std::size_t j = 0; j < 20; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 16; ++k) s += (a(i, k) - b(j, k)) * (a(i, k) - b(j, k));
      CHECK(std::abs(d(i, j) - std::sqrt(s)) < 1e-10);
    }
  }
}

TEST_CASE("distance matrix files keep their tag") {
  const auto path = std::filesystem::temp_directory_path() / "reidforge_dist_tag.feat";
  DistanceMatrix d{Matrix(2, 3, {0.5, 1, 2, 3, 4, -1.25}), MetricTag::kJaccardFused};
  save_distances(d, path.string());
  CHECK(load_distances(path.string()) == d);
  std::filesystem::remove(path);
}

TEST_CASE("rerank with lambda one returns the input") {
  std::mt19937_64 rng(6);
  const Matrix q = random_matrix(rng, 3, 4), g = random_matrix(rng, 7, 4);
  const auto qg = euclid(q, g);
  const auto out = k_reciprocal_rerank(qg, euclid(q, q), euclid(g, g), RerankParams{3, 2, 1.0});
  CHECK(out.data == qg.data);
}

TEST_CASE("rerank toy case equals the dense oracle") {
  // 2 queries and 4 gallery items on a line.
  const Matrix q(2, 1, {0.0, 3.0});
  const Matrix g(4, 1, {0.4, 1.1, 2.7, 3.5});
  const auto qg = euclid(q, g), qq = euclid(q, q), gg = euclid(g, g);
  const auto out = k_reciprocal_rerank(qg, qq, gg, RerankParams{3, 2, 0.3});
  const Matrix ref = testing::oracle_rerank(qg.data, qq.data, gg.data, 3, 2, 0.3);
  CHECK(max_abs_diff(out.data, ref) < 1e-9);
  CHECK(out.tag == MetricTag::kJaccardFused);
}

TEST_CASE("rerank matches the oracle on random instances") {
  std::mt19937_64 rng(77);
  for (int t = 0; t < 10; ++t) {
    const std::size_t nq = 2 + rng() % 4, ng = 8 + rng() % 10;
    const Matrix q = random_matrix(rng, nq, 3), g = random_matrix(rng, ng, 3);
    const auto qg = euclid(q, g), qq = euclid(q, q), gg = euclid(g, g);
    for (std::size_t k1 : {3u, 5u}) {
      for (std::size_t k2 : {1u, 2u, 3u}) {
        const auto out = k_reciprocal_rerank(qg, qq, gg, RerankParams{k1, k2, 0.3});
        const Matrix ref = testing::oracle_rerank(qg.data, qq.data, gg.data, k1, k2, 0.3);
        CHECK(max_abs_diff(out.data, ref) < 1e-9);
      }
    }
  }
}

TEST_CASE("rerank lifts a true match over an isolated distractor") {
  // Query identity: q, t, t2, t3 spread at about unit distance from each other.
  // Distractor d sits closer to q but belongs to a tight cluster of its own.
  const Matrix q(1, 2, {0.0, 0.0});
  const Matrix g(7, 2, {1.0, 0.0,     // t
                        0.5, 0.9,     // t2
                        0.5, -0.9,    // t3
                        -0.9, 0.0,    // d
                        -1.0, 0.1,    // d2
                        -1.0, -0.1,   // d3
                        -1.1, 0.0});  // d4
  const auto qg = euclid(q, g);
  REQUIRE(rank(qg)[0][0] == 3);
  // k2 = 1: query expansion over the initial top-2 would average in d's own row.
  const auto out = k_reciprocal_rerank(qg, euclid(q, q), euclid(g, g), RerankParams{3, 1, 0.3});
  CHECK(out(0, 0) < out(0, 3));
  CHECK(rank(out)[0][0] == 0);
}

TEST_CASE("rerank parameter checks") {
  const DistanceMatrix one{Matrix(1, 1), MetricTag::kEuclidean};
  const DistanceMatrix three{Matrix(3, 3), MetricTag::kEuclidean};
  const DistanceMatrix qg{Matrix(1, 3), MetricTag::kEuclidean};
  CHECK_THROWS(k_reciprocal_rerank(qg, one, three, RerankParams{4, 2, 0.3}));
  CHECK_THROWS(RerankParams{2, 3, 0.3}.validate());
  CHECK_THROWS(RerankParams{3, 0, 0.3}.validate());
  CHECK_THROWS(RerankParams{3, 2, 1.1}.validate());
  CHECK_THROWS_AS(k_reciprocal_rerank(qg, three, three, RerankParams{2, 1, 0.3}), ShapeError);
}

TEST_CASE("fuse_distances") {
  const DistanceMatrix v{Matrix(1, 1, {1.0}), MetricTag::kEuclidean};
  const DistanceMatrix o{Matrix(1, 1, {0.5}), MetricTag::kCustom};
  const DistanceMatrix c{Matrix(1, 1, {0.2}), MetricTag::kCustom};
  const auto f = fuse_distances(v, o, c, FusionParams{0.1, 0.1});
  CHECK(f(0, 0) == doctest::Approx(0.93).epsilon(1e-15));
  CHECK(f.tag == MetricTag::kJaccardFused);
  CHECK(fuse_distances(v, o, c, FusionParams{0.0, 0.0}).data == v.data);
  const auto neg = fuse_distances(v, o, c, FusionParams{3.0, 0.0});
  CHECK(neg(0, 0) == doctest::Approx(-0.5));
  CHECK_THROWS_AS(fuse_distances(v, DistanceMatrix{Matrix(1, 2)}, c, FusionParams{}), ShapeError);
  CHECK(aux_kind_from_string("similarity") == AuxKind::kSimilarity);
  CHECK_THROWS(aux_kind_from_string("sim"));
}

TEST_CASE("tracklet_rerank") {
  const FeatureMatrix f(Matrix(4, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1, 0.6, 0.8, 0}), true);
  const GalleryManifest m({{"a", 1, 0, 5, 2}, {"b", 1, 0, 5, 0}, {"c", 1, 0, 5, 1}, {"d", 2, 1, -1, -1}});
  CHECK(tracklet_rerank(f, m, 1) == f);

  const auto out = tracklet_rerank(f, m, 3);
  CHECK(out.normalized());
  const double v = 1.0 / std::sqrt(3.0);
  // Middle frame (row c) sees all three.
  for (std::size_t k = 0; k < 3; ++k) CHECK(out.data()(2, k) == doctest::Approx(v).epsilon(1e-14));
  // Frame 0 (row b) sees frames 0 and 1: (e2 + e3) / 2 normalized.
  CHECK(out.data()(1, 0) == 0.0);
  CHECK(out.data()(1, 1) == doctest::Approx(1.0 / std::sqrt(2.0)));
  // Non-tracklet row copied exactly.
  CHECK(out.data()(3, 0) == 0.6);
  CHECK(out.data()(3, 1) == 0.8);

  const auto wide = tracklet_rerank(f, m, 9);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t k = 0; k < 3; ++k) CHECK(wide.data()(r, k) == doctest::Approx(v).epsilon(1e-14));
  CHECK_THROWS(tracklet_rerank(f, m, 0));
}

TEST_CASE("ensemble_distances") {
  const DistanceMatrix a{Matrix(2, 2, {1.0, 3.0, 5.0, 2.0})};
  const auto one = ensemble_distances(std::vector<DistanceMatrix>{a});
  CHECK(one.data == Matrix(2, 2, {0.0, 0.5, 1.0, 0.25}));
  const auto pair = ensemble_distances(std::vector<DistanceMatrix>{a, one});
  CHECK(max_abs_diff(pair.data, one.data) < 1e-15);
  const auto raw = ensemble_distances(std::vector<DistanceMatrix>{a, a}, EnsembleNorm::kRaw);
  CHECK(raw.data == a.data);
  CHECK_THROWS_AS(ensemble_distances(std::vector<DistanceMatrix>{a, DistanceMatrix{Matrix(1, 2)}}), ShapeError);
  CHECK_THROWS(ensemble_distances(std::vector<DistanceMatrix>{}));

  std::mt19937_64 rng(9);
  std::vector<DistanceMatrix> ms;
  for (int i = 0; i < 3; ++i) ms.push_back(DistanceMatrix{random_matrix(rng, 4, 5)});
  const auto out = ensemble_distances(ms);
  for (std::size_t i = 0; i < 20; ++i) {
    double acc = 0.0;
    for (const auto& m : ms) {
      double lo = m.data.values()[0], hi = lo;
      for (double v : m.data.values()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      acc += (m.data.values()[i] - lo) / (hi - lo);
    }
    CHECK(std::abs(out.data.values()[i] - acc / 3.0) < 1e-12);
  }
}

TEST_CASE("rank") {
  CHECK(rank(DistanceMatrix{Matrix(1, 3, {0.2, 0.1, 0.3})})[0] == std::vector<std::size_t>{1, 0, 2});
  CHECK(rank(DistanceMatrix{Matrix(1, 4, 7.0)})[0] == std::vector<std::size_t>{0, 1, 2, 3});
  std::mt19937_64 rng(3);
  DistanceMatrix d{random_matrix(rng, 5, 9)};
  DistanceMatrix f = d;
  for (double& v : f.data.values()) v = 2.0 * v + 1.0;
  CHECK(rank(d) == rank(f));
}

TEST_CASE("metric tag names") {
  for (auto t : {MetricTag::kEuclidean, MetricTag::kCosine, MetricTag::kJaccardFused, MetricTag::kCustom})
    CHECK(metric_from_string(to_string(t)) == t);
  CHECK_THROWS(metric_from_string("manhattan"));
}
