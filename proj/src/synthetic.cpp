#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "reidforge/errors.hpp"
#include "reidforge/harness.hpp"

namespace reidforge {

void SyntheticSpec::validate() const {
  if (num_identities < 1 || samples_per_identity < 1 || dim < 1 || cameras_per_domain < 1) {
    throw InvalidArgument("synthetic spec counts must be positive");
  }
  if (!(noise_sigma >= 0.0) || !(tracklet_noise >= 0.0)) throw InvalidArgument("synthetic noise must be >= 0");
  if (!shift_scale.empty() && shift_scale.size() != dim) throw InvalidArgument("shift_scale length != dim");
  if (!shift_offset.empty() && shift_offset.size() != dim) throw InvalidArgument("shift_offset length != dim");
}

void SyntheticSpec::set_uniform_shift(double scale, double offset) {
  shift_scale.assign(dim, scale);
  shift_offset.assign(dim, offset);
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng = make_rng(spec.seed);
  std::normal_distribution<double> unit(0.0, 1.0);

  Matrix centroids(spec.num_identities, spec.dim);
  for (std::size_t i = 0; i < spec.num_identities; ++i) {
    auto row = centroids.row(i);
    double n = 0.0;
    while (n == 0.0) {
      for (double& v : row) v = unit(rng);
      n = norm2(row);
    }
    for (double& v : row) v /= n;
  }

  const std::size_t copies = std::max<std::size_t>(1, spec.tracklet_copies);
  const std::size_t real_count = spec.samples_per_identity - spec.samples_per_identity / 2;
  std::vector<double> values;
  values.reserve(spec.num_identities * spec.samples_per_identity * copies * spec.dim);
  std::vector<ManifestEntry> entries;
  std::vector<double> sample(spec.dim);
  for (std::size_t i = 0; i < spec.num_identities; ++i) {
    for (std::size_t s = 0; s < spec.samples_per_identity; ++s) {
      for (std::size_t k = 0; k < spec.dim; ++k) sample[k] = centroids(i, k) + spec.noise_sigma * unit(rng);
      const bool shifted = s >= real_count;
      if (shifted) {
        for (std::size_t k = 0; k < spec.dim; ++k) {
          const double scale = spec.shift_scale.empty() ? 1.0 : spec.shift_scale[k];
          const double offset = spec.shift_offset.empty() ? 0.0 : spec.shift_offset[k];
          sample[k] = scale * sample[k] + offset;
        }
      }
      const std::size_t within = shifted ? s - real_count : s;
      const auto camera =
          static_cast<std::int64_t>((shifted ? spec.cameras_per_domain : 0) + within % spec.cameras_per_domain);
      const auto identity = spec.first_identity + static_cast<std::int64_t>(i);
      const std::string base = "id" + std::to_string(identity) + "_s" + std::to_string(s);

      if (spec.tracklet_copies == 0) {
        values.insert(values.end(), sample.begin(), sample.end());
        entries.push_back({base, identity, camera, -1, -1});
        continue;
      }
      const auto tracklet = static_cast<std::int64_t>(i * spec.samples_per_identity + s);
      for (std::size_t f = 0; f < spec.tracklet_copies; ++f) {
        for (std::size_t k = 0; k < spec.dim; ++k) values.push_back(sample[k] + spec.tracklet_noise * unit(rng));
        entries.push_back({base + "_f" + std::to_string(f), identity, camera, tracklet, static_cast<std::int64_t>(f)});
      }
    }
  }
  const std::size_t rows = entries.size();
  return {FeatureMatrix(Matrix(rows, spec.dim, std::move(values))), GalleryManifest(std::move(entries))};
}

std::vector<std::size_t> pk_sample(const GalleryManifest& manifest, std::size_t identities_per_batch,
                                   std::size_t instances, Rng& rng) {
  if (identities_per_batch < 1 || instances < 1) throw InvalidArgument("pk_sample: P and K must be >= 1");
  std::map<std::int64_t, std::vector<std::size_t>> by_identity;
  for (std::size_t i = 0; i < manifest.size(); ++i) by_identity[manifest[i].identity].push_back(i);
  if (by_identity.size() < identities_per_batch) {
    throw InvalidArgument("pk_sample: need " + std::to_string(identities_per_batch) + " identities, have " +
                          std::to_string(by_identity.size()));
  }
  std::vector<const std::vector<std::size_t>*> pools;
  pools.reserve(by_identity.size());
  for (const auto& [id, items] : by_identity) pools.push_back(&items);
  std::shuffle(pools.begin(), pools.end(), rng);

  std::vector<std::size_t> batch;
  batch.reserve(identities_per_batch * instances);
  for (std::size_t p = 0; p < identities_per_batch; ++p) {
    std::vector<std::size_t> items = *pools[p];
    if (items.size() >= instances) {
      std::shuffle(items.begin(), items.end(), rng);
      batch.insert(batch.end(), items.begin(), items.begin() + static_cast<std::ptrdiff_t>(instances));
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, items.size() - 1);
      for (std::size_t k = 0; k < instances; ++k) batch.push_back(items[pick(rng)]);
    }
  }
  return batch;
}

BenchmarkSpec BenchmarkSpec::from_config(const Config& config, std::uint64_t seed) {
  BenchmarkSpec b;
  b.train_identities = config.get_size("synthetic.train_identities", b.train_identities);
  b.heldout_identities = config.get_size("synthetic.heldout_identities", b.heldout_identities);
  b.samples_per_identity = config.get_size("synthetic.samples_per_identity", b.samples_per_identity);
  b.dim = config.get_size("synthetic.dim", b.dim);
  b.shift_scale = config.get_double("synthetic.shift_scale", b.shift_scale);
  b.shift_offset = config.get_double("synthetic.shift_offset", b.shift_offset);
  b.noise_sigma = config.get_double("synthetic.noise_sigma", b.noise_sigma);
  b.tracklet_copies = config.get_size("synthetic.tracklet_copies", b.tracklet_copies);
  b.tracklet_noise = config.get_double("synthetic.tracklet_noise", b.tracklet_noise);
  b.seed = seed;
  return b;
}

Benchmark make_benchmark(const BenchmarkSpec& b) {
  if (b.samples_per_identity < 4) throw InvalidArgument("benchmark needs at least 4 samples per identity");
  if (b.train_identities < 2 || b.heldout_identities < 1) throw InvalidArgument("benchmark identity counts too small");
  SyntheticSpec spec;
  spec.num_identities = b.train_identities + b.heldout_identities;
  spec.samples_per_identity = b.samples_per_identity;
  spec.dim = b.dim;
  spec.set_uniform_shift(b.shift_scale, b.shift_offset);
  spec.noise_sigma = b.noise_sigma;
  spec.tracklet_copies = b.tracklet_copies;
  spec.tracklet_noise = b.tracklet_noise;
  spec.seed = b.seed;
  const SyntheticData all = generate_synthetic(spec);

  const std::size_t real_count = b.samples_per_identity - b.samples_per_identity / 2;
  const std::size_t copies = std::max<std::size_t>(1, b.tracklet_copies);
  const std::size_t per_identity = b.samples_per_identity * copies;

  std::vector<std::size_t> train, query, gallery;
  for (std::size_t i = 0; i < spec.num_identities; ++i) {
    for (std::size_t s = 0; s < b.samples_per_identity; ++s) {
      for (std::size_t f = 0; f < copies; ++f) {
        const std::size_t row = i * per_identity + s * copies + f;
        if (i < b.train_identities) {
          train.push_back(row);
        } else if (s == 0 || s == real_count) {
          if (f == 0) query.push_back(row);
        } else {
          gallery.push_back(row);
        }
      }
    }
  }
  auto take = [&all](const std::vector<std::size_t>& rows) {
    return SyntheticData{FeatureMatrix(gather_rows(all.features.data(), rows)), all.manifest.slice(rows)};
  };
  return {take(train), take(query), take(gallery)};
}

}  // namespace reidforge
