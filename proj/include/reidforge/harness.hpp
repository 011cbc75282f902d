#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "reidforge/config.hpp"
#include "reidforge/errors.hpp"
#include "reidforge/evalkit.hpp"
#include "reidforge/featstore.hpp"
#include "reidforge/losses.hpp"
#include "reidforge/malw.hpp"
#include "reidforge/reidnet.hpp"
#include "reidforge/retrieval.hpp"

namespace reidforge {

/// Failure inside a pipeline or training stage; what() is prefixed with "[stage] ".
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what) : Error("[" + stage + "] " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// ---------------------------------------------------------------------------
// Synthetic two-domain data

struct SyntheticSpec {
  std::size_t num_identities = 10;
  std::size_t samples_per_identity = 8;
  std::size_t dim = 16;
  /// Per-channel affine for the synthetic half; empty means identity.
  std::vector<double> shift_scale;
  std::vector<double> shift_offset;
  double noise_sigma = 0.1;
  std::size_t cameras_per_domain = 2;
  /// > 0 expands every sample into a tracklet of this many noisy copies (frames 0..n-1).
  std::size_t tracklet_copies = 0;
  double tracklet_noise = 0.05;
  std::int64_t first_identity = 0;
  std::uint64_t seed = 0;

  void validate() const;
  /// Scalar shift broadcast over all channels.
  void set_uniform_shift(double scale, double offset);
};

struct SyntheticData {
  FeatureMatrix features;
  GalleryManifest manifest;
};

/// Identity centroids on the unit sphere plus Gaussian noise. The second half
/// of each identity's samples goes through the domain affine and uses camera
/// ids [cameras_per_domain, 2 * cameras_per_domain).
SyntheticData generate_synthetic(const SyntheticSpec& spec);

/// P identities without replacement, K samples each (with replacement when
/// an identity has fewer than K). Indices are grouped by identity.
std::vector<std::size_t> pk_sample(const GalleryManifest& manifest, std::size_t identities_per_batch,
                                   std::size_t instances, Rng& rng);

// ---------------------------------------------------------------------------
// Training

enum class MetricLoss { kSupCon, kTriplet };
MetricLoss metric_loss_from_string(const std::string& name);

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_identities = 16;  // P
  std::size_t batch_instances = 8;    // K
  double learning_rate = 0.02;
  std::size_t num_heads = 2;
  std::size_t head_dim = 0;  // 0 = input_dim / num_heads

  bool malw_enabled = true;
  std::size_t malw_k = 500;
  double malw_alpha = 0.9;
  MalwMode malw_mode = MalwMode::kLiteral;
  MalwRecord malw_record = MalwRecord::kWeighted;
  /// Weights used when MALW is off.
  double fixed_id_weight = 1.0;
  double fixed_metric_weight = 1.0;

  MixStyleConfig mixstyle{0.1, false, 1e-6};
  MetricLoss metric_loss = MetricLoss::kSupCon;
  double id_epsilon = 0.1;
  double supcon_tau = 0.1;
  double triplet_margin = 0.3;
  std::uint64_t seed = 0;

  void validate() const;
  static TrainConfig from_config(const Config& config, const std::string& section = "train");
};

struct StepLoss {
  double id = 0.0;
  double metric = 0.0;
  double total = 0.0;
  double lambda_id = 1.0;
  double lambda_metric = 1.0;
};

struct TrainResult {
  HeadParams params;
  std::vector<MalwUpdate> trajectory;
  std::vector<StepLoss> losses;
  /// Identity label -> classifier row.
  std::vector<std::int64_t> class_labels;
};

/// SGD over PK batches: [mixstyle] -> head -> id loss + metric loss on
/// L2-normalized embeddings -> MALW weighting -> backward -> update.
/// Throws StageError("train") with the step index on a non-finite loss.
TrainResult train_head(const FeatureMatrix& features, const GalleryManifest& manifest, const TrainConfig& config);

/// Embeds rows through the head and L2-normalizes them.
FeatureMatrix embed_features(const FeatureMatrix& features, const HeadParams& params);

void write_losses_csv(const std::vector<StepLoss>& losses, std::ostream& out);

// ---------------------------------------------------------------------------
// Standard synthetic benchmark: train identities plus a held-out query/gallery split.

struct BenchmarkSpec {
  std::size_t train_identities = 40;
  std::size_t heldout_identities = 10;
  std::size_t samples_per_identity = 16;
  std::size_t dim = 32;
  double shift_scale = 3.0;
  double shift_offset = 2.0;
  double noise_sigma = 0.25;
  std::size_t tracklet_copies = 0;
  double tracklet_noise = 0.25;
  std::uint64_t seed = 0;

  static BenchmarkSpec from_config(const Config& config, std::uint64_t seed);
};

struct Benchmark {
  SyntheticData train;
  SyntheticData query;
  SyntheticData gallery;
};

/// Held-out queries are the first sample of each identity in each domain
/// (frame 0 of its tracklet when tracklets are on); everything else of the
/// held-out identities forms the gallery.
Benchmark make_benchmark(const BenchmarkSpec& spec);

/// Trains on the benchmark's train split and returns held-out mAP under the
/// default protocol with euclidean distance on normalized embeddings.
double heldout_map(const Benchmark& bench, const TrainConfig& config);

// ---------------------------------------------------------------------------
// Pipeline

struct PipelineResult {
  EvalReport report;
  DistanceMatrix initial;
  DistanceMatrix final_distances;
  std::optional<TrainResult> training;
  std::vector<std::string> stages_run;
};

/// Runs the configured chain and, when output.dir is set, writes report.txt,
/// per_query_ap.csv, dist_initial.feat, dist_final.feat and training artifacts.
PipelineResult run_pipeline(const Config& config);

}  // namespace reidforge
