#include <filesystem>
#include <fstream>
#include <functional>

#include "reidforge/errors.hpp"
#include "reidforge/harness.hpp"

namespace reidforge {

namespace {

template <typename F>
auto stage(const std::string& name, F&& body) -> decltype(body()) {
  try {
    return body();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

struct Inputs {
  FeatureMatrix query;
  GalleryManifest query_meta;
  FeatureMatrix gallery;
  GalleryManifest gallery_meta;
};

void write_text(const std::filesystem::path& path, const std::function<void(std::ostream&)>& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot open '" + path.string() + "' for writing");
  body(out);
  if (!out) throw FormatError(FormatErrorKind::kIo, "write to '" + path.string() + "' failed");
}

}  // namespace

PipelineResult run_pipeline(const Config& config) {
  PipelineResult result;
  const auto seed = static_cast<std::uint64_t>(config.get_int("seed", 0));
  const std::string source = config.get_string("input.source", "files");

  Inputs in = stage("input", [&] {
    if (source == "synthetic") {
      const Benchmark bench = make_benchmark(BenchmarkSpec::from_config(config, seed));
      if (config.get_bool("synthetic.train", true)) {
        TrainConfig tc = TrainConfig::from_config(config);
        result.training = stage("train", [&] { return train_head(bench.train.features, bench.train.manifest, tc); });
        result.stages_run.push_back("train");
      }
      return Inputs{bench.query.features, bench.query.manifest, bench.gallery.features, bench.gallery.manifest};
    }
    if (source != "files") throw InvalidArgument("input.source must be 'files' or 'synthetic'");
    Inputs loaded{load_features(config.require_string("input.query_features")),
                  load_manifest(config.require_string("input.query_manifest")),
                  load_features(config.require_string("input.gallery_features")),
                  load_manifest(config.require_string("input.gallery_manifest"))};
    if (loaded.query.rows() != loaded.query_meta.size()) throw ShapeError("query features and manifest differ in length");
    if (loaded.gallery.rows() != loaded.gallery_meta.size()) {
      throw ShapeError("gallery features and manifest differ in length");
    }
    return loaded;
  });

  if (result.training || config.has("embed.head")) {
    stage("embed", [&] {
      const HeadParams head = result.training ? result.training->params : load_head(config.require_string("embed.head"));
      in.query = embed_features(in.query, head);
      in.gallery = embed_features(in.gallery, head);
    });
    result.stages_run.push_back("embed");
  }

  if (config.get_bool("tracklet.enabled", false)) {
    in.gallery = stage("tracklet", [&] {
      return tracklet_rerank(in.gallery, in.gallery_meta, config.get_size("tracklet.window", 3));
    });
    result.stages_run.push_back("tracklet");
  }

  const MetricTag metric = stage("distance", [&] { return metric_from_string(config.get_string("distance.metric", "euclidean")); });
  result.initial = stage("distance", [&] { return pairwise_distance(in.query, in.gallery, metric); });
  result.stages_run.push_back("distance");
  DistanceMatrix current = result.initial;

  const auto order = config.has("pipeline.order") ? config.get_list("pipeline.order")
                                                  : std::vector<std::string>{"fuse", "rerank"};
  for (const auto& step : order) {
    if (step == "fuse") {
      if (!config.get_bool("fuse.enabled", false)) continue;
      current = stage("fuse", [&] {
        // The declared kinds are required so every fused run states how its
        // auxiliary matrices were produced; fusion itself applies them as given.
        (void)aux_kind_from_string(config.require_string("fuse.orientation_kind"));
        (void)aux_kind_from_string(config.require_string("fuse.camera_kind"));
        const auto d_o = load_distances(config.require_string("fuse.orientation"));
        const auto d_c = load_distances(config.require_string("fuse.camera"));
        const FusionParams p{config.get_double("fuse.lambda1", 0.1), config.get_double("fuse.lambda2", 0.1)};
        return fuse_distances(current, d_o, d_c, p);
      });
      result.stages_run.push_back("fuse");
    } else if (step == "rerank") {
      if (!config.get_bool("rerank.enabled", false)) continue;
      current = stage("rerank", [&] {
        const RerankParams p{config.get_size("rerank.k1", 20), config.get_size("rerank.k2", 6),
                             config.get_double("rerank.lambda_jaccard", 0.3)};
        return k_reciprocal_rerank(current, pairwise_distance(in.query, in.query, metric),
                                   pairwise_distance(in.gallery, in.gallery, metric), p);
      });
      result.stages_run.push_back("rerank");
    } else {
      throw StageError("pipeline", "unknown stage '" + step + "' in pipeline.order");
    }
  }

  if (config.get_bool("ensemble.enabled", false)) {
    current = stage("ensemble", [&] {
      std::vector<DistanceMatrix> members{current};
      for (const auto& path : config.get_list("ensemble.members")) members.push_back(load_distances(path));
      return ensemble_distances(members, ensemble_norm_from_string(config.get_string("ensemble.norm", "minmax")));
    });
    result.stages_run.push_back("ensemble");
  }
  result.final_distances = current;

  result.report = stage("eval", [&] {
    EvalProtocol protocol;
    protocol.cross_camera_filter = config.get_bool("eval.cross_camera_filter", true);
    const auto unmatched = config.get_string("eval.unmatched", "exclude");
    if (unmatched != "exclude" && unmatched != "zero") throw InvalidArgument("eval.unmatched must be 'exclude' or 'zero'");
    protocol.score_unmatched_as_zero = unmatched == "zero";
    if (const auto t = config.get_size("eval.truncate", 0); t > 0) protocol.truncate_at = t;
    for (const auto& id : config.get_list("eval.junk_ids")) protocol.junk_ids.insert(std::stoll(id));
    return evaluate(current, in.query_meta, in.gallery_meta, protocol, config.get_size("eval.max_rank", 10));
  });
  result.stages_run.push_back("eval");

  if (config.has("output.dir")) {
    stage("output", [&] {
      const std::filesystem::path dir = config.require_string("output.dir");
      std::filesystem::create_directories(dir);
      write_text(dir / "report.txt", [&](std::ostream& out) { write_report(result.report, out); });
      write_text(dir / "per_query_ap.csv", [&](std::ostream& out) { write_per_query_csv(result.report, out); });
      save_distances(result.initial, (dir / "dist_initial.feat").string());
      save_distances(result.final_distances, (dir / "dist_final.feat").string());
      if (result.training) {
        save_head(result.training->params, (dir / "head.params").string());
        write_text(dir / "trajectory.csv",
                   [&](std::ostream& out) { write_trajectory_csv(result.training->trajectory, out); });
        write_text(dir / "losses.csv", [&](std::ostream& out) { write_losses_csv(result.training->losses, out); });
      }
    });
  }
  return result;
}

}  // namespace reidforge
