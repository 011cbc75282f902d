#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "reidforge/harness.hpp"

using namespace reidforge;
namespace fs = std::filesystem;

namespace {

// Anything thrown inside `body` is reported as "[stage] message".
template <typename F>
void stage(const std::string& name, F&& body) {
  try {
    body();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

void write_text(const std::string& path, const std::function<void(std::ostream&)>& body) {
  if (path == "-") {
    body(std::cout);
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot open '" + path + "' for writing");
  body(out);
}

Config load_config(const std::string& path) {
  Config c;
  if (!path.empty()) c = Config::load(path);
  apply_env_overrides(c);
  return c;
}

void put(Config& c, const std::string& key, const std::optional<std::string>& v) {
  if (v) c.set(key, *v);
}

std::optional<std::string> opt_str(const std::optional<double>& v) {
  if (!v) return std::nullopt;
  return fmt::format("{:.17g}", *v);
}
std::optional<std::string> opt_str(const std::optional<std::size_t>& v) {
  if (!v) return std::nullopt;
  return std::to_string(*v);
}

struct RetrievalFlags {
  std::optional<std::size_t> k1, k2, tracklet_window;
  std::optional<double> lambda_jaccard, lambda1, lambda2;
  std::optional<std::string> ensemble_norm;
};

void add_retrieval_flags(CLI::App* cmd, RetrievalFlags& f) {
  cmd->add_option("--k1", f.k1, "reciprocal neighborhood size");
  cmd->add_option("--k2", f.k2, "local query expansion size");
  cmd->add_option("--lambda-jaccard", f.lambda_jaccard, "weight of the original distance in the blend");
  cmd->add_option("--lambda1", f.lambda1, "orientation weight for fusion");
  cmd->add_option("--lambda2", f.lambda2, "camera weight for fusion");
  cmd->add_option("--tracklet-window", f.tracklet_window, "consecutive frames averaged per tracklet item");
  cmd->add_option("--ensemble-norm", f.ensemble_norm, "member normalization")
      ->check(CLI::IsMember({"minmax", "raw"}));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"reidforge: re-identification head training, retrieval post-processing and evaluation"};
  app.require_subcommand(1);

  // gen
  std::string gen_out, gen_config;
  std::optional<std::size_t> gen_tracklets;
  auto* gen = app.add_subcommand("gen", "write a synthetic train/query/gallery benchmark");
  gen->add_option("-o,--out-dir", gen_out, "output directory")->required();
  gen->add_option("-c,--config", gen_config, "config file ([synthetic] section and seed)");
  gen->add_option("--tracklet-copies", gen_tracklets, "noisy copies per item (0 = no tracklets)");

  // train
  std::string tr_features, tr_manifest, tr_config, tr_out, tr_traj, tr_losses;
  auto* train = app.add_subcommand("train", "train the multi-head embedding head");
  train->add_option("-f,--features", tr_features, "training features (FEAT)")->required();
  train->add_option("-m,--manifest", tr_manifest, "training manifest")->required();
  train->add_option("-c,--config", tr_config, "config file ([train] section and seed)");
  train->add_option("-o,--out", tr_out, "output head parameters")->required();
  train->add_option("--trajectory", tr_traj, "MALW trajectory CSV");
  train->add_option("--losses", tr_losses, "per-step loss CSV");

  // dist
  std::string d_query, d_gallery, d_head, d_out, d_metric = "euclidean";
  auto* dist = app.add_subcommand("dist", "pairwise query x gallery distances");
  dist->add_option("-q,--query", d_query, "query features")->required();
  dist->add_option("-g,--gallery", d_gallery, "gallery features")->required();
  dist->add_option("--head", d_head, "embed both sets through this head first");
  dist->add_option("--metric", d_metric, "distance metric")->check(CLI::IsMember({"euclidean", "cosine"}));
  dist->add_option("-o,--out", d_out, "output distance matrix")->required();

  // fuse
  std::string f_dist, f_orient, f_camera, f_out, f_okind = "distance", f_ckind = "distance";
  RetrievalFlags fuse_flags;
  auto* fuse = app.add_subcommand("fuse", "D_v - lambda1 D_o - lambda2 D_c");
  fuse->add_option("-d,--dist", f_dist, "appearance distances")->required();
  fuse->add_option("--orientation", f_orient, "orientation matrix")->required();
  fuse->add_option("--camera", f_camera, "camera matrix")->required();
  fuse->add_option("--orientation-kind", f_okind, "how the orientation matrix was produced")
      ->check(CLI::IsMember({"distance", "similarity"}));
  fuse->add_option("--camera-kind", f_ckind, "how the camera matrix was produced")
      ->check(CLI::IsMember({"distance", "similarity"}));
  fuse->add_option("-o,--out", f_out, "output")->required();
  add_retrieval_flags(fuse, fuse_flags);

  // rerank
  std::string r_query, r_gallery, r_metric = "euclidean", r_qg, r_qq, r_gg, r_out;
  RetrievalFlags rerank_flags;
  auto* rerank = app.add_subcommand("rerank", "k-reciprocal re-ranking");
  rerank->add_option("-q,--query", r_query, "query features (distances computed internally)");
  rerank->add_option("-g,--gallery", r_gallery, "gallery features");
  rerank->add_option("--metric", r_metric, "metric for feature input")->check(CLI::IsMember({"euclidean", "cosine"}));
  rerank->add_option("--qg", r_qg, "query x gallery distances (instead of features)");
  rerank->add_option("--qq", r_qq, "query x query distances");
  rerank->add_option("--gg", r_gg, "gallery x gallery distances");
  rerank->add_option("-o,--out", r_out, "output")->required();
  add_retrieval_flags(rerank, rerank_flags);

  // tracklet
  std::string t_features, t_manifest, t_out;
  RetrievalFlags tracklet_flags;
  auto* tracklet = app.add_subcommand("tracklet", "average features over consecutive tracklet frames");
  tracklet->add_option("-f,--features", t_features, "gallery features")->required();
  tracklet->add_option("-m,--manifest", t_manifest, "gallery manifest")->required();
  tracklet->add_option("-o,--out", t_out, "output features")->required();
  add_retrieval_flags(tracklet, tracklet_flags);

  // ensemble
  std::vector<std::string> e_inputs;
  std::string e_out;
  RetrievalFlags ensemble_flags;
  auto* ensemble = app.add_subcommand("ensemble", "average several distance matrices");
  ensemble->add_option("inputs", e_inputs, "distance matrices")->required();
  ensemble->add_option("-o,--out", e_out, "output")->required();
  add_retrieval_flags(ensemble, ensemble_flags);

  // eval
  std::string v_dist, v_qm, v_gm, v_report = "-", v_per_query, v_unmatched = "exclude";
  std::size_t v_max_rank = 10, v_truncate = 0;
  bool v_no_filter = false;
  std::vector<std::int64_t> v_junk;
  auto* eval = app.add_subcommand("eval", "mAP and CMC");
  eval->add_option("-d,--dist", v_dist, "distance matrix")->required();
  eval->add_option("--query-manifest", v_qm, "query manifest")->required();
  eval->add_option("--gallery-manifest", v_gm, "gallery manifest")->required();
  eval->add_option("--max-rank", v_max_rank, "CMC length");
  eval->add_option("--truncate", v_truncate, "truncate AP at this rank (0 = full list)");
  eval->add_flag("--no-cross-camera-filter", v_no_filter, "keep same-camera matches");
  eval->add_option("--unmatched", v_unmatched, "queries without a valid match")
      ->check(CLI::IsMember({"exclude", "zero"}));
  eval->add_option("--junk-ids", v_junk, "identities removed from the gallery")->delimiter(',');
  eval->add_option("--report", v_report, "report path ('-' = stdout)");
  eval->add_option("--per-query", v_per_query, "per-query AP CSV");

  // pipeline
  std::string p_config, p_out;
  std::vector<std::string> p_set;
  RetrievalFlags pipeline_flags;
  auto* pipeline = app.add_subcommand("pipeline", "run a configured chain end to end");
  pipeline->add_option("-c,--config", p_config, "config file")->required();
  pipeline->add_option("-o,--out-dir", p_out, "output directory (overrides output.dir)");
  pipeline->add_option("--set", p_set, "extra key=value overrides");
  add_retrieval_flags(pipeline, pipeline_flags);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      Config c;
      stage("config", [&] {
        c = load_config(gen_config);
        put(c, "synthetic.tracklet_copies", opt_str(gen_tracklets));
      });
      stage("gen", [&] {
        const auto bench = make_benchmark(BenchmarkSpec::from_config(c, static_cast<std::uint64_t>(c.get_int("seed", 0))));
        fs::create_directories(gen_out);
        for (auto [name, part] : {std::pair{"train", &bench.train}, std::pair{"query", &bench.query},
                                  std::pair{"gallery", &bench.gallery}}) {
          save_features(part->features, (fs::path(gen_out) / (std::string(name) + ".feat")).string());
          save_manifest(part->manifest, (fs::path(gen_out) / (std::string(name) + ".csv")).string());
        }
      });
    } else if (*train) {
      Config c;
      TrainConfig tc;
      stage("config", [&] {
        c = load_config(tr_config);
        tc = TrainConfig::from_config(c);
      });
      FeatureMatrix feats;
      GalleryManifest man;
      stage("input", [&] {
        feats = load_features(tr_features);
        man = load_manifest(tr_manifest);
      });
      const TrainResult r = train_head(feats, man, tc);
      stage("output", [&] {
        save_head(r.params, tr_out);
        if (!tr_traj.empty()) write_text(tr_traj, [&](std::ostream& o) { write_trajectory_csv(r.trajectory, o); });
        if (!tr_losses.empty()) write_text(tr_losses, [&](std::ostream& o) { write_losses_csv(r.losses, o); });
      });
    } else if (*dist) {
      stage("distance", [&] {
        FeatureMatrix q = load_features(d_query), g = load_features(d_gallery);
        if (!d_head.empty()) {
          const HeadParams head = load_head(d_head);
          q = embed_features(q, head);
          g = embed_features(g, head);
        }
        save_distances(pairwise_distance(q, g, metric_from_string(d_metric)), d_out);
      });
    } else if (*fuse) {
      stage("fuse", [&] {
        (void)aux_kind_from_string(f_okind);
        (void)aux_kind_from_string(f_ckind);
        const FusionParams p{fuse_flags.lambda1.value_or(0.1), fuse_flags.lambda2.value_or(0.1)};
        save_distances(fuse_distances(load_distances(f_dist), load_distances(f_orient), load_distances(f_camera), p),
                       f_out);
      });
    } else if (*rerank) {
      stage("rerank", [&] {
        DistanceMatrix qg, qq, gg;
        if (!r_query.empty() || !r_gallery.empty()) {
          if (r_query.empty() || r_gallery.empty()) throw InvalidArgument("--query and --gallery go together");
          const auto metric = metric_from_string(r_metric);
          const FeatureMatrix q = load_features(r_query), g = load_features(r_gallery);
          qg = pairwise_distance(q, g, metric);
          qq = pairwise_distance(q, q, metric);
          gg = pairwise_distance(g, g, metric);
        } else {
          if (r_qg.empty() || r_qq.empty() || r_gg.empty()) {
            throw InvalidArgument("give --query/--gallery features or all of --qg, --qq, --gg");
          }
          qg = load_distances(r_qg);
          qq = load_distances(r_qq);
          gg = load_distances(r_gg);
        }
        const RerankParams p{rerank_flags.k1.value_or(20), rerank_flags.k2.value_or(6),
                             rerank_flags.lambda_jaccard.value_or(0.3)};
        save_distances(k_reciprocal_rerank(qg, qq, gg, p), r_out);
      });
    } else if (*tracklet) {
      stage("tracklet", [&] {
        save_features(tracklet_rerank(load_features(t_features), load_manifest(t_manifest),
                                      tracklet_flags.tracklet_window.value_or(3)),
                      t_out);
      });
    } else if (*ensemble) {
      stage("ensemble", [&] {
        std::vector<DistanceMatrix> members;
        for (const auto& path : e_inputs) members.push_back(load_distances(path));
        save_distances(ensemble_distances(members, ensemble_norm_from_string(ensemble_flags.ensemble_norm.value_or("minmax"))),
                       e_out);
      });
    } else if (*eval) {
      stage("eval", [&] {
        EvalProtocol p;
        p.cross_camera_filter = !v_no_filter;
        p.score_unmatched_as_zero = v_unmatched == "zero";
        if (v_truncate > 0) p.truncate_at = v_truncate;
        p.junk_ids.insert(v_junk.begin(), v_junk.end());
        const auto r = evaluate(load_distances(v_dist), load_manifest(v_qm), load_manifest(v_gm), p, v_max_rank);
        write_text(v_report, [&](std::ostream& o) { write_report(r, o); });
        if (!v_per_query.empty()) write_text(v_per_query, [&](std::ostream& o) { write_per_query_csv(r, o); });
      });
    } else if (*pipeline) {
      Config c;
      stage("config", [&] {
        c = Config::load(p_config);
        for (const auto& kv : p_set) {
          const auto eq = kv.find('=');
          if (eq == std::string::npos || eq == 0) throw InvalidArgument("--set expects key=value, got '" + kv + "'");
          c.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
        put(c, "rerank.k1", opt_str(pipeline_flags.k1));
        put(c, "rerank.k2", opt_str(pipeline_flags.k2));
        put(c, "rerank.lambda_jaccard", opt_str(pipeline_flags.lambda_jaccard));
        put(c, "fuse.lambda1", opt_str(pipeline_flags.lambda1));
        put(c, "fuse.lambda2", opt_str(pipeline_flags.lambda2));
        put(c, "tracklet.window", opt_str(pipeline_flags.tracklet_window));
        put(c, "ensemble.norm", pipeline_flags.ensemble_norm);
        if (!p_out.empty()) c.set("output.dir", p_out);
        apply_env_overrides(c);
      });
      const auto r = run_pipeline(c);
      write_report(r.report, std::cout);
    }
  } catch (const StageError& e) {
    std::fprintf(stderr, "reidforge: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "reidforge: [main] %s\n", e.what());
    return 1;
  }
  return 0;
}
