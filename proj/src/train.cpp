#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>

#include <fmt/format.h>

#include "reidforge/errors.hpp"
#include "reidforge/harness.hpp"

namespace reidforge {

MetricLoss metric_loss_from_string(const std::string& name) {
  if (name == "supcon") return MetricLoss::kSupCon;
  if (name == "triplet") return MetricLoss::kTriplet;
  throw InvalidArgument("metric loss must be 'supcon' or 'triplet', got '" + name + "'");
}

void TrainConfig::validate() const {
  if (epochs < 1 || batch_identities < 1 || batch_instances < 1 || num_heads < 1) {
    throw InvalidArgument("train: epochs, P, K and heads must be >= 1");
  }
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw InvalidArgument("train: learning rate must be > 0");
  if (metric_loss == MetricLoss::kSupCon && batch_instances < 2) {
    throw InvalidArgument("train: supcon needs at least 2 instances per identity");
  }
  if (!(fixed_id_weight > 0.0) || !(fixed_metric_weight > 0.0)) throw InvalidArgument("train: fixed weights must be > 0");
  (void)malw_init(malw_k, malw_alpha, malw_mode, malw_record);
  if (mixstyle.active) mixstyle.validate();
  IdLossConfig{id_epsilon, 2}.validate();
  SupConConfig{supcon_tau}.validate();
}

TrainConfig TrainConfig::from_config(const Config& c, const std::string& section) {
  const auto key = [&section](const char* name) { return section + "." + name; };
  TrainConfig t;
  t.epochs = c.get_size(key("epochs"), t.epochs);
  t.batch_identities = c.get_size(key("batch_identities"), t.batch_identities);
  t.batch_instances = c.get_size(key("batch_instances"), t.batch_instances);
  t.learning_rate = c.get_double(key("learning_rate"), t.learning_rate);
  t.num_heads = c.get_size(key("num_heads"), t.num_heads);
  t.head_dim = c.get_size(key("head_dim"), t.head_dim);
  t.malw_enabled = c.get_bool(key("malw"), t.malw_enabled);
  t.malw_k = c.get_size(key("malw_k"), t.malw_k);
  t.malw_alpha = c.get_double(key("malw_alpha"), t.malw_alpha);
  const auto mode = c.get_string(key("malw_mode"), "literal");
  if (mode != "literal" && mode != "ema") throw InvalidArgument("malw_mode must be 'literal' or 'ema'");
  t.malw_mode = mode == "ema" ? MalwMode::kEma : MalwMode::kLiteral;
  const auto record = c.get_string(key("malw_record"), "weighted");
  if (record != "weighted" && record != "raw") throw InvalidArgument("malw_record must be 'weighted' or 'raw'");
  t.malw_record = record == "raw" ? MalwRecord::kRaw : MalwRecord::kWeighted;
  t.fixed_id_weight = c.get_double(key("id_weight"), t.fixed_id_weight);
  t.fixed_metric_weight = c.get_double(key("metric_weight"), t.fixed_metric_weight);
  t.mixstyle.active = c.get_bool(key("mixstyle"), t.mixstyle.active);
  t.mixstyle.alpha = c.get_double(key("mixstyle_alpha"), t.mixstyle.alpha);
  t.mixstyle.epsilon_std = c.get_double(key("mixstyle_epsilon"), t.mixstyle.epsilon_std);
  t.metric_loss = metric_loss_from_string(c.get_string(key("metric_loss"), "supcon"));
  t.id_epsilon = c.get_double(key("id_epsilon"), t.id_epsilon);
  t.supcon_tau = c.get_double(key("supcon_tau"), t.supcon_tau);
  t.triplet_margin = c.get_double(key("triplet_margin"), t.triplet_margin);
  t.seed = static_cast<std::uint64_t>(c.get_int("seed", 0));
  t.validate();
  return t;
}

namespace {

Matrix normalize_rows(const Matrix& m) {
  Matrix out = m;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double n = norm2(row);
    if (n == 0.0) throw NumericError("zero embedding row");
    for (double& v : row) v /= n;
  }
  return out;
}

}  // namespace

TrainResult train_head(const FeatureMatrix& features, const GalleryManifest& manifest, const TrainConfig& config) {
  try {
    config.validate();
  } catch (const Error& e) {
    throw StageError("train", e.what());
  }
  if (manifest.size() != features.rows()) throw StageError("train", "manifest size != feature rows");

  TrainResult result;
  std::map<std::int64_t, std::int64_t> class_of;
  for (const auto& e : manifest) class_of.emplace(e.identity, 0);
  if (class_of.size() < 2) throw StageError("train", "need at least two identities");
  for (auto& [id, cls] : class_of) {
    cls = static_cast<std::int64_t>(result.class_labels.size());
    result.class_labels.push_back(id);
  }

  Rng rng = make_rng(config.seed);
  const std::size_t head_dim = config.head_dim > 0 ? config.head_dim : std::max<std::size_t>(1, features.dim() / config.num_heads);
  result.params = init_head(rng, features.dim(), head_dim, config.num_heads, class_of.size());

  const IdLossConfig id_cfg{config.id_epsilon, class_of.size()};
  const SupConConfig supcon_cfg{config.supcon_tau};
  MalwState malw = malw_init(config.malw_k, config.malw_alpha, config.malw_mode, config.malw_record);

  const std::size_t batch_size = config.batch_identities * config.batch_instances;
  const std::size_t steps_per_epoch = std::max<std::size_t>(1, features.rows() / batch_size);
  const std::size_t total_steps = steps_per_epoch * config.epochs;
  result.losses.reserve(total_steps);

  for (std::size_t step = 0; step < total_steps; ++step) {
    try {
      const auto batch = pk_sample(manifest, config.batch_identities, config.batch_instances, rng);
      std::vector<std::int64_t> labels;
      labels.reserve(batch.size());
      for (auto i : batch) labels.push_back(class_of.at(manifest[i].identity));

      const Matrix x = apply_mixstyle(gather_rows(features.data(), batch), rng, config.mixstyle);
      const HeadForward fwd = multihead_forward(x, result.params);
      const LossOutput id = id_loss(fwd.logits, labels, id_cfg);
      const Matrix z = normalize_rows(fwd.embedding);
      const LossOutput metric = config.metric_loss == MetricLoss::kSupCon
                                    ? supcon_loss(z, labels, supcon_cfg)
                                    : triplet_loss(z, labels, config.triplet_margin);
      if (!std::isfinite(id.value) || !std::isfinite(metric.value)) {
        throw NumericError("non-finite loss");
      }

      StepLoss record{id.value, metric.value, 0.0, config.fixed_id_weight, config.fixed_metric_weight};
      if (config.malw_enabled) {
        record.lambda_id = malw.lambda_id;
        record.lambda_metric = malw.lambda_metric;
        auto r = malw_step(malw, id.value, metric.value);
        if (r.update) result.trajectory.push_back(*r.update);
        malw = std::move(r.state);
      }
      record.total = record.lambda_id * id.value + record.lambda_metric * metric.value;
      result.losses.push_back(record);

      Matrix grad_logits = id.grad;
      for (double& g : grad_logits.values()) g *= record.lambda_id;
      Matrix grad_embedding = l2_normalize_backward(fwd.embedding, metric.grad);
      for (double& g : grad_embedding.values()) g *= record.lambda_metric;

      const HeadBackward back = multihead_backward(grad_embedding, grad_logits, fwd.cache, result.params);
      sgd_update(result.params, back.grads, config.learning_rate);
    } catch (const StageError&) {
      throw;
    } catch (const Error& e) {
      throw StageError("train", "step " + std::to_string(step) + ": " + e.what());
    }
  }
  return result;
}

FeatureMatrix embed_features(const FeatureMatrix& features, const HeadParams& params) {
  return l2_normalize_rows(FeatureMatrix(multihead_embed(features.data(), params)));
}

void write_losses_csv(const std::vector<StepLoss>& losses, std::ostream& out) {
  out << "step,id_loss,metric_loss,total_loss,lambda_id,lambda_metric\n";
  for (std::size_t i = 0; i < losses.size(); ++i) {
    const auto& l = losses[i];
    out << fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n", i, l.id, l.metric, l.total, l.lambda_id,
                       l.lambda_metric);
  }
}

double heldout_map(const Benchmark& bench, const TrainConfig& config) {
  const auto trained = train_head(bench.train.features, bench.train.manifest, config);
  const auto q = embed_features(bench.query.features, trained.params);
  const auto g = embed_features(bench.gallery.features, trained.params);
  const auto dist = pairwise_distance(q, g, MetricTag::kEuclidean);
  return evaluate(dist, bench.query.manifest, bench.gallery.manifest, EvalProtocol{}, 10).map;
}

}  // namespace reidforge
