#include "reidforge/malw.hpp"

#include <cmath>
#include <ostream>

#include <fmt/format.h>

#include "reidforge/errors.hpp"

namespace reidforge {

double population_std(std::span<const double> values) {
  if (values.size() < 2) return 0.0;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return std::sqrt(var / static_cast<double>(values.size()));
}

MalwState malw_init(std::size_t k, double alpha, MalwMode mode, MalwRecord record) {
  if (k < 1) throw InvalidArgument("malw: update interval k must be >= 1");
  if (!(alpha >= 0.0 && alpha < 1.0)) throw InvalidArgument("malw: alpha must lie in [0, 1)");
  MalwState s;
  s.k = k;
  s.alpha = alpha;
  s.mode = mode;
  s.record = record;
  return s;
}

MalwStepResult malw_step(const MalwState& state, double raw_id_loss, double raw_metric_loss) {
  if (!std::isfinite(raw_id_loss) || !std::isfinite(raw_metric_loss)) {
    throw NumericError("malw: non-finite loss at iteration " + std::to_string(state.iteration));
  }
  if (raw_id_loss < 0.0 || raw_metric_loss < 0.0) throw InvalidArgument("malw: losses must be >= 0");

  MalwStepResult r;
  r.state = state;
  MalwState& s = r.state;
  r.weighted_id = s.lambda_id * raw_id_loss;
  r.weighted_metric = s.lambda_metric * raw_metric_loss;
  r.total_loss = r.weighted_id + r.weighted_metric;

  if (s.record == MalwRecord::kWeighted) {
    s.buffer_id.push_back(r.weighted_id);
    s.buffer_metric.push_back(r.weighted_metric);
  } else {
    s.buffer_id.push_back(raw_id_loss);
    s.buffer_metric.push_back(raw_metric_loss);
  }

  if (s.iteration % s.k == 0) {
    MalwUpdate u;
    u.update_index = s.iteration / s.k;
    u.iteration = s.iteration;
    u.id_std = population_std(s.buffer_id);
    u.metric_std = population_std(s.buffer_metric);
    s.buffer_id.clear();
    s.buffer_metric.clear();
    if (u.id_std > u.metric_std) {
      const double new_lambda_id = 1.0 - (u.id_std - u.metric_std) / u.id_std;
      s.lambda_id = s.mode == MalwMode::kLiteral ? s.alpha * s.lambda_id + new_lambda_id
                                                 : s.alpha * s.lambda_id + (1.0 - s.alpha) * new_lambda_id;
      u.changed = true;
    }
    u.lambda_id = s.lambda_id;
    u.lambda_metric = s.lambda_metric;
    r.update = u;
  }
  ++s.iteration;
  return r;
}

std::vector<MalwUpdate> malw_trajectory(std::span<const std::pair<double, double>> loss_stream, MalwState state) {
  std::vector<MalwUpdate> out;
  for (const auto& [id, metric] : loss_stream) {
    auto r = malw_step(state, id, metric);
    if (r.update) out.push_back(*r.update);
    state = std::move(r.state);
  }
  return out;
}

void write_trajectory_csv(std::span<const MalwUpdate> updates, std::ostream& out) {
  out << "update_index,lambda_id,lambda_metric,id_std,metric_std\n";
  for (const auto& u : updates) {
    out << fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g}\n", u.update_index, u.lambda_id, u.lambda_metric,
                       u.id_std, u.metric_std);
  }
}

}  // namespace reidforge
