#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace reidforge {

/// How the momentum update folds in the new weight.
///   literal: lambda_id = alpha * lambda_id + new_lambda_id
///   ema:     lambda_id = alpha * lambda_id + (1 - alpha) * new_lambda_id
enum class MalwMode { kLiteral, kEma };

/// Which loss values go into the std buffers.
enum class MalwRecord { kWeighted, kRaw };

/// Momentum adaptive loss weight scheduler state. Pure value type.
struct MalwState {
  double lambda_id = 1.0;
  double lambda_metric = 1.0;
  std::vector<double> buffer_id;
  std::vector<double> buffer_metric;
  std::size_t k = 500;
  double alpha = 0.9;
  std::uint64_t iteration = 0;
  MalwMode mode = MalwMode::kLiteral;
  MalwRecord record = MalwRecord::kWeighted;

  bool operator==(const MalwState&) const = default;
};

/// Emitted at every update point (iteration % k == 0), whether or not the weight moved.
struct MalwUpdate {
  std::uint64_t update_index = 0;
  std::uint64_t iteration = 0;
  double lambda_id = 1.0;
  double lambda_metric = 1.0;
  double id_std = 0.0;
  double metric_std = 0.0;
  bool changed = false;
};

struct MalwStepResult {
  double total_loss = 0.0;
  double weighted_id = 0.0;
  double weighted_metric = 0.0;
  MalwState state;
  std::optional<MalwUpdate> update;
};

/// lambda_id = lambda_metric = 1, empty buffers. Throws InvalidArgument if k < 1 or alpha outside [0, 1).
MalwState malw_init(std::size_t k, double alpha, MalwMode mode = MalwMode::kLiteral,
                    MalwRecord record = MalwRecord::kWeighted);

/// One training iteration: weight the raw losses, record them, and at
/// iteration % k == 0 compare buffer stds and move lambda_id if the ID std is
/// strictly larger. lambda_metric is never touched.
MalwStepResult malw_step(const MalwState& state, double raw_id_loss, double raw_metric_loss);

/// Replays malw_step over a stream; returns one snapshot per update point.
std::vector<MalwUpdate> malw_trajectory(std::span<const std::pair<double, double>> loss_stream, MalwState state);

/// CSV rows: update_index,lambda_id,lambda_metric,id_std,metric_std
void write_trajectory_csv(std::span<const MalwUpdate> updates, std::ostream& out);

/// Population standard deviation; 0 for fewer than two entries.
double population_std(std::span<const double> values);

}  // namespace reidforge
