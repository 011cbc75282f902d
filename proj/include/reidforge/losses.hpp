#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "reidforge/matrix.hpp"

namespace reidforge {

struct IdLossConfig {
  double epsilon = 0.1;
  std::size_t num_classes = 2;

  void validate() const;
};

struct SupConConfig {
  double tau = 0.1;

  void validate() const;
};

struct LossOutput {
  double value = 0.0;
  Matrix grad;  // same shape as the loss input
};

/// Smoothed target: 1 - eps (N-1)/N at the label, eps/N elsewhere.
std::vector<double> label_smooth_targets(std::size_t label, const IdLossConfig& config);

/// Batch-mean label-smoothed cross-entropy over softmax(logits).
LossOutput id_loss(const Matrix& logits, std::span<const std::int64_t> labels, const IdLossConfig& config);

/// Supervised contrastive loss over (already L2-normalized) embeddings.
///
/// For anchor i, A(i) is every other batch index and P(i) the same-label subset.
///   l_i = -1/|P(i)| sum_{p in P(i)} log( exp(z_i.z_p / tau) / sum_{a in A(i)} exp(z_i.z_a / tau) )
/// Anchors with empty P(i) are skipped; the value is the mean of l_i over the rest.
/// The gradient is taken with respect to z as given (no re-normalization).
LossOutput supcon_loss(const Matrix& embeddings, std::span<const std::int64_t> labels, const SupConConfig& config);

/// Batch-hard triplet loss on Euclidean distances: per anchor
/// max(0, max_pos d - min_neg d + margin), averaged over anchors that have
/// at least one positive and one negative.
LossOutput triplet_loss(const Matrix& embeddings, std::span<const std::int64_t> labels, double margin);

/// Backward of row-wise L2 normalization: given the raw rows x, and dL/d(x/|x|), returns dL/dx.
Matrix l2_normalize_backward(const Matrix& raw, const Matrix& grad_normalized);

}  // namespace reidforge
