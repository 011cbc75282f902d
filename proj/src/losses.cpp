#include "reidforge/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "reidforge/errors.hpp"

namespace reidforge {

void IdLossConfig::validate() const {
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw InvalidArgument("id loss epsilon must lie in [0, 1)");
  if (num_classes < 2) throw InvalidArgument("id loss needs at least two classes");
}

void SupConConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidArgument("supcon tau must be > 0");
}

std::vector<double> label_smooth_targets(std::size_t label, const IdLossConfig& config) {
  config.validate();
  const std::size_t n = config.num_classes;
  if (label >= n) throw InvalidArgument("label " + std::to_string(label) + " out of range");
  const double off = config.epsilon / static_cast<double>(n);
  std::vector<double> q(n, off);
  // Written as the remainder so the distribution sums to one to the last bit
  // that the off-target terms allow.
  q[label] = 1.0 - off * static_cast<double>(n - 1);
  return q;
}

LossOutput id_loss(const Matrix& logits, std::span<const std::int64_t> labels, const IdLossConfig& config) {
  config.validate();
  if (logits.cols() != config.num_classes) throw ShapeError("id_loss: logits width != num_classes");
  if (logits.rows() != labels.size()) throw ShapeError("id_loss: label count != batch size");
  if (logits.rows() == 0) throw ShapeError("id_loss: empty batch");
  if (!all_finite(logits)) throw NumericError("id_loss: non-finite logits");

  const std::size_t batch = logits.rows();
  const std::size_t n = config.num_classes;
  LossOutput out{0.0, Matrix(batch, n)};
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= n) {
      throw InvalidArgument("id_loss: label out of range at row " + std::to_string(b));
    }
    const auto q = label_smooth_targets(static_cast<std::size_t>(labels[b]), config);
    auto row = logits.row(b);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double log_z = std::log(z);
    for (std::size_t i = 0; i < n; ++i) {
      const double log_p = row[i] - mx - log_z;
      out.value -= q[i] * log_p;
      out.grad(b, i) = (std::exp(log_p) - q[i]) / static_cast<double>(batch);
    }
  }
  out.value /= static_cast<double>(batch);
  return out;
}

LossOutput supcon_loss(const Matrix& embeddings, std::span<const std::int64_t> labels, const SupConConfig& config) {
  config.validate();
  const std::size_t batch = embeddings.rows();
  if (batch != labels.size()) throw ShapeError("supcon_loss: label count != batch size");
  if (!all_finite(embeddings)) throw NumericError("supcon_loss: non-finite embeddings");

  // logits_ij = z_i . z_j / tau
  Matrix logits(batch, batch);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = i; j < batch; ++j) {
      const double s = dot(embeddings.row(i), embeddings.row(j)) / config.tau;
      logits(i, j) = s;
      logits(j, i) = s;
    }
  }

  // coef(i, j) = dL/dlogits_ij before the 1/anchor_count factor.
  Matrix coef(batch, batch);
  std::size_t anchors = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    std::size_t positives = 0;
    for (std::size_t j = 0; j < batch; ++j) {
      if (j != i && labels[j] == labels[i]) ++positives;
    }
    if (positives == 0) continue;
    ++anchors;

    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < batch; ++a) {
      if (a != i) mx = std::max(mx, logits(i, a));
    }
    double z = 0.0;
    for (std::size_t a = 0; a < batch; ++a) {
      if (a != i) z += std::exp(logits(i, a) - mx);
    }
    const double log_denominator = mx + std::log(z);
    const double inv_p = 1.0 / static_cast<double>(positives);
    double anchor_loss = 0.0;
    for (std::size_t j = 0; j < batch; ++j) {
      if (j == i) continue;
      const double softmax = std::exp(logits(i, j) - log_denominator);
      const bool positive = labels[j] == labels[i];
      if (positive) anchor_loss -= inv_p * (logits(i, j) - log_denominator);
      coef(i, j) = softmax - (positive ? inv_p : 0.0);
    }
    total += anchor_loss;
  }
  if (anchors == 0) throw InvalidArgument("supcon_loss: no anchor has a positive in the batch");

  const double scale = 1.0 / (static_cast<double>(anchors) * config.tau);
  LossOutput out{total / static_cast<double>(anchors), Matrix(batch, embeddings.cols())};
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < batch; ++j) {
      const double c = coef(i, j);
      if (c == 0.0) continue;
      // d logits_ij / d z_i = z_j / tau and d logits_ij / d z_j = z_i / tau
      for (std::size_t k = 0; k < embeddings.cols(); ++k) {
        out.grad(i, k) += c * scale * embeddings(j, k);
        out.grad(j, k) += c * scale * embeddings(i, k);
      }
    }
  }
  return out;
}

LossOutput triplet_loss(const Matrix& embeddings, std::span<const std::int64_t> labels, double margin) {
  const std::size_t batch = embeddings.rows();
  const std::size_t dim = embeddings.cols();
  if (batch != labels.size()) throw ShapeError("triplet_loss: label count != batch size");
  if (!std::isfinite(margin)) throw InvalidArgument("triplet_loss: margin must be finite");
  if (!all_finite(embeddings)) throw NumericError("triplet_loss: non-finite embeddings");

  Matrix dist(batch, batch);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = i + 1; j < batch; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double d = embeddings(i, k) - embeddings(j, k);
        s += d * d;
      }
      dist(i, j) = dist(j, i) = std::sqrt(s);
    }
  }

  LossOutput out{0.0, Matrix(batch, dim)};
  std::size_t valid = 0;
  struct Active {
    std::size_t anchor, pos, neg;
  };
  std::vector<Active> active;
  for (std::size_t i = 0; i < batch; ++i) {
    std::size_t hard_pos = batch, hard_neg = batch;
    for (std::size_t j = 0; j < batch; ++j) {
      if (j == i) continue;
      if (labels[j] == labels[i]) {
        if (hard_pos == batch || dist(i, j) > dist(i, hard_pos)) hard_pos = j;
      } else {
        if (hard_neg == batch || dist(i, j) < dist(i, hard_neg)) hard_neg = j;
      }
    }
    if (hard_pos == batch || hard_neg == batch) continue;
    ++valid;
    const double hinge = dist(i, hard_pos) - dist(i, hard_neg) + margin;
    if (hinge > 0.0) {
      out.value += hinge;
      active.push_back({i, hard_pos, hard_neg});
    }
  }
  if (valid == 0) throw InvalidArgument("triplet_loss: no valid (anchor, positive, negative) triplet");

  const double inv = 1.0 / static_cast<double>(valid);
  out.value *= inv;
  // d|a - b| / da = (a - b) / |a - b|; zero-distance pairs take the zero subgradient.
  auto accumulate = [&](std::size_t a, std::size_t b, double sign) {
    const double d = dist(a, b);
    if (d == 0.0) return;
    for (std::size_t k = 0; k < dim; ++k) {
      const double g = sign * inv * (embeddings(a, k) - embeddings(b, k)) / d;
      out.grad(a, k) += g;
      out.grad(b, k) -= g;
    }
  };
  for (const auto& t : active) {
    accumulate(t.anchor, t.pos, 1.0);
    accumulate(t.anchor, t.neg, -1.0);
  }
  return out;
}

Matrix l2_normalize_backward(const Matrix& raw, const Matrix& grad_normalized) {
  if (!raw.same_shape(grad_normalized)) throw ShapeError("l2_normalize_backward shape mismatch");
  Matrix g(raw.rows(), raw.cols());
  for (std::size_t r = 0; r < raw.rows(); ++r) {
    const double n = norm2(raw.row(r));
    if (n == 0.0) throw NumericError("l2_normalize_backward: zero row");
    double proj = 0.0;
    for (std::size_t k = 0; k < raw.cols(); ++k) proj += raw(r, k) / n * grad_normalized(r, k);
    for (std::size_t k = 0; k < raw.cols(); ++k) {
      g(r, k) = (grad_normalized(r, k) - raw(r, k) / n * proj) / n;
    }
  }
  return g;
}

}  // namespace reidforge
