#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "reidforge/matrix.hpp"
#include "reidforge/rng.hpp"

namespace reidforge {

// ---------------------------------------------------------------------------
// MixStyle on flat (batch x channel) features.

struct MixStyleConfig {
  double alpha = 0.1;
  bool active = true;
  double epsilon_std = 1e-6;

  void validate() const;
};

/// Per-channel statistics over the batch axis. Sigma uses the population convention.
struct ChannelStats {
  std::vector<double> mu;
  std::vector<double> sigma;
};

ChannelStats channel_stats(const Matrix& batch);

/// sigma_m * (x - mu(x)) / (sigma(x) + eps) + mu_m, where
/// mu_m = lambda mu(x) + (1 - lambda) mu(x_shuffled) and likewise for sigma_m.
Matrix mixstyle(const Matrix& x, const Matrix& x_shuffled, double lambda, const MixStyleConfig& config);

/// Draws lambda ~ Beta(alpha, alpha).
double sample_mix_lambda(Rng& rng, const MixStyleConfig& config);

/// Training-time wrapper: splits the batch into two random halves with a
/// uniform permutation, draws lambda, and mixes each half with the other's
/// statistics. Returns x untouched, without consuming rng, when inactive.
Matrix apply_mixstyle(const Matrix& x, Rng& rng, const MixStyleConfig& config);

// ---------------------------------------------------------------------------
// Multi-head attention embedding head.
//
//   u_h    = x W_h^T + b_h                 (B x d_h), h = 0..H-1
//   s_h    = u_h . a_h + c_h               scalar score per head
//   w      = softmax_h(s)                  (B x H)
//   e      = sum_h w_h u_h                 aggregated embedding (B x d_h)
//   logits = e C^T + c                     (B x N)

struct HeadParams {
  std::size_t num_heads = 0;
  std::size_t input_dim = 0;
  std::size_t head_dim = 0;
  std::size_t num_classes = 0;

  std::vector<Matrix> proj_weight;  // H of (d_h x D)
  std::vector<Matrix> proj_bias;    // H of (1 x d_h)
  Matrix score_weight;              // H x d_h, row h scores head h
  Matrix score_bias;                // 1 x H
  Matrix cls_weight;                // N x d_h
  Matrix cls_bias;                  // 1 x N

  /// Shape and finiteness checks.
  void validate() const;
  /// FNV-1a over all parameter bits; used to detect stale forward caches.
  std::uint64_t fingerprint() const;

  bool operator==(const HeadParams&) const = default;
};

/// Gradients share HeadParams' layout.
using HeadGrads = HeadParams;

HeadParams zero_like(const HeadParams& params);

/// Weights ~ N(0, 1/fan_in), biases zero.
HeadParams init_head(Rng& rng, std::size_t input_dim, std::size_t head_dim, std::size_t num_heads,
                     std::size_t num_classes);

struct HeadCache {
  Matrix input;                     // B x D
  std::vector<Matrix> head_out;     // H of (B x d_h)
  Matrix attention;                 // B x H
  Matrix embedding;                 // B x d_h
  std::uint64_t params_fingerprint = 0;
};

struct HeadForward {
  Matrix embedding;  // B x d_h
  Matrix attention;  // B x H
  Matrix logits;     // B x N
  HeadCache cache;
};

HeadForward multihead_forward(const Matrix& x, const HeadParams& params);

/// Embedding only; skips the classifier.
Matrix multihead_embed(const Matrix& x, const HeadParams& params);

struct HeadBackward {
  HeadGrads grads;
  Matrix input_grad;  // B x D
};

/// Exact gradients of the forward map given upstream dL/d(embedding) and dL/d(logits).
/// Throws InvalidArgument if the cache was produced with different parameters or shapes.
HeadBackward multihead_backward(const Matrix& grad_embedding, const Matrix& grad_logits,
                                const HeadCache& cache, const HeadParams& params);

/// Row-wise softmax. Exposed because the attention block is tested in isolation.
Matrix softmax_rows(const Matrix& scores);
/// Backward of softmax_rows given its output p and upstream g.
Matrix softmax_rows_backward(const Matrix& p, const Matrix& grad_out);

/// params -= lr * grads
void sgd_update(HeadParams& params, const HeadGrads& grads, double lr);

// Sectioned container: "HEAD", u32 version, u32 tensor count, then per tensor
// a u32 name length, the name bytes and one FEAT block.
void write_head(const HeadParams& params, std::ostream& sink);
HeadParams read_head(std::istream& source);
void save_head(const HeadParams& params, const std::string& path);
HeadParams load_head(const std::string& path);

}  // namespace reidforge
