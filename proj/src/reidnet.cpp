#include "reidforge/reidnet.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>

#include "reidforge/errors.hpp"
#include "reidforge/featstore.hpp"

namespace reidforge {

void MixStyleConfig::validate() const {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw InvalidArgument("mixstyle alpha must be > 0");
  if (!(epsilon_std >= 0.0)) throw InvalidArgument("mixstyle epsilon_std must be >= 0");
}

ChannelStats channel_stats(const Matrix& batch) {
  if (batch.rows() == 0 || batch.cols() == 0) throw InvalidArgument("channel_stats on empty batch");
  const std::size_t n = batch.rows();
  const std::size_t c = batch.cols();
  ChannelStats s{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < c; ++j) s.mu[j] += batch(r, j);
  }
  for (double& m : s.mu) m /= static_cast<double>(n);
  // Two-pass variance; the mean is subtracted before squaring.
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < c; ++j) {
      const double d = batch(r, j) - s.mu[j];
      s.sigma[j] += d * d;
    }
  }
  for (double& v : s.sigma) v = std::sqrt(v / static_cast<double>(n));
  return s;
}

Matrix mixstyle(const Matrix& x, const Matrix& x_shuffled, double lambda, const MixStyleConfig& config) {
  config.validate();
  if (!x.same_shape(x_shuffled)) throw ShapeError("mixstyle: x and x_shuffled differ in shape");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidArgument("mixstyle: lambda must lie in [0, 1]");

  const auto own = channel_stats(x);
  const auto other = channel_stats(x_shuffled);
  Matrix out(x.rows(), x.cols());
  for (std::size_t j = 0; j < x.cols(); ++j) {
    const double mu_m = lambda * own.mu[j] + (1.0 - lambda) * other.mu[j];
    const double sigma_m = lambda * own.sigma[j] + (1.0 - lambda) * other.sigma[j];
    const double denom = own.sigma[j] + config.epsilon_std;
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const double centered = x(r, j) - own.mu[j];
      const double normed = denom > 0.0 ? centered / denom : 0.0;
      out(r, j) = sigma_m * normed + mu_m;
    }
  }
  return out;
}

double sample_mix_lambda(Rng& rng, const MixStyleConfig& config) {
  config.validate();
  std::gamma_distribution<double> gamma(config.alpha, 1.0);
  while (true) {
    const double a = gamma(rng);
    const double b = gamma(rng);
    // With small alpha both draws can underflow to zero; redraw in that case.
    if (a + b > 0.0) return a / (a + b);
  }
}

Matrix apply_mixstyle(const Matrix& x, Rng& rng, const MixStyleConfig& config) {
  if (!config.active || x.rows() < 2) return x;
  std::vector<std::size_t> perm(x.rows());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  const double lambda = sample_mix_lambda(rng, config);

  // Batch statistics are permutation invariant, so each random half is mixed
  // with the other half's statistics. An odd leftover row passes through.
  const std::size_t half = x.rows() / 2;
  const std::span<const std::size_t> first(perm.data(), half);
  const std::span<const std::size_t> second(perm.data() + half, half);
  const Matrix a = gather_rows(x, first);
  const Matrix b = gather_rows(x, second);
  const Matrix mixed_a = mixstyle(a, b, lambda, config);
  const Matrix mixed_b = mixstyle(b, a, lambda, config);

  Matrix out = x;
  for (std::size_t i = 0; i < half; ++i) {
    std::copy(mixed_a.row(i).begin(), mixed_a.row(i).end(), out.row(first[i]).begin());
    std::copy(mixed_b.row(i).begin(), mixed_b.row(i).end(), out.row(second[i]).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------

void HeadParams::validate() const {
  if (num_heads < 1 || input_dim < 1 || head_dim < 1 || num_classes < 1) {
    throw InvalidArgument("head dimensions must be positive");
  }
  auto check = [](const Matrix& m, std::size_t r, std::size_t c, const char* name) {
    if (m.rows() != r || m.cols() != c) throw ShapeError(std::string("head tensor '") + name + "' has wrong shape");
    if (!all_finite(m)) throw NumericError(std::string("head tensor '") + name + "' is not finite");
  };
  if (proj_weight.size() != num_heads || proj_bias.size() != num_heads) {
    throw ShapeError("head projection count does not match num_heads");
  }
  for (std::size_t h = 0; h < num_heads; ++h) {
    check(proj_weight[h], head_dim, input_dim, "proj_weight");
    check(proj_bias[h], 1, head_dim, "proj_bias");
  }
  check(score_weight, num_heads, head_dim, "score_weight");
  check(score_bias, 1, num_heads, "score_bias");
  check(cls_weight, num_classes, head_dim, "cls_weight");
  check(cls_bias, 1, num_classes, "cls_bias");
}

std::uint64_t HeadParams::fingerprint() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFF;
      h *= 1099511628211ull;
    }
  };
  auto mix_matrix = [&](const Matrix& m) {
    mix(m.rows());
    mix(m.cols());
    for (double v : m.values()) mix(std::bit_cast<std::uint64_t>(v));
  };
  mix(num_heads);
  mix(input_dim);
  mix(head_dim);
  mix(num_classes);
  for (const auto& m : proj_weight) mix_matrix(m);
  for (const auto& m : proj_bias) mix_matrix(m);
  mix_matrix(score_weight);
  mix_matrix(score_bias);
  mix_matrix(cls_weight);
  mix_matrix(cls_bias);
  return h;
}

HeadParams zero_like(const HeadParams& p) {
  HeadParams z = p;
  auto clear = [](Matrix& m) { std::fill(m.values().begin(), m.values().end(), 0.0); };
  for (auto& m : z.proj_weight) clear(m);
  for (auto& m : z.proj_bias) clear(m);
  clear(z.score_weight);
  clear(z.score_bias);
  clear(z.cls_weight);
  clear(z.cls_bias);
  return z;
}

HeadParams init_head(Rng& rng, std::size_t input_dim, std::size_t head_dim, std::size_t num_heads,
                     std::size_t num_classes) {
  HeadParams p;
  p.num_heads = num_heads;
  p.input_dim = input_dim;
  p.head_dim = head_dim;
  p.num_classes = num_classes;
  if (num_heads < 1 || input_dim < 1 || head_dim < 1 || num_classes < 1) {
    throw InvalidArgument("init_head: dimensions must be positive");
  }
  auto fill = [&rng](std::size_t r, std::size_t c, std::size_t fan_in) {
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    Matrix m(r, c);
    for (double& v : m.values()) v = dist(rng);
    return m;
  };
  for (std::size_t h = 0; h < num_heads; ++h) {
    p.proj_weight.push_back(fill(head_dim, input_dim, input_dim));
    p.proj_bias.emplace_back(1, head_dim);
  }
  p.score_weight = fill(num_heads, head_dim, head_dim);
  p.score_bias = Matrix(1, num_heads);
  p.cls_weight = fill(num_classes, head_dim, head_dim);
  p.cls_bias = Matrix(1, num_classes);
  return p;
}

Matrix softmax_rows(const Matrix& scores) {
  Matrix p(scores.rows(), scores.cols());
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    auto in = scores.row(r);
    auto out = p.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      out[j] = std::exp(in[j] - mx);
      z += out[j];
    }
    for (double& v : out) v /= z;
  }
  return p;
}

Matrix softmax_rows_backward(const Matrix& p, const Matrix& grad_out) {
  if (!p.same_shape(grad_out)) throw ShapeError("softmax backward shape mismatch");
  Matrix g(p.rows(), p.cols());
  for (std::size_t r = 0; r < p.rows(); ++r) {
    const double inner = dot(p.row(r), grad_out.row(r));
    for (std::size_t j = 0; j < p.cols(); ++j) g(r, j) = p(r, j) * (grad_out(r, j) - inner);
  }
  return g;
}

namespace {

// out = a * b^T + bias (bias broadcast over rows)
Matrix affine(const Matrix& a, const Matrix& weight, const Matrix& bias) {
  Matrix out(a.rows(), weight.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t o = 0; o < weight.rows(); ++o) {
      out(r, o) = dot(a.row(r), weight.row(o)) + bias(0, o);
    }
  }
  return out;
}

struct HeadCore {
  std::vector<Matrix> head_out;
  Matrix attention;
  Matrix embedding;
};

HeadCore run_heads(const Matrix& x, const HeadParams& params) {
  params.validate();
  if (x.cols() != params.input_dim) {
    throw ShapeError("head input dim " + std::to_string(x.cols()) + " != " + std::to_string(params.input_dim));
  }
  if (x.rows() == 0) throw ShapeError("head input batch is empty");
  if (!all_finite(x)) throw NumericError("head input is not finite");
  const std::size_t batch = x.rows();
  const std::size_t heads = params.num_heads;
  HeadCore core;
  Matrix scores(batch, heads);
  for (std::size_t h = 0; h < heads; ++h) {
    core.head_out.push_back(affine(x, params.proj_weight[h], params.proj_bias[h]));
    for (std::size_t b = 0; b < batch; ++b) {
      scores(b, h) = dot(core.head_out[h].row(b), params.score_weight.row(h)) + params.score_bias(0, h);
    }
  }
  core.attention = softmax_rows(scores);
  core.embedding = Matrix(batch, params.head_dim);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t b = 0; b < batch; ++b) {
      const double w = core.attention(b, h);
      for (std::size_t k = 0; k < params.head_dim; ++k) core.embedding(b, k) += w * core.head_out[h](b, k);
    }
  }
  return core;
}

}  // namespace

HeadForward multihead_forward(const Matrix& x, const HeadParams& params) {
  auto core = run_heads(x, params);
  HeadForward out;
  out.logits = affine(core.embedding, params.cls_weight, params.cls_bias);
  out.embedding = core.embedding;
  out.attention = core.attention;
  out.cache.input = x;
  out.cache.head_out = std::move(core.head_out);
  out.cache.attention = std::move(core.attention);
  out.cache.embedding = std::move(core.embedding);
  out.cache.params_fingerprint = params.fingerprint();
  return out;
}

Matrix multihead_embed(const Matrix& x, const HeadParams& params) { return run_heads(x, params).embedding; }

HeadBackward multihead_backward(const Matrix& grad_embedding, const Matrix& grad_logits, const HeadCache& cache,
                                const HeadParams& params) {
  params.validate();
  const std::size_t batch = cache.input.rows();
  const std::size_t heads = params.num_heads;
  const std::size_t dh = params.head_dim;
  if (cache.params_fingerprint != params.fingerprint()) {
    throw InvalidArgument("multihead_backward: cache was produced with different parameters");
  }
  if (cache.head_out.size() != heads || cache.attention.rows() != batch || cache.attention.cols() != heads ||
      cache.embedding.rows() != batch || cache.embedding.cols() != dh) {
    throw InvalidArgument("multihead_backward: cache shapes do not match parameters");
  }
  if (grad_embedding.rows() != batch || grad_embedding.cols() != dh) {
    throw ShapeError("multihead_backward: grad_embedding shape mismatch");
  }
  if (grad_logits.rows() != batch || grad_logits.cols() != params.num_classes) {
    throw ShapeError("multihead_backward: grad_logits shape mismatch");
  }

  HeadBackward out;
  out.grads = zero_like(params);
  HeadGrads& g = out.grads;

  // Classifier.
  Matrix grad_e = grad_embedding;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t n = 0; n < params.num_classes; ++n) {
      const double gl = grad_logits(b, n);
      if (gl == 0.0) continue;
      g.cls_bias(0, n) += gl;
      for (std::size_t k = 0; k < dh; ++k) {
        g.cls_weight(n, k) += gl * cache.embedding(b, k);
        grad_e(b, k) += gl * params.cls_weight(n, k);
      }
    }
  }

  // Aggregation e = sum_h w_h u_h.
  Matrix grad_w(batch, heads);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t b = 0; b < batch; ++b) grad_w(b, h) = dot(grad_e.row(b), cache.head_out[h].row(b));
  }
  const Matrix grad_scores = softmax_rows_backward(cache.attention, grad_w);

  out.input_grad = Matrix(batch, params.input_dim);
  for (std::size_t h = 0; h < heads; ++h) {
    Matrix grad_u(batch, dh);
    for (std::size_t b = 0; b < batch; ++b) {
      const double w = cache.attention(b, h);
      const double gs = grad_scores(b, h);
      g.score_bias(0, h) += gs;
      for (std::size_t k = 0; k < dh; ++k) {
        g.score_weight(h, k) += gs * cache.head_out[h](b, k);
        grad_u(b, k) = w * grad_e(b, k) + gs * params.score_weight(h, k);
      }
    }
    // Projection u_h = x W_h^T + b_h.
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t k = 0; k < dh; ++k) {
        const double gu = grad_u(b, k);
        g.proj_bias[h](0, k) += gu;
        for (std::size_t d = 0; d < params.input_dim; ++d) {
          g.proj_weight[h](k, d) += gu * cache.input(b, d);
          out.input_grad(b, d) += gu * params.proj_weight[h](k, d);
        }
      }
    }
  }
  return out;
}

void sgd_update(HeadParams& params, const HeadGrads& grads, double lr) {
  auto step = [lr](Matrix& p, const Matrix& g) {
    if (!p.same_shape(g)) throw ShapeError("sgd_update shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) p.values()[i] -= lr * g.values()[i];
  };
  for (std::size_t h = 0; h < params.num_heads; ++h) {
    step(params.proj_weight[h], grads.proj_weight[h]);
    step(params.proj_bias[h], grads.proj_bias[h]);
  }
  step(params.score_weight, grads.score_weight);
  step(params.score_bias, grads.score_bias);
  step(params.cls_weight, grads.cls_weight);
  step(params.cls_bias, grads.cls_bias);
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

constexpr char kHeadMagic[4] = {'H', 'E', 'A', 'D'};
constexpr std::uint32_t kHeadVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) throw FormatError(FormatErrorKind::kTruncated, "HEAD container truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_head(const HeadParams& params, std::ostream& sink) {
  params.validate();
  std::vector<std::pair<std::string, const Matrix*>> tensors;
  for (std::size_t h = 0; h < params.num_heads; ++h) {
    tensors.emplace_back("proj_weight." + std::to_string(h), &params.proj_weight[h]);
    tensors.emplace_back("proj_bias." + std::to_string(h), &params.proj_bias[h]);
  }
  tensors.emplace_back("score_weight", &params.score_weight);
  tensors.emplace_back("score_bias", &params.score_bias);
  tensors.emplace_back("cls_weight", &params.cls_weight);
  tensors.emplace_back("cls_bias", &params.cls_bias);

  sink.write(kHeadMagic, 4);
  put_u32(sink, kHeadVersion);
  put_u32(sink, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    put_u32(sink, static_cast<std::uint32_t>(name.size()));
    sink.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_feat_block(*m, 0, sink);
  }
  if (!sink) throw FormatError(FormatErrorKind::kIo, "HEAD write failed");
}

HeadParams read_head(std::istream& source) {
  char magic[4];
  source.read(magic, 4);
  if (source.gcount() != 4) throw FormatError(FormatErrorKind::kTruncated, "HEAD container truncated");
  if (!std::equal(magic, magic + 4, kHeadMagic)) throw FormatError(FormatErrorKind::kBadMagic, "bad HEAD magic");
  if (auto v = get_u32(source); v != kHeadVersion) {
    throw FormatError(FormatErrorKind::kVersionMismatch, "unsupported HEAD version " + std::to_string(v));
  }
  const std::uint32_t count = get_u32(source);
  std::map<std::string, Matrix> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = get_u32(source);
    if (len > 4096) throw FormatError(FormatErrorKind::kInvalidHeader, "HEAD tensor name too long");
    std::string name(len, '\0');
    source.read(name.data(), len);
    if (source.gcount() != static_cast<std::streamsize>(len)) {
      throw FormatError(FormatErrorKind::kTruncated, "HEAD container truncated");
    }
    tensors[name] = read_feat_block(source).data;
  }
  auto take = [&tensors](const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError(FormatErrorKind::kInvalidHeader, "HEAD missing tensor '" + name + "'");
    return it->second;
  };
  HeadParams p;
  p.score_weight = take("score_weight");
  p.score_bias = take("score_bias");
  p.cls_weight = take("cls_weight");
  p.cls_bias = take("cls_bias");
  p.num_heads = p.score_weight.rows();
  p.head_dim = p.score_weight.cols();
  p.num_classes = p.cls_weight.rows();
  for (std::size_t h = 0; h < p.num_heads; ++h) {
    p.proj_weight.push_back(take("proj_weight." + std::to_string(h)));
    p.proj_bias.push_back(take("proj_bias." + std::to_string(h)));
  }
  p.input_dim = p.proj_weight.front().cols();
  try {
    p.validate();
  } catch (const Error& e) {
    throw FormatError(FormatErrorKind::kInvalidHeader, std::string("inconsistent HEAD tensors: ") + e.what());
  }
  return p;
}

void save_head(const HeadParams& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot open '" + path + "' for writing");
  write_head(params, out);
}

HeadParams load_head(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot open '" + path + "'");
  return read_head(in);
}

}  // namespace reidforge
