#include "sempool/nn.hpp"

#include <cmath>

#include "sempool/error.hpp"

namespace sempool {

void fill_uniform(Matrix& m, Rng& rng, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index j = 0; j < m.cols(); ++j) {
    for (Index i = 0; i < m.rows(); ++i) m(i, j) = dist(rng);
  }
}

void fill_uniform(Vector& v, Rng& rng, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index i = 0; i < v.size(); ++i) v(i) = dist(rng);
}

void fill_normal(Matrix& m, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Index j = 0; j < m.cols(); ++j) {
    for (Index i = 0; i < m.rows(); ++i) m(i, j) = dist(rng);
  }
}

// ---------------------------------------------------------------------------

Linear::Linear(Index in, Index out) : weight(Matrix::Zero(out, in)), bias(Vector::Zero(out)) {}

void Linear::init(Rng& rng) {
  fill_uniform(weight, rng, 1.0 / std::sqrt(static_cast<double>(in())));
  bias.setZero();
}

Matrix Linear::forward(const Matrix& x) const {
  Matrix y = x * weight.transpose();
  y.rowwise() += bias.transpose();
  return y;
}

Matrix Linear::backward(const Matrix& x, const Matrix& dy, Linear& grad) const {
  grad.weight.noalias() += dy.transpose() * x;
  grad.bias += dy.colwise().sum().transpose();
  return dy * weight;
}

// ---------------------------------------------------------------------------

LayerNorm::LayerNorm(Index width) : gamma(Vector::Ones(width)), beta(Vector::Zero(width)) {}

Matrix LayerNorm::forward(const Matrix& x, Cache& cache) const {
  const Index n = x.cols();
  cache.normalized.resize(x.rows(), n);
  cache.inv_std.resize(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().sum() / static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + kEps);
    cache.inv_std(r) = inv;
    cache.normalized.row(r) = (x.row(r).array() - mean) * inv;
  }
  Matrix y = cache.normalized.array().rowwise() * gamma.transpose().array();
  y.rowwise() += beta.transpose();
  return y;
}

Matrix LayerNorm::backward(const Cache& cache, const Matrix& dy, LayerNorm& grad) const {
  const auto n = static_cast<double>(dy.cols());
  grad.gamma += (dy.array() * cache.normalized.array()).colwise().sum().transpose().matrix();
  grad.beta += dy.colwise().sum().transpose();
  Matrix dxhat = dy.array().rowwise() * gamma.transpose().array();
  Matrix dx(dy.rows(), dy.cols());
  for (Index r = 0; r < dy.rows(); ++r) {
    const double sum = dxhat.row(r).sum();
    const double dot = dxhat.row(r).dot(cache.normalized.row(r));
    dx.row(r) = (cache.inv_std(r) / n) *
                (n * dxhat.row(r).array() - sum - cache.normalized.row(r).array() * dot).matrix();
  }
  return dx;
}

// ---------------------------------------------------------------------------

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Matrix gelu(const Matrix& x) {
  return x.unaryExpr([](double v) {
    return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  });
}

Matrix gelu_grad(const Matrix& x) {
  return x.unaryExpr([](double v) {
    const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
    return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
  });
}

// ---------------------------------------------------------------------------

SelfAttention::SelfAttention(Index width, int heads_)
    : heads(heads_), qkv(width, 3 * width), out(width, width) {
  if (heads_ < 1 || width % heads_ != 0) throw Error("width must be divisible by heads");
}

Matrix SelfAttention::forward(const Matrix& x, Cache& cache) const {
  const Index t = x.rows();
  const Index d = x.cols();
  const Index dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  cache.input = x;
  cache.qkv = qkv.forward(x);
  cache.probs.resize(static_cast<std::size_t>(heads));
  cache.mixed.resize(t, d);
  for (int h = 0; h < heads; ++h) {
    const auto q = cache.qkv.middleCols(h * dh, dh);
    const auto k = cache.qkv.middleCols(d + h * dh, dh);
    const auto v = cache.qkv.middleCols(2 * d + h * dh, dh);
    Matrix s = (q * k.transpose()) * scale;
    for (Index r = 0; r < t; ++r) {
      const double m = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - m).exp();
      s.row(r) /= s.row(r).sum();
    }
    cache.mixed.middleCols(h * dh, dh).noalias() = s * v;
    cache.probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  return out.forward(cache.mixed);
}

Matrix SelfAttention::backward(const Cache& cache, const Matrix& dy, SelfAttention& grad) const {
  const Index d = cache.input.cols();
  const Index dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Matrix dmixed = out.backward(cache.mixed, dy, grad.out);
  Matrix dqkv(cache.qkv.rows(), cache.qkv.cols());
  for (int h = 0; h < heads; ++h) {
    const Matrix& p = cache.probs[static_cast<std::size_t>(h)];
    const auto q = cache.qkv.middleCols(h * dh, dh);
    const auto k = cache.qkv.middleCols(d + h * dh, dh);
    const auto v = cache.qkv.middleCols(2 * d + h * dh, dh);
    const auto dout = dmixed.middleCols(h * dh, dh);
    const Matrix dp = dout * v.transpose();
    dqkv.middleCols(2 * d + h * dh, dh).noalias() = p.transpose() * dout;
    const Vector row_dot = (dp.array() * p.array()).rowwise().sum();
    Matrix ds = p.array() * (dp.colwise() - row_dot).array();
    ds *= scale;
    dqkv.middleCols(h * dh, dh).noalias() = ds * k;
    dqkv.middleCols(d + h * dh, dh).noalias() = ds.transpose() * q;
  }
  return qkv.backward(cache.input, dqkv, grad.qkv);
}

// ---------------------------------------------------------------------------

TransformerLayer::TransformerLayer(Index width, int heads, Index ffn_width)
    : ln1(width), attn(width, heads), ln2(width), ff_in(width, ffn_width), ff_out(ffn_width, width) {}

Matrix TransformerLayer::forward(const Matrix& x, Cache& cache) const {
  Matrix h = x + attn.forward(ln1.forward(x, cache.ln1), cache.attn);
  cache.ln2_out = ln2.forward(h, cache.ln2);
  cache.hidden_pre = ff_in.forward(cache.ln2_out);
  cache.hidden = gelu(cache.hidden_pre);
  h += ff_out.forward(cache.hidden);
  return h;
}

Matrix TransformerLayer::backward(const Cache& cache, const Matrix& dy,
                                  TransformerLayer& grad) const {
  const Matrix dhidden = ff_out.backward(cache.hidden, dy, grad.ff_out);
  const Matrix dpre = dhidden.cwiseProduct(gelu_grad(cache.hidden_pre));
  const Matrix dln2 = ff_in.backward(cache.ln2_out, dpre, grad.ff_in);
  Matrix dmid = dy + ln2.backward(cache.ln2, dln2, grad.ln2);
  const Matrix dattn_in = attn.backward(cache.attn, dmid, grad.attn);
  dmid += ln1.backward(cache.ln1, dattn_in, grad.ln1);
  return dmid;
}

// ---------------------------------------------------------------------------

Transformer::Transformer(int vocab, int max_tokens, Index width, int heads, int depth,
                         Index ffn_width)
    : token_embedding(Matrix::Zero(vocab, width)),
      position_embedding(Matrix::Zero(max_tokens, width)),
      final_norm(width) {
  layers.reserve(static_cast<std::size_t>(depth));
  for (int i = 0; i < depth; ++i) layers.emplace_back(width, heads, ffn_width);
}

void Transformer::init(Rng& rng) {
  fill_normal(token_embedding, rng, 1.0);
  fill_normal(position_embedding, rng, 0.3);
  for (auto& layer : layers) {
    layer.attn.qkv.init(rng);
    layer.attn.out.init(rng);
    layer.ff_in.init(rng);
    layer.ff_out.init(rng);
  }
}

Matrix Transformer::forward(std::span<const TokenId> tokens, const Vector* row0,
                            std::span<const Vector> late, Cache& cache) const {
  const auto t = static_cast<Index>(tokens.size());
  if (t == 0) throw Error("empty token sequence");
  if (t > max_tokens()) throw Error("sequence longer than position table");
  if (late.size() > layers.size()) throw Error("more late injections than layers");
  const int depth_ = this->depth();

  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.row0_overridden = row0 != nullptr;
  cache.injected_at.resize(late.size());
  for (std::size_t k = 1; k <= late.size(); ++k) {
    cache.injected_at[k - 1] = depth_ - static_cast<int>(k);
  }

  Matrix x(t, width());
  for (Index i = 0; i < t; ++i) {
    x.row(i) = token_embedding.row(tokens[static_cast<std::size_t>(i)]) + position_embedding.row(i);
  }
  if (row0) x.row(0) = row0->transpose() + position_embedding.row(0);

  cache.layers.resize(layers.size());
  cache.row0_states.resize(layers.size() + 1);
  for (int j = 0; j < depth_; ++j) {
    for (std::size_t k = 0; k < late.size(); ++k) {
      if (cache.injected_at[k] == j) x.row(0) += late[k].transpose();
    }
    cache.row0_states[static_cast<std::size_t>(j)] = x.row(0).transpose();
    x = layers[static_cast<std::size_t>(j)].forward(x, cache.layers[static_cast<std::size_t>(j)]);
  }
  cache.row0_states.back() = x.row(0).transpose();
  cache.output = final_norm.forward(x, cache.final_norm);
  return cache.output;
}

Transformer::InputGrads Transformer::backward(const Cache& cache, const Matrix& d_output,
                                              Transformer& grad) const {
  InputGrads in;
  in.late.resize(cache.injected_at.size());
  Matrix dx = final_norm.backward(cache.final_norm, d_output, grad.final_norm);
  for (int j = depth() - 1; j >= 0; --j) {
    dx = layers[static_cast<std::size_t>(j)].backward(cache.layers[static_cast<std::size_t>(j)], dx,
                                                      grad.layers[static_cast<std::size_t>(j)]);
    for (std::size_t k = 0; k < cache.injected_at.size(); ++k) {
      if (cache.injected_at[k] == j) in.late[k] = dx.row(0).transpose();
    }
  }
  const auto t = static_cast<Index>(cache.tokens.size());
  grad.position_embedding.topRows(t) += dx;
  for (Index i = 0; i < t; ++i) {
    if (i == 0 && cache.row0_overridden) continue;
    grad.token_embedding.row(cache.tokens[static_cast<std::size_t>(i)]) += dx.row(i);
  }
  if (cache.row0_overridden) in.row0 = dx.row(0).transpose();
  return in;
}

// ---------------------------------------------------------------------------

ScoreMlp::ScoreMlp(Index width, Index hidden_width) : hidden(width, hidden_width), out(hidden_width, 1) {}

void ScoreMlp::init(Rng& rng) {
  hidden.init(rng);
  out.init(rng);
}

double ScoreMlp::forward(const Vector& x, Cache& cache) const {
  cache.input = x.transpose();
  cache.activation = hidden.forward(cache.input).array().tanh().matrix();
  return out.forward(cache.activation)(0, 0);
}

Vector ScoreMlp::backward(const Cache& cache, double dy, ScoreMlp& grad) const {
  const Matrix dyy = Matrix::Constant(1, 1, dy);
  const Matrix dact = out.backward(cache.activation, dyy, grad.out);
  const Matrix dpre = dact.array() * (1.0 - cache.activation.array().square());
  return hidden.backward(cache.input, dpre, grad.hidden).transpose();
}

}  // namespace sempool
