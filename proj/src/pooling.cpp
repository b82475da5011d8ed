#include "sempool/pooling.hpp"

#include <cmath>

#include "sempool/error.hpp"

namespace sempool {

PoolingHead::PoolingHead(Index width)
    : value(width, width), key_hidden(width, width), key_out(width, 1) {}

void PoolingHead::init(Rng& rng) {
  const Index d = width();
  fill_normal(value.weight, rng, 0.01);
  value.weight += Matrix::Identity(d, d);
  value.bias.setZero();
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  fill_uniform(key_hidden.weight, rng, bound);
  fill_uniform(key_hidden.bias, rng, bound);
  fill_uniform(key_out.weight, rng, bound);
  fill_uniform(key_out.bias, rng, bound);
}

Vector softmax(const Vector& logits) {
  if (logits.size() == 0) return logits;
  const double m = logits.maxCoeff();
  Vector w = (logits.array() - m).exp();
  return w / w.sum();
}

namespace {

void check_edges(const PoolingHead& head, const EdgeMatrix& edges) {
  if (edges.rows() > 0 && edges.cols() != head.width()) {
    throw Error("edge embedding width " + std::to_string(edges.cols()) + " != head width " +
                std::to_string(head.width()));
  }
}

}  // namespace

Vector key_logits(const PoolingHead& head, const EdgeMatrix& edges) {
  check_edges(head, edges);
  const Matrix act = head.key_hidden.forward(edges).array().tanh();
  return head.key_out.forward(act).col(0);
}

Vector attention_weights(const PoolingHead& head, const EdgeMatrix& edges) {
  if (edges.rows() == 0) throw Error("attention over an empty edge set");
  return softmax(key_logits(head, edges));
}

Vector pool(const PoolingHead& head, const EdgeMatrix& edges, PoolCache* cache) {
  check_edges(head, edges);
  if (edges.rows() == 0) {
    if (cache) *cache = PoolCache{edges, {}, {}, {}, {}};
    return Vector::Zero(head.width());
  }
  PoolCache local;
  PoolCache& c = cache ? *cache : local;
  c.edges = edges;
  c.values = head.value.forward(edges);
  c.key_hidden = head.key_hidden.forward(edges).array().tanh();
  c.logits = head.key_out.forward(c.key_hidden).col(0);
  c.weights = softmax(c.logits);
  return c.values.transpose() * c.weights;
}

std::vector<Vector> pool_multi(std::span<const PoolingHead> heads, const EdgeMatrix& edges,
                               std::vector<PoolCache>* caches) {
  std::vector<Vector> out;
  out.reserve(heads.size());
  if (caches) caches->assign(heads.size(), PoolCache{});
  for (std::size_t k = 0; k < heads.size(); ++k) {
    out.push_back(pool(heads[k], edges, caches ? &(*caches)[k] : nullptr));
  }
  return out;
}

Matrix pool_backward_into(const PoolingHead& head, const PoolCache& cache, const Vector& upstream,
                          PoolingHead& grad) {
  const Index e = cache.edges.rows();
  if (upstream.size() != head.width()) throw Error("upstream gradient has wrong width");
  if (e == 0) return Matrix(0, head.width());
  // g = V^T a
  const Matrix dvalues = cache.weights * upstream.transpose();
  const Vector dweights = cache.values * upstream;
  const double mean = cache.weights.dot(dweights);
  const Vector dlogits = cache.weights.array() * (dweights.array() - mean);
  const Matrix dact = head.key_out.backward(cache.key_hidden, dlogits, grad.key_out);
  const Matrix dpre = dact.array() * (1.0 - cache.key_hidden.array().square());
  Matrix dedges = head.key_hidden.backward(cache.edges, dpre, grad.key_hidden);
  dedges += head.value.backward(cache.edges, dvalues, grad.value);
  return dedges;
}

PoolGrads pool_backward(const PoolingHead& head, const PoolCache& cache, const Vector& upstream) {
  PoolGrads g{head, {}};
  zero_params(g.head);
  g.edges = pool_backward_into(head, cache, upstream, g.head);
  return g;
}

}  // namespace sempool
