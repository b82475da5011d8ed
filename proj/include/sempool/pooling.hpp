#pragma once

// Self-attention pooling over edge embeddings. Each head scores facts with a
// one-hidden-layer key network, softmax-normalises the scalar logits and
// returns the weighted sum of linearly projected edge embeddings.

#include <cstddef>
#include <vector>

#include "sempool/nn.hpp"

namespace sempool {

struct PoolingHead {
  Linear value;       // f_v: width -> width
  Linear key_hidden;  // first layer of f_k
  Linear key_out;     // hidden -> 1 logit

  PoolingHead() = default;
  explicit PoolingHead(Index width);

  Index width() const { return value.in(); }

  /// Near-identity value map (noise scale 0.01), U(-1/sqrt(d), 1/sqrt(d)) key net.
  void init(Rng& rng);
};

template <SameBase<PoolingHead> P, class F>
void visit_params(P& p, const std::string& prefix, F&& f) {
  visit_params(p.value, prefix + ".value", f);
  visit_params(p.key_hidden, prefix + ".key_hidden", f);
  visit_params(p.key_out, prefix + ".key_out", f);
}

/// Rows are edge embeddings in canonical edge order.
using EdgeMatrix = Matrix;

struct PoolCache {
  Matrix edges;
  Matrix values;      // f_v(h_e), one row per edge
  Matrix key_hidden;  // tanh activations
  Vector logits;
  Vector weights;
};

/// Max-subtracted softmax; every entry in [0,1] and the sum is 1.
Vector softmax(const Vector& logits);

Vector key_logits(const PoolingHead& head, const EdgeMatrix& edges);

/// a_e over the edge set. Throws on an empty edge set.
Vector attention_weights(const PoolingHead& head, const EdgeMatrix& edges);

/// g = sum_e a_e f_v(h_e); returns the zero vector for an empty edge set.
Vector pool(const PoolingHead& head, const EdgeMatrix& edges, PoolCache* cache = nullptr);

std::vector<Vector> pool_multi(std::span<const PoolingHead> heads, const EdgeMatrix& edges,
                               std::vector<PoolCache>* caches = nullptr);

struct PoolGrads {
  PoolingHead head;  // same shapes as the head, zero-initialised by pool_backward
  Matrix edges;      // d/d(h_e)
};

/// Exact gradient of <upstream, pool(head, edges)> w.r.t. head parameters and edges.
PoolGrads pool_backward(const PoolingHead& head, const PoolCache& cache, const Vector& upstream);

/// Accumulating form used by the model; returns d/d(edges).
Matrix pool_backward_into(const PoolingHead& head, const PoolCache& cache, const Vector& upstream,
                          PoolingHead& grad);

}  // namespace sempool
