#pragma once

// Naive reference implementations. Everything here is written with explicit
// loops over std::vector so it shares no code paths with the library's Eigen
// expressions; parameters are read element by element.

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "sempool/gnn_baseline.hpp"
#include "sempool/kg_store.hpp"
#include "sempool/nn.hpp"
#include "sempool/pooling.hpp"

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major

inline Mat to_mat(const sempool::Matrix& m) {
  Mat out(static_cast<std::size_t>(m.rows()), Vec(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  }
  return out;
}

inline Vec to_vec(const sempool::Vector& v) {
  Vec out(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) out[i] = v(i);
  return out;
}

inline Vec linear(const sempool::Linear& l, const Vec& x) {
  Vec y(static_cast<std::size_t>(l.out()));
  for (Eigen::Index o = 0; o < l.out(); ++o) {
    double s = l.bias(o);
    for (Eigen::Index i = 0; i < l.in(); ++i) s += l.weight(o, i) * x[i];
    y[o] = s;
  }
  return y;
}

inline Vec softmax(const Vec& z) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  Vec e(z.size());
  double sum = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    e[i] = std::exp(z[i] - m);
    sum += e[i];
  }
  for (double& v : e) v /= sum;
  return e;
}

inline Vec tanh_v(Vec x) {
  for (double& v : x) v = std::tanh(v);
  return x;
}

inline Vec concat(const Vec& a, const Vec& b) {
  Vec c = a;
  c.insert(c.end(), b.begin(), b.end());
  return c;
}

struct PoolOut {
  Vec weights;
  Vec g;
};

inline PoolOut pool(const sempool::PoolingHead& head, const Mat& edges) {
  const auto d = static_cast<std::size_t>(head.width());
  PoolOut out{{}, Vec(d, 0.0)};
  if (edges.empty()) return out;
  Vec logits;
  for (const auto& e : edges) logits.push_back(linear(head.key_out, tanh_v(linear(head.key_hidden, e)))[0]);
  out.weights = softmax(logits);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    const Vec v = linear(head.value, edges[i]);
    for (std::size_t j = 0; j < d; ++j) out.g[j] += out.weights[i] * v[j];
  }
  return out;
}

inline Vec layer_norm(const sempool::LayerNorm& ln, const Vec& x) {
  const double n = static_cast<double>(x.size());
  double mean = 0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * ln.gamma(static_cast<Eigen::Index>(i)) +
           ln.beta(static_cast<Eigen::Index>(i));
  }
  return y;
}

inline double gelu(double v) {
  const double pi = 3.14159265358979323846;
  return 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / pi) * (v + 0.044715 * v * v * v)));
}

inline Mat attention(const sempool::SelfAttention& a, const Mat& x) {
  const std::size_t t = x.size();
  const std::size_t d = x[0].size();
  const std::size_t dh = d / static_cast<std::size_t>(a.heads);
  Mat qkv;
  for (const auto& row : x) qkv.push_back(linear(a.qkv, row));
  Mat mixed(t, Vec(d, 0.0));
  for (std::size_t h = 0; h < static_cast<std::size_t>(a.heads); ++h) {
    for (std::size_t i = 0; i < t; ++i) {
      Vec scores(t);
      for (std::size_t j = 0; j < t; ++j) {
        double s = 0;
        for (std::size_t c = 0; c < dh; ++c) s += qkv[i][h * dh + c] * qkv[j][d + h * dh + c];
        scores[j] = s / std::sqrt(static_cast<double>(dh));
      }
      const Vec p = softmax(scores);
      for (std::size_t j = 0; j < t; ++j) {
        for (std::size_t c = 0; c < dh; ++c) mixed[i][h * dh + c] += p[j] * qkv[j][2 * d + h * dh + c];
      }
    }
  }
  Mat out;
  for (const auto& row : mixed) out.push_back(linear(a.out, row));
  return out;
}

inline Mat layer(const sempool::TransformerLayer& l, Mat x) {
  Mat normed;
  for (const auto& row : x) normed.push_back(layer_norm(l.ln1, row));
  const Mat att = attention(l.attn, normed);
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = 0; j < x[i].size(); ++j) x[i][j] += att[i][j];
  }
  for (auto& row : x) {
    Vec hidden = linear(l.ff_in, layer_norm(l.ln2, row));
    for (double& v : hidden) v = gelu(v);
    const Vec ff = linear(l.ff_out, hidden);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += ff[j];
  }
  return x;
}

struct TransformerOut {
  Mat output;                 // after final norm
  std::vector<Vec> row0_after; // graph-token state after each layer (pre-injection of the next)
};

/// k-th late vector (1-based) enters after L-k layers.
inline TransformerOut transformer(const sempool::Transformer& tr, const std::vector<int>& tokens,
                                  const Vec* row0, const std::vector<Vec>& late) {
  const auto d = static_cast<std::size_t>(tr.width());
  const int depth = tr.depth();
  Mat x(tokens.size(), Vec(d));
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const double tok = (i == 0 && row0) ? (*row0)[j] : tr.token_embedding(tokens[i], static_cast<Eigen::Index>(j));
      x[i][j] = tok + tr.position_embedding(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
  }
  TransformerOut out;
  for (int done = 0; done < depth; ++done) {
    for (std::size_t k = 1; k <= late.size(); ++k) {
      if (depth - static_cast<int>(k) == done) {
        for (std::size_t j = 0; j < d; ++j) x[0][j] += late[k - 1][j];
      }
    }
    x = layer(tr.layers[static_cast<std::size_t>(done)], x);
    out.row0_after.push_back(x[0]);
  }
  for (auto& row : x) out.output.push_back(layer_norm(tr.final_norm, row));
  return out;
}

inline Vec message(const sempool::GnnLayer& l, const Vec& src, const Vec& rel) {
  return tanh_v(linear(l.message, concat(src, rel)));
}

/// Direct transcription of the update rule with explicit neighbour lists.
inline std::vector<Mat> gnn(const sempool::GnnParams& p, const sempool::GnnConfig& cfg,
                            const sempool::GnnGraph& g, const Mat& h0) {
  const std::size_t n = h0.size();
  // incoming[v] = list of (source, relation)
  std::vector<std::vector<std::pair<int, int>>> incoming(n);
  for (const auto& e : g.edges) {
    incoming[static_cast<std::size_t>(e.tail)].push_back({e.head, e.relation});
    incoming[static_cast<std::size_t>(e.head)].push_back({e.tail, e.relation});
  }
  std::vector<Mat> states{h0};
  for (int l = 0; l < cfg.layers; ++l) {
    const auto& layer = p.layers[static_cast<std::size_t>(l)];
    const Mat& h = states.back();
    Mat next = h;
    for (std::size_t v = 0; v < n; ++v) {
      if (incoming[v].empty()) continue;
      Vec agg(h[v].size(), 0.0);
      for (auto [src, rel] : incoming[v]) {
        Vec r(h[v].size());
        for (std::size_t j = 0; j < r.size(); ++j) r[j] = p.relation_embedding(rel, static_cast<Eigen::Index>(j));
        const Vec m = message(layer, h[static_cast<std::size_t>(src)], r);
        for (std::size_t j = 0; j < agg.size(); ++j) agg[j] += m[j];
      }
      if (cfg.aggregation == sempool::Aggregation::mean) {
        for (double& a : agg) a /= static_cast<double>(incoming[v].size());
      }
      const Vec u = tanh_v(linear(layer.update, concat(h[v], agg)));
      for (std::size_t j = 0; j < u.size(); ++j) next[v][j] += u[j];
    }
    states.push_back(std::move(next));
  }
  return states;
}

/// Every entity whose full surface occurs as a contiguous word run.
inline std::set<sempool::EntityId> link_scan(const std::string& text, const sempool::KnowledgeGraph& kg) {
  const auto words = sempool::split_words(text);
  std::set<sempool::EntityId> out;
  for (const auto& e : kg.entities()) {
    const auto sw = sempool::split_words(sempool::surface_of(e));
    if (sw.empty() || sw.size() > words.size()) continue;
    for (std::size_t i = 0; i + sw.size() <= words.size(); ++i) {
      bool match = true;
      for (std::size_t k = 0; k < sw.size() && match; ++k) match = words[i + k] == sw[k];
      if (match) out.insert(e);
    }
  }
  return out;
}

/// Uncapped retrieval by scanning the fact list: linked entities plus any node
/// with fact-adjacency to two distinct linked entities.
inline std::set<sempool::EntityId> retrieve_nodes(const sempool::KnowledgeGraph& kg,
                                                  const std::set<sempool::EntityId>& linked) {
  std::map<sempool::EntityId, std::set<sempool::EntityId>> touches;
  for (const auto& f : kg.facts()) {
    if (linked.count(f.head) && !linked.count(f.tail)) touches[f.tail].insert(f.head);
    if (linked.count(f.tail) && !linked.count(f.head)) touches[f.head].insert(f.tail);
  }
  std::set<sempool::EntityId> out;
  for (const auto& e : linked) {
    if (kg.contains(e)) out.insert(e);
  }
  for (const auto& [m, ends] : touches) {
    if (ends.size() >= 2) out.insert(m);
  }
  return out;
}

inline bool path_exists(const sempool::KnowledgeGraph& kg, const sempool::EntityId& from,
                        const sempool::EntityId& to) {
  std::map<sempool::EntityId, std::vector<sempool::EntityId>> adj;
  for (const auto& f : kg.facts()) {
    adj[f.head].push_back(f.tail);
    adj[f.tail].push_back(f.head);
  }
  std::set<sempool::EntityId> seen{from};
  std::deque<sempool::EntityId> queue{from};
  while (!queue.empty()) {
    const auto u = queue.front();
    queue.pop_front();
    if (u == to) return true;
    for (const auto& v : adj[u]) {
      if (seen.insert(v).second) queue.push_back(v);
    }
  }
  return false;
}

inline double max_abs_diff(const Vec& a, const Vec& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace oracle
