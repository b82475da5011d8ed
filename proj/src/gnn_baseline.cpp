#include "sempool/gnn_baseline.hpp"

#include <algorithm>

#include "sempool/error.hpp"

namespace sempool {

Aggregation parse_aggregation(std::string_view s) {
  if (s == "sum") return Aggregation::sum;
  if (s == "mean") return Aggregation::mean;
  throw Error("unknown aggregation '" + std::string(s) + "'");
}

std::string to_string(Aggregation a) { return a == Aggregation::sum ? "sum" : "mean"; }

RelationVocab::RelationVocab(const std::set<RelationId>& kg_relations) {
  std::set<RelationId> all = kg_relations;
  all.insert(std::string(kEntityRelation));
  all.insert(std::string(kAnswerEntityRelation));
  *this = from_names({all.begin(), all.end()});
}

RelationVocab RelationVocab::from_names(std::vector<RelationId> names) {
  RelationVocab v;
  v.names_ = std::move(names);
  for (std::size_t i = 0; i < v.names_.size(); ++i) {
    if (!v.index_.emplace(v.names_[i], static_cast<int>(i)).second) {
      throw Error("duplicate relation '" + v.names_[i] + "'");
    }
  }
  return v;
}

int RelationVocab::index(const RelationId& r) const {
  auto it = index_.find(r);
  if (it == index_.end()) throw Error("unknown relation '" + r + "'");
  return it->second;
}

GnnParams::GnnParams(const GnnConfig& config, int relation_count)
    : relation_embedding(Matrix::Zero(relation_count, config.width)) {
  for (int l = 0; l < config.layers; ++l) {
    layers.push_back({Linear(2 * config.width, config.width), Linear(2 * config.width, config.width)});
  }
}

void GnnParams::init(Rng& rng) {
  fill_normal(relation_embedding, rng, 1.0);
  for (auto& l : layers) {
    l.message.init(rng);
    l.update.init(rng);
  }
}

GnnGraph build_gnn_graph(const Subgraph& sub, const RelationVocab& relations,
                         const TextEncoder& encoder) {
  GnnGraph g;
  g.nodes = sub.nodes;
  std::map<EntityId, int> index;
  for (std::size_t i = 0; i < g.nodes.size(); ++i) index[g.nodes[i]] = static_cast<int>(i);
  g.entity_init = Matrix::Zero(static_cast<Index>(g.nodes.size()), encoder.width());
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    if (g.nodes[i] == kVirtualNode && sub.has_virtual) {
      g.question_node = static_cast<int>(i);
      continue;
    }
    g.entity_init.row(static_cast<Index>(i)) = encoder.encode_text(surface_of(g.nodes[i])).transpose();
  }
  for (const auto& e : sub.edges) {
    g.edges.push_back({index.at(e.fact.head), index.at(e.fact.tail), relations.index(e.fact.relation)});
  }
  return g;
}

Matrix init_nodes(const GnnGraph& graph, const Vector& question_repr) {
  Matrix h = graph.entity_init;
  if (graph.question_node >= 0) h.row(graph.question_node) = question_repr.transpose();
  return h;
}

Vector message(const GnnLayer& layer, const Vector& source_state, const Vector& relation_embedding) {
  Matrix in(1, source_state.size() + relation_embedding.size());
  in << source_state.transpose(), relation_embedding.transpose();
  return layer.message.forward(in).array().tanh().matrix().transpose();
}

std::vector<Matrix> gnn_forward(const GnnParams& params, const GnnConfig& config,
                                const GnnGraph& graph, const Matrix& state0, GnnCache* cache,
                                GnnCounter* counter) {
  const Index n = state0.rows();
  const Index d = state0.cols();
  GnnCache local;
  GnnCache& c = cache ? *cache : local;
  c = GnnCache{};
  c.aggregation = config.aggregation;
  for (const auto& e : graph.edges) {
    c.src.push_back(e.tail);
    c.dst.push_back(e.head);
    c.rel.push_back(e.relation);
    c.src.push_back(e.head);
    c.dst.push_back(e.tail);
    c.rel.push_back(e.relation);
  }
  const auto m = static_cast<Index>(c.src.size());
  c.in_degree = Vector::Zero(n);
  for (int v : c.dst) c.in_degree(v) += 1.0;

  std::vector<Matrix> states{state0};
  for (int l = 0; l < config.layers; ++l) {
    const GnnLayer& layer = params.layers[static_cast<std::size_t>(l)];
    GnnCache::Layer lc;
    lc.state_in = states.back();
    lc.message_in.resize(m, 2 * d);
    for (Index i = 0; i < m; ++i) {
      lc.message_in.row(i) << lc.state_in.row(c.src[static_cast<std::size_t>(i)]),
          params.relation_embedding.row(c.rel[static_cast<std::size_t>(i)]);
    }
    lc.messages = layer.message.forward(lc.message_in).array().tanh();
    Matrix agg = Matrix::Zero(n, d);
    for (Index i = 0; i < m; ++i) agg.row(c.dst[static_cast<std::size_t>(i)]) += lc.messages.row(i);
    if (config.aggregation == Aggregation::mean) {
      for (Index v = 0; v < n; ++v) {
        if (c.in_degree(v) > 0) agg.row(v) /= c.in_degree(v);
      }
    }
    lc.update_in.resize(n, 2 * d);
    lc.update_in << lc.state_in, agg;
    lc.update = layer.update.forward(lc.update_in).array().tanh();
    Matrix next = lc.state_in;
    for (Index v = 0; v < n; ++v) {
      if (c.in_degree(v) > 0) next.row(v) += lc.update.row(v);
    }
    if (counter) counter->node_updates += static_cast<std::uint64_t>(n);
    c.layers.push_back(std::move(lc));
    states.push_back(std::move(next));
  }
  return states;
}

Matrix gnn_backward(const GnnParams& params, const GnnCache& cache, const Matrix& d_final,
                    GnnParams& grad) {
  const Index d = d_final.cols();
  const Index n = d_final.rows();
  Matrix dh = d_final;
  for (int l = static_cast<int>(cache.layers.size()) - 1; l >= 0; --l) {
    const auto& lc = cache.layers[static_cast<std::size_t>(l)];
    const GnnLayer& layer = params.layers[static_cast<std::size_t>(l)];
    GnnLayer& glayer = grad.layers[static_cast<std::size_t>(l)];
    Matrix dupdate = dh;
    for (Index v = 0; v < n; ++v) {
      if (cache.in_degree(v) == 0) dupdate.row(v).setZero();
    }
    const Matrix dpre = dupdate.array() * (1.0 - lc.update.array().square());
    const Matrix din = layer.update.backward(lc.update_in, dpre, glayer.update);
    Matrix dprev = dh + din.leftCols(d);
    Matrix dagg = din.rightCols(d);
    if (cache.aggregation == Aggregation::mean) {
      for (Index v = 0; v < n; ++v) {
        if (cache.in_degree(v) > 0) dagg.row(v) /= cache.in_degree(v);
      }
    }
    const auto m = static_cast<Index>(cache.src.size());
    Matrix dmsg(m, d);
    for (Index i = 0; i < m; ++i) dmsg.row(i) = dagg.row(cache.dst[static_cast<std::size_t>(i)]);
    const Matrix dmsg_pre = dmsg.array() * (1.0 - lc.messages.array().square());
    const Matrix dmin = layer.message.backward(lc.message_in, dmsg_pre, glayer.message);
    for (Index i = 0; i < m; ++i) {
      dprev.row(cache.src[static_cast<std::size_t>(i)]) += dmin.row(i).leftCols(d);
      grad.relation_embedding.row(cache.rel[static_cast<std::size_t>(i)]) += dmin.row(i).rightCols(d);
    }
    dh = std::move(dprev);
  }
  return dh;
}

double gnn_score(const std::vector<Matrix>& states, const GnnGraph& graph, const ScoreMlp& readout) {
  if (graph.question_node < 0) throw Error("graph has no virtual question node");
  ScoreMlp::Cache cache;
  return readout.forward(states.back().row(graph.question_node).transpose(), cache);
}

}  // namespace sempool
