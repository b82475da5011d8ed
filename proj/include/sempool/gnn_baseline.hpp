#pragma once

// Generic relational message passing over a retrieved subgraph:
//   h_v^(l) = h_v^(l-1) + tanh(W_u [h_v^(l-1); phi_v])   (nodes with neighbours)
//   h_v^(l) = h_v^(l-1)                                  (isolated nodes)
// where phi_v sums (or averages) messages m = tanh(W_m [h_src; r]) over
// incoming edges. Every fact sends a message in both directions.

#include <cstdint>
#include <map>
#include <string_view>
#include <vector>

#include "sempool/kg_store.hpp"
#include "sempool/nn.hpp"
#include "sempool/verbalize_encode.hpp"

namespace sempool {

enum class Aggregation { sum, mean };

Aggregation parse_aggregation(std::string_view s);
std::string to_string(Aggregation a);

/// Relation name <-> row of the relation embedding table. Always contains the
/// two virtual relations.
class RelationVocab {
 public:
  RelationVocab() = default;
  explicit RelationVocab(const std::set<RelationId>& kg_relations);
  static RelationVocab from_names(std::vector<RelationId> names);

  int index(const RelationId& r) const;  // throws on unknown relation
  int size() const { return static_cast<int>(names_.size()); }
  const std::vector<RelationId>& names() const { return names_; }

 private:
  std::vector<RelationId> names_;
  std::map<RelationId, int> index_;
};

struct GnnConfig {
  int layers = 2;
  Index width = 64;
  Aggregation aggregation = Aggregation::sum;
};

struct GnnLayer {
  Linear message;  // [h_src; r] (2d) -> d
  Linear update;   // [h_v; phi_v] (2d) -> d
};

struct GnnParams {
  Matrix relation_embedding;  // relations x width
  std::vector<GnnLayer> layers;

  GnnParams() = default;
  GnnParams(const GnnConfig& config, int relation_count);
  void init(Rng& rng);
};

template <SameBase<GnnParams> G, class F>
void visit_params(G& g, const std::string& prefix, F&& f) {
  f(prefix + ".relation_embedding", g.relation_embedding);
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    visit_params(g.layers[i].message, prefix + ".layer" + std::to_string(i) + ".message", f);
    visit_params(g.layers[i].update, prefix + ".layer" + std::to_string(i) + ".update", f);
  }
}

struct GnnEdge {
  int head;
  int tail;
  int relation;
};

/// Index form of a subgraph. `entity_init` holds encoder embeddings for every
/// node (the virtual node's row is a placeholder replaced at init_nodes time).
struct GnnGraph {
  std::vector<EntityId> nodes;
  int question_node = -1;
  std::vector<GnnEdge> edges;
  Matrix entity_init;
};

GnnGraph build_gnn_graph(const Subgraph& sub, const RelationVocab& relations,
                         const TextEncoder& encoder);

/// h^(0): the virtual node gets `question_repr`, entities their encoder embedding.
Matrix init_nodes(const GnnGraph& graph, const Vector& question_repr);

/// Message from a source node state along a relation.
Vector message(const GnnLayer& layer, const Vector& source_state, const Vector& relation_embedding);

struct GnnCounter {
  std::uint64_t node_updates = 0;
};

struct GnnCache {
  struct Layer {
    Matrix state_in;
    Matrix message_in;
    Matrix messages;
    Matrix update_in;
    Matrix update;
  };
  std::vector<int> src;
  std::vector<int> dst;
  std::vector<int> rel;
  Vector in_degree;
  std::vector<Layer> layers;
  Aggregation aggregation = Aggregation::sum;
};

/// Returns h^(l) for l = 0..layers.
std::vector<Matrix> gnn_forward(const GnnParams& params, const GnnConfig& config,
                                const GnnGraph& graph, const Matrix& state0,
                                GnnCache* cache = nullptr, GnnCounter* counter = nullptr);

/// Backpropagates d/d(h^(L)); accumulates into `grad` and returns d/d(h^(0)).
Matrix gnn_backward(const GnnParams& params, const GnnCache& cache, const Matrix& d_final,
                    GnnParams& grad);

/// Readout from the virtual question node's final state.
double gnn_score(const std::vector<Matrix>& states, const GnnGraph& graph, const ScoreMlp& readout);

}  // namespace sempool
