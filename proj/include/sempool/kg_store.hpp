#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "sempool/error.hpp"

namespace sempool {

// Opaque lowercase id; the display surface is recovered by mapping '_' back to ' '.
using EntityId = std::string;
using RelationId = std::string;

inline constexpr std::string_view kVirtualNode = "question";
inline constexpr std::string_view kEntityRelation = "entity";
inline constexpr std::string_view kAnswerEntityRelation = "a_entity";

EntityId entity_id_from_surface(std::string_view surface);
std::string surface_of(std::string_view id);

struct Fact {
  EntityId head;
  RelationId relation;
  EntityId tail;

  auto operator<=>(const Fact&) const = default;
  bool operator==(const Fact&) const = default;

  // "head\trelation\ttail"; used as the embedding-cache key.
  std::string key() const;
};

/// Immutable multi-relational graph with an undirected per-entity incident-fact index.
class KnowledgeGraph {
 public:
  KnowledgeGraph() = default;

  /// Builds from a fact list; duplicates collapse.
  static KnowledgeGraph from_facts(std::vector<Fact> facts);

  const std::set<EntityId>& entities() const { return entities_; }
  const std::set<RelationId>& relations() const { return relations_; }
  const std::vector<Fact>& facts() const { return facts_; }
  bool contains(std::string_view entity) const;

  /// Indices into facts() of every fact touching the entity (head or tail).
  const std::vector<std::size_t>& incident(const EntityId& entity) const;

  /// Distinct undirected neighbours of an entity.
  std::set<EntityId> neighbours(const EntityId& entity) const;

  /// Longest entity surface measured in tokens.
  std::size_t max_surface_tokens() const { return max_surface_tokens_; }

  const std::map<std::string, std::vector<EntityId>>& surface_index() const {
    return by_first_token_;
  }

 private:
  std::set<EntityId> entities_;
  std::set<RelationId> relations_;
  std::vector<Fact> facts_;  // sorted, unique
  std::map<EntityId, std::vector<std::size_t>> adjacency_;
  std::map<std::string, std::vector<EntityId>> by_first_token_;
  std::size_t max_surface_tokens_ = 0;
};

/// Reads `head<TAB>relation<TAB>tail` lines; `#` lines and blank lines are skipped.
KnowledgeGraph load_kg(const std::filesystem::path& path);
KnowledgeGraph parse_kg(std::string_view text);
void write_kg(const std::filesystem::path& path, const KnowledgeGraph& kg);

/// Lowercase alphanumeric runs; everything else separates.
std::vector<std::string> split_words(std::string_view text);

/// Every KG entity whose surface token sequence occurs contiguously in the text.
std::set<EntityId> link_entities(std::string_view statement_text, const KnowledgeGraph& kg);

struct GroundedStatement {
  std::string context;
  std::string question;
  std::string candidate;
  std::set<EntityId> question_entities;
  std::set<EntityId> answer_entities;
  bool label = false;

  std::string full_text() const;
};

/// Links question entities from context+question and answer entities from the
/// candidate; entities found in both are kept on the answer side only.
GroundedStatement ground_statement(std::string context, std::string question,
                                   std::string candidate, const KnowledgeGraph& kg);

enum class Provenance : std::uint8_t { kg, virtual_edge };

struct SubgraphEdge {
  Fact fact;
  Provenance provenance = Provenance::kg;

  auto operator<=>(const SubgraphEdge&) const = default;
  bool operator==(const SubgraphEdge&) const = default;
};

struct Subgraph {
  std::vector<EntityId> nodes;      // sorted; includes kVirtualNode once added
  std::vector<SubgraphEdge> edges;  // sorted by (head, relation, tail)
  bool has_virtual = false;

  std::size_t kg_node_count() const { return nodes.size() - (has_virtual ? 1 : 0); }
  bool contains_node(std::string_view node) const;

  /// Line-oriented canonical text; equal subgraphs serialize identically.
  std::string serialize() const;
};

inline constexpr int kDefaultMaxNodes = 32;

/// Linked entities plus every node on a length-2 path between two distinct
/// linked entities, capped at `max_nodes` by statement-token overlap (ties by
/// id); edges are all KG facts with both endpoints kept.
Subgraph retrieve_subgraph(const KnowledgeGraph& kg, const GroundedStatement& stmt,
                           int max_nodes = kDefaultMaxNodes);

Subgraph add_virtual_question_node(Subgraph sub, const GroundedStatement& stmt);

/// Drops every edge incident to an answer entity; nodes stay.
Subgraph remove_answer_edges(Subgraph sub, const GroundedStatement& stmt);

/// retrieve + virtual node, optionally followed by the answer-edge perturbation.
Subgraph build_subgraph(const KnowledgeGraph& kg, const GroundedStatement& stmt,
                        int max_nodes, bool remove_answers);

}  // namespace sempool
