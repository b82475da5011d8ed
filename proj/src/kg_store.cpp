#include "sempool/kg_store.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace sempool {

EntityId entity_id_from_surface(std::string_view surface) {
  std::string out;
  bool pending_sep = false;
  for (char raw : surface) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c) || c == '_') {
      pending_sep = !out.empty();
      continue;
    }
    if (pending_sep) out.push_back('_');
    pending_sep = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

std::string surface_of(std::string_view id) {
  std::string out(id);
  std::replace(out.begin(), out.end(), '_', ' ');
  return out;
}

std::string Fact::key() const { return head + '\t' + relation + '\t' + tail; }

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

KnowledgeGraph KnowledgeGraph::from_facts(std::vector<Fact> facts) {
  KnowledgeGraph kg;
  std::sort(facts.begin(), facts.end());
  facts.erase(std::unique(facts.begin(), facts.end()), facts.end());
  kg.facts_ = std::move(facts);
  for (std::size_t i = 0; i < kg.facts_.size(); ++i) {
    const Fact& f = kg.facts_[i];
    kg.entities_.insert(f.head);
    kg.entities_.insert(f.tail);
    kg.relations_.insert(f.relation);
    kg.adjacency_[f.head].push_back(i);
    if (f.tail != f.head) kg.adjacency_[f.tail].push_back(i);
  }
  for (const EntityId& e : kg.entities_) {
    const auto words = split_words(surface_of(e));
    if (words.empty()) continue;
    kg.by_first_token_[words.front()].push_back(e);
    kg.max_surface_tokens_ = std::max(kg.max_surface_tokens_, words.size());
  }
  return kg;
}

bool KnowledgeGraph::contains(std::string_view entity) const {
  return entities_.find(std::string(entity)) != entities_.end();
}

const std::vector<std::size_t>& KnowledgeGraph::incident(const EntityId& entity) const {
  static const std::vector<std::size_t> kNone;
  auto it = adjacency_.find(entity);
  return it == adjacency_.end() ? kNone : it->second;
}

std::set<EntityId> KnowledgeGraph::neighbours(const EntityId& entity) const {
  std::set<EntityId> out;
  for (std::size_t idx : incident(entity)) {
    const Fact& f = facts_[idx];
    const EntityId& other = f.head == entity ? f.tail : f.head;
    if (other != entity) out.insert(other);
  }
  return out;
}

KnowledgeGraph parse_kg(std::string_view text) {
  std::vector<Fact> facts;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 3) {
      throw Error("line " + std::to_string(line_no) + ": expected head<TAB>relation<TAB>tail");
    }
    Fact f{entity_id_from_surface(fields[0]), entity_id_from_surface(fields[1]),
           entity_id_from_surface(fields[2])};
    if (f.head.empty() || f.relation.empty() || f.tail.empty()) {
      throw Error("line " + std::to_string(line_no) + ": empty field");
    }
    if (f.head == kVirtualNode || f.tail == kVirtualNode) {
      throw Error("line " + std::to_string(line_no) + ": entity id 'question' is reserved");
    }
    if (f.relation == kEntityRelation || f.relation == kAnswerEntityRelation) {
      throw Error("line " + std::to_string(line_no) + ": relation '" + f.relation +
                  "' is reserved");
    }
    facts.push_back(std::move(f));
  }
  if (facts.empty()) throw Error("empty KG");
  return KnowledgeGraph::from_facts(std::move(facts));
}

KnowledgeGraph load_kg(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open KG file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_kg(buf.str());
}

void write_kg(const std::filesystem::path& path, const KnowledgeGraph& kg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write KG file " + path.string());
  for (const Fact& f : kg.facts()) out << f.head << '\t' << f.relation << '\t' << f.tail << '\n';
}

std::set<EntityId> link_entities(std::string_view statement_text, const KnowledgeGraph& kg) {
  std::set<EntityId> linked;
  const auto words = split_words(statement_text);
  const auto& index = kg.surface_index();
  for (std::size_t i = 0; i < words.size(); ++i) {
    auto it = index.find(words[i]);
    if (it == index.end()) continue;
    for (const EntityId& e : it->second) {
      const auto surface = split_words(surface_of(e));
      if (i + surface.size() > words.size()) continue;
      if (std::equal(surface.begin(), surface.end(), words.begin() + static_cast<long>(i))) {
        linked.insert(e);
      }
    }
  }
  return linked;
}

std::string GroundedStatement::full_text() const {
  return context + ' ' + question + ' ' + candidate;
}

GroundedStatement ground_statement(std::string context, std::string question,
                                   std::string candidate, const KnowledgeGraph& kg) {
  GroundedStatement s;
  s.answer_entities = link_entities(candidate, kg);
  for (EntityId e : link_entities(context + ' ' + question, kg)) {
    if (!s.answer_entities.count(e)) s.question_entities.insert(std::move(e));
  }
  s.context = std::move(context);
  s.question = std::move(question);
  s.candidate = std::move(candidate);
  return s;
}

bool Subgraph::contains_node(std::string_view node) const {
  return std::binary_search(nodes.begin(), nodes.end(), node,
                            [](const auto& a, const auto& b) {
                              return std::string_view(a) < std::string_view(b);
                            });
}

std::string Subgraph::serialize() const {
  std::string out = "nodes " + std::to_string(nodes.size()) + '\n';
  for (const auto& n : nodes) out += n + '\n';
  out += "edges " + std::to_string(edges.size()) + '\n';
  for (const auto& e : edges) {
    out += e.fact.key();
    out += e.provenance == Provenance::kg ? "\tkg\n" : "\tvirtual\n";
  }
  return out;
}

namespace {

int relevance(const EntityId& e, const std::vector<std::string>& statement_words) {
  const auto surface = split_words(surface_of(e));
  const std::set<std::string> tokens(surface.begin(), surface.end());
  int score = 0;
  for (const auto& w : statement_words) score += tokens.count(w) ? 1 : 0;
  return score;
}

}  // namespace

Subgraph retrieve_subgraph(const KnowledgeGraph& kg, const GroundedStatement& stmt,
                           int max_nodes) {
  if (max_nodes < 1) throw Error("max_nodes must be positive");
  std::set<EntityId> linked;
  for (const auto* group : {&stmt.question_entities, &stmt.answer_entities}) {
    for (const auto& e : *group) {
      if (kg.contains(e)) linked.insert(e);
    }
  }

  std::set<EntityId> candidates = linked;
  std::map<EntityId, std::set<EntityId>> touching;  // mediator -> linked endpoints
  for (const auto& u : linked) {
    for (const auto& m : kg.neighbours(u)) {
      if (!linked.count(m)) touching[m].insert(u);
    }
  }
  for (const auto& [m, ends] : touching) {
    if (ends.size() >= 2) candidates.insert(m);
  }

  std::vector<EntityId> kept(candidates.begin(), candidates.end());
  if (kept.size() > static_cast<std::size_t>(max_nodes)) {
    const auto words = split_words(stmt.full_text());
    std::vector<std::pair<int, EntityId>> ranked;
    ranked.reserve(kept.size());
    for (auto& e : kept) ranked.emplace_back(relevance(e, words), std::move(e));
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    kept.clear();
    for (int i = 0; i < max_nodes; ++i) kept.push_back(std::move(ranked[i].second));
    std::sort(kept.begin(), kept.end());
  }

  Subgraph sub;
  sub.nodes = kept;
  const std::set<EntityId> keep_set(kept.begin(), kept.end());
  std::set<std::size_t> fact_ids;
  for (const auto& n : kept) {
    for (std::size_t idx : kg.incident(n)) {
      const Fact& f = kg.facts()[idx];
      if (keep_set.count(f.head) && keep_set.count(f.tail)) fact_ids.insert(idx);
    }
  }
  for (std::size_t idx : fact_ids) sub.edges.push_back({kg.facts()[idx], Provenance::kg});
  std::sort(sub.edges.begin(), sub.edges.end());
  return sub;
}

Subgraph add_virtual_question_node(Subgraph sub, const GroundedStatement& stmt) {
  if (sub.has_virtual) throw Error("virtual node already present");
  const EntityId q(kVirtualNode);
  for (const auto& e : stmt.question_entities) {
    if (sub.contains_node(e)) {
      sub.edges.push_back({{q, std::string(kEntityRelation), e}, Provenance::virtual_edge});
    }
  }
  for (const auto& e : stmt.answer_entities) {
    if (sub.contains_node(e)) {
      sub.edges.push_back({{q, std::string(kAnswerEntityRelation), e}, Provenance::virtual_edge});
    }
  }
  sub.nodes.push_back(q);
  std::sort(sub.nodes.begin(), sub.nodes.end());
  std::sort(sub.edges.begin(), sub.edges.end());
  sub.has_virtual = true;
  return sub;
}

Subgraph remove_answer_edges(Subgraph sub, const GroundedStatement& stmt) {
  const auto& ans = stmt.answer_entities;
  std::erase_if(sub.edges, [&](const SubgraphEdge& e) {
    return ans.count(e.fact.head) > 0 || ans.count(e.fact.tail) > 0;
  });
  return sub;
}

Subgraph build_subgraph(const KnowledgeGraph& kg, const GroundedStatement& stmt, int max_nodes,
                        bool remove_answers) {
  Subgraph sub = add_virtual_question_node(retrieve_subgraph(kg, stmt, max_nodes), stmt);
  return remove_answers ? remove_answer_edges(std::move(sub), stmt) : sub;
}

}  // namespace sempool
