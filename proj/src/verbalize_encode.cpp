#include "sempool/verbalize_encode.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "sempool/binary_io.hpp"

namespace sempool {

namespace {

constexpr std::string_view kHead = "{h}";
constexpr std::string_view kTail = "{t}";
constexpr char kCacheMagic[] = "SPEMBED1";

std::size_t count_of(std::string_view haystack, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = haystack.find(needle); pos != std::string_view::npos;
       pos = haystack.find(needle, pos + needle.size())) {
    ++n;
  }
  return n;
}

void replace_once(std::string& s, std::string_view what, const std::string& with) {
  const auto pos = s.find(what);
  if (pos != std::string::npos) s.replace(pos, what.size(), with);
}

}  // namespace

TemplateTable::TemplateTable() {
  templates_[std::string(kEntityRelation)] = "question mentions {t}";
  templates_[std::string(kAnswerEntityRelation)] = "question asks about {t}";
}

void TemplateTable::set(const RelationId& relation, std::string templ) {
  if (count_of(templ, kHead) != 1 || count_of(templ, kTail) != 1) {
    throw Error("template for '" + relation + "' must contain {h} and {t} exactly once");
  }
  templates_[relation] = std::move(templ);
}

const std::string& TemplateTable::get(const RelationId& relation) const {
  auto it = templates_.find(relation);
  if (it == templates_.end()) throw Error("no template for relation '" + relation + "'");
  return it->second;
}

void TemplateTable::check_covers(const KnowledgeGraph& kg) const {
  for (const auto& r : kg.relations()) (void)get(r);
}

TemplateTable parse_templates(std::string_view text) {
  TemplateTable table;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw Error("template line " + std::to_string(line_no) + ": expected relation<TAB>template");
    }
    table.set(entity_id_from_surface(line.substr(0, tab)), line.substr(tab + 1));
  }
  return table;
}

TemplateTable load_templates(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open template file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_templates(buf.str());
}

void write_templates(const std::filesystem::path& path, const TemplateTable& table) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write template file " + path.string());
  for (const auto& [rel, templ] : table.all()) {
    if (rel == kEntityRelation || rel == kAnswerEntityRelation) continue;
    out << rel << '\t' << templ << '\n';
  }
}

VerbalizedFact verbalize(const Fact& fact, const TemplateTable& templates) {
  std::string text = templates.get(fact.relation);
  replace_once(text, kHead, surface_of(fact.head));
  replace_once(text, kTail, surface_of(fact.tail));
  return {fact, std::move(text)};
}

TokenPooling parse_token_pooling(std::string_view s) {
  if (s == "mean") return TokenPooling::mean;
  if (s == "cls") return TokenPooling::cls;
  throw Error("unknown token_pooling '" + std::string(s) + "'");
}

EncoderKind parse_encoder_kind(std::string_view s) {
  if (s == "shared-toy-encoder") return EncoderKind::shared_toy;
  if (s == "hash-bag") return EncoderKind::hash_bag;
  if (s == "external-file") return EncoderKind::external_file;
  throw Error("unknown encoder_kind '" + std::string(s) + "'");
}

std::string to_string(TokenPooling p) { return p == TokenPooling::mean ? "mean" : "cls"; }

std::string to_string(EncoderKind k) {
  switch (k) {
    case EncoderKind::shared_toy: return "shared-toy-encoder";
    case EncoderKind::hash_bag: return "hash-bag";
    case EncoderKind::external_file: return "external-file";
  }
  return "?";
}

// ---------------------------------------------------------------------------

const Vector* EmbeddingCache::find(const std::string& key) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? nullptr : &it->second;
}

void EmbeddingCache::insert(const std::string& key, Vector v) {
  if (width_ == 0) width_ = v.size();
  if (v.size() != width_) throw Error("cache entry width mismatch for '" + key + "'");
  entries_[key] = std::move(v);
}

void EmbeddingCache::save(const std::filesystem::path& path) const {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write cache " + tmp);
    out.write(kCacheMagic, 8);
    bin::put_u64(out, static_cast<std::uint64_t>(width_));
    bin::put_u64(out, entries_.size());
    for (const auto& [key, v] : entries_) {
      bin::put_string(out, key);
      bin::put_u64(out, static_cast<std::uint64_t>(v.size()));
      for (Index i = 0; i < v.size(); ++i) bin::put_f64(out, v(i));
    }
  }
  std::filesystem::rename(tmp, path);
}

EmbeddingCache EmbeddingCache::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open cache " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::string_view(magic, 8) != std::string_view(kCacheMagic, 8)) {
    throw Error("not an embedding cache: " + path.string());
  }
  EmbeddingCache cache(static_cast<Index>(bin::get_u64(in)));
  const auto count = bin::get_u64(in);
  for (std::uint64_t r = 0; r < count; ++r) {
    std::string key = bin::get_string(in);
    const auto d = bin::get_u64(in);
    if (static_cast<Index>(d) != cache.width_) throw Error("cache record width mismatch");
    Vector v(static_cast<Index>(d));
    for (Index i = 0; i < v.size(); ++i) v(i) = bin::get_f64(in);
    cache.entries_.emplace(std::move(key), std::move(v));
  }
  return cache;
}

// ---------------------------------------------------------------------------

HashBagEncoder::HashBagEncoder(Index width, std::uint64_t seed) : width_(width), seed_(seed) {
  if (width < 1) throw Error("encoder width must be positive");
}

Vector HashBagEncoder::word_vector(std::string_view word) const {
  Rng rng(fnv1a(word, 0xcbf29ce484222325ULL ^ seed_));
  std::normal_distribution<double> dist(0.0, 1.0);
  Vector v(width_);
  for (Index i = 0; i < width_; ++i) v(i) = dist(rng);
  return v / v.norm();
}

Vector HashBagEncoder::encode_text(std::string_view text) const {
  const auto words = split_words(text);
  Vector acc = Vector::Zero(width_);
  if (words.empty()) return acc;
  for (const auto& w : words) acc += word_vector(w);
  return acc / static_cast<double>(words.size());
}

SnapshotEncoder::SnapshotEncoder(Transformer snapshot, Tokenizer tokenizer, TokenPooling pooling)
    : snapshot_(std::move(snapshot)), tokenizer_(tokenizer), pooling_(pooling) {}

Vector SnapshotEncoder::encode_text(std::string_view text) const {
  std::vector<TokenId> tokens{Tokenizer::kCls};
  for (TokenId id : tokenizer_.encode(text)) {
    if (static_cast<int>(tokens.size()) >= snapshot_.max_tokens()) break;
    tokens.push_back(id);
  }
  Transformer::Cache cache;
  const Matrix out = snapshot_.forward(tokens, nullptr, {}, cache);
  if (pooling_ == TokenPooling::cls || out.rows() == 1) return out.row(0).transpose();
  return out.bottomRows(out.rows() - 1).colwise().mean().transpose();
}

std::string text_cache_key(std::string_view text) { return "text\t" + std::string(text); }

ExternalFileEncoder::ExternalFileEncoder(EmbeddingCache cache) : cache_(std::move(cache)) {}

Vector ExternalFileEncoder::encode_text(std::string_view text) const {
  if (const Vector* v = cache_.find(text_cache_key(text))) return *v;
  throw Error("uncached text: " + std::string(text));
}

Vector ExternalFileEncoder::encode_fact(const VerbalizedFact& vf) const {
  if (const Vector* v = cache_.find(vf.fact.key())) return *v;
  throw Error("uncached fact: " + vf.fact.key());
}

EdgeEmbedding encode_fact(const VerbalizedFact& vf, const TextEncoder& encoder) {
  Vector v = encoder.encode_fact(vf);
  if (!v.allFinite()) throw Error("non-finite embedding for " + vf.fact.key());
  return {vf.fact, std::move(v)};
}

std::vector<EdgeEmbedding> encode_subgraph(const Subgraph& sub, const TemplateTable& templates,
                                           const TextEncoder& encoder, EmbeddingCache* cache) {
  std::vector<EdgeEmbedding> out;
  out.reserve(sub.edges.size());
  for (const auto& edge : sub.edges) {
    const std::string key = edge.fact.key();
    if (cache) {
      if (const Vector* hit = cache->find(key)) {
        out.push_back({edge.fact, *hit});
        continue;
      }
    }
    auto emb = encode_fact(verbalize(edge.fact, templates), encoder);
    if (cache) cache->insert(key, emb.vector);
    out.push_back(std::move(emb));
  }
  return out;
}

Matrix stack_embeddings(const std::vector<EdgeEmbedding>& embeddings, Index width) {
  Matrix m(static_cast<Index>(embeddings.size()), width);
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (embeddings[i].vector.size() != width) throw Error("edge embedding width mismatch");
    m.row(static_cast<Index>(i)) = embeddings[i].vector.transpose();
  }
  return m;
}

}  // namespace sempool
