#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "sempool/kg_store.hpp"
#include "sempool/nn.hpp"
#include "sempool/tokenizer.hpp"

namespace sempool {

/// Relation -> "{h} ... {t}" template. The two virtual relations are always present.
class TemplateTable {
 public:
  TemplateTable();

  void set(const RelationId& relation, std::string templ);
  bool has(const RelationId& relation) const { return templates_.count(relation) > 0; }
  const std::string& get(const RelationId& relation) const;
  const std::map<RelationId, std::string>& all() const { return templates_; }

  /// Throws naming the first KG relation without a template.
  void check_covers(const KnowledgeGraph& kg) const;

 private:
  std::map<RelationId, std::string> templates_;
};

TemplateTable parse_templates(std::string_view text);
TemplateTable load_templates(const std::filesystem::path& path);
void write_templates(const std::filesystem::path& path, const TemplateTable& table);

struct VerbalizedFact {
  Fact fact;
  std::string text;
};

VerbalizedFact verbalize(const Fact& fact, const TemplateTable& templates);

struct EdgeEmbedding {
  Fact fact;
  Vector vector;
};

enum class TokenPooling { cls, mean };
enum class EncoderKind { shared_toy, hash_bag, external_file };

TokenPooling parse_token_pooling(std::string_view s);
EncoderKind parse_encoder_kind(std::string_view s);
std::string to_string(TokenPooling p);
std::string to_string(EncoderKind k);

/// Fact-key -> vector store with a little-endian binary file form.
class EmbeddingCache {
 public:
  explicit EmbeddingCache(Index width = 0) : width_(width) {}

  Index width() const { return width_; }
  std::size_t size() const { return entries_.size(); }
  const Vector* find(const std::string& key) const;
  void insert(const std::string& key, Vector v);

  void save(const std::filesystem::path& path) const;
  static EmbeddingCache load(const std::filesystem::path& path);

  const std::map<std::string, Vector>& entries() const { return entries_; }

 private:
  Index width_;
  std::map<std::string, Vector> entries_;
};

/// Text -> vector. Implementations are immutable after construction.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual Index width() const = 0;
  virtual EncoderKind kind() const = 0;
  virtual Vector encode_text(std::string_view text) const = 0;
  virtual Vector encode_fact(const VerbalizedFact& vf) const { return encode_text(vf.text); }
};

/// Each word maps to a seeded pseudo-random unit vector; text is their mean.
class HashBagEncoder final : public TextEncoder {
 public:
  HashBagEncoder(Index width, std::uint64_t seed);
  Index width() const override { return width_; }
  EncoderKind kind() const override { return EncoderKind::hash_bag; }
  Vector word_vector(std::string_view word) const;
  Vector encode_text(std::string_view text) const override;

 private:
  Index width_;
  std::uint64_t seed_;
};

/// Runs a frozen transformer over "[CLS] text" and pools its final states.
class SnapshotEncoder final : public TextEncoder {
 public:
  SnapshotEncoder(Transformer snapshot, Tokenizer tokenizer, TokenPooling pooling);
  Index width() const override { return snapshot_.width(); }
  EncoderKind kind() const override { return EncoderKind::shared_toy; }
  Vector encode_text(std::string_view text) const override;
  const Transformer& snapshot() const { return snapshot_; }

 private:
  Transformer snapshot_;
  Tokenizer tokenizer_;
  TokenPooling pooling_;
};

/// Serves only what an embedding cache file holds. Fact lookups use
/// Fact::key(); free text uses "text\t" + text.
class ExternalFileEncoder final : public TextEncoder {
 public:
  explicit ExternalFileEncoder(EmbeddingCache cache);
  Index width() const override { return cache_.width(); }
  EncoderKind kind() const override { return EncoderKind::external_file; }
  Vector encode_text(std::string_view text) const override;
  Vector encode_fact(const VerbalizedFact& vf) const override;

 private:
  EmbeddingCache cache_;
};

std::string text_cache_key(std::string_view text);

EdgeEmbedding encode_fact(const VerbalizedFact& vf, const TextEncoder& encoder);

/// One embedding per edge in canonical order. Cache hits skip the encoder;
/// misses are encoded and inserted.
std::vector<EdgeEmbedding> encode_subgraph(const Subgraph& sub, const TemplateTable& templates,
                                           const TextEncoder& encoder,
                                           EmbeddingCache* cache = nullptr);

/// Stacks embeddings into rows (E x d).
Matrix stack_embeddings(const std::vector<EdgeEmbedding>& embeddings, Index width);

}  // namespace sempool
