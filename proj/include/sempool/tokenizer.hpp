#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace sempool {

using TokenId = int;

/// Lowercasing word splitter over a hashed vocabulary. Reserved ids sit below
/// the hash buckets so they can never collide with a word.
class Tokenizer {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kGraph = 1;
  static constexpr TokenId kCls = 2;
  static constexpr TokenId kSep = 3;
  static constexpr TokenId kReserved = 4;

  explicit Tokenizer(int buckets = 8192);

  int buckets() const { return buckets_; }
  int vocab_size() const { return kReserved + buckets_; }

  TokenId word_id(std::string_view word) const;
  std::vector<TokenId> encode(std::string_view text) const;

 private:
  int buckets_;
};

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

/// [GRAPH][CLS] context [SEP] question [SEP] candidate, at most max_tokens long.
/// Context is dropped from its front first, then the candidate from its back;
/// throws if the question plus the four markers does not fit.
std::vector<TokenId> tokenize_statement(std::string_view context, std::string_view question,
                                        std::string_view candidate, const Tokenizer& tokenizer,
                                        int max_tokens);

}  // namespace sempool
