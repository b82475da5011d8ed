#include "sempool/tokenizer.hpp"

#include <string>

#include "sempool/error.hpp"
#include "sempool/kg_store.hpp"

namespace sempool {

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Tokenizer::Tokenizer(int buckets) : buckets_(buckets) {
  if (buckets < 1) throw Error("tokenizer needs at least one bucket");
}

TokenId Tokenizer::word_id(std::string_view word) const {
  return kReserved + static_cast<TokenId>(fnv1a(word) % static_cast<std::uint64_t>(buckets_));
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& w : split_words(text)) ids.push_back(word_id(w));
  return ids;
}

std::vector<TokenId> tokenize_statement(std::string_view context, std::string_view question,
                                        std::string_view candidate, const Tokenizer& tokenizer,
                                        int max_tokens) {
  auto c = tokenizer.encode(context);
  const auto q = tokenizer.encode(question);
  auto a = tokenizer.encode(candidate);
  if (q.empty()) throw Error("question has no tokens");
  const std::size_t fixed = 4 + q.size();
  if (fixed > static_cast<std::size_t>(max_tokens)) {
    throw Error("question alone needs " + std::to_string(fixed) + " tokens, limit is " +
                std::to_string(max_tokens));
  }
  std::size_t budget = static_cast<std::size_t>(max_tokens) - fixed;
  if (a.size() > budget) a.resize(budget);
  budget -= a.size();
  if (c.size() > budget) c.erase(c.begin(), c.end() - static_cast<long>(budget));

  std::vector<TokenId> out;
  out.reserve(fixed + c.size() + a.size());
  out.push_back(Tokenizer::kGraph);
  out.push_back(Tokenizer::kCls);
  out.insert(out.end(), c.begin(), c.end());
  out.push_back(Tokenizer::kSep);
  out.insert(out.end(), q.begin(), q.end());
  out.push_back(Tokenizer::kSep);
  out.insert(out.end(), a.begin(), a.end());
  return out;
}

}  // namespace sempool
