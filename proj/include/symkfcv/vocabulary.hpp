#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "symkfcv/expression.hpp"

namespace symkfcv {

class TokenError : public std::runtime_error {
 public:
  enum class Kind { Empty, Truncated, Trailing, UnknownId, UnknownToken };
  TokenError(Kind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Dense token <-> id map for prefix-notation skeletons. Ids 0..2 are the pad,
/// start and end markers.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kStart = 1;
  static constexpr int kEnd = 2;

  /// Standard vocabulary: markers, operators, x1..xN, C, literal exponents.
  static const Vocabulary& standard(int variable_count = 1);

  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(int id) const;
  int id(std::string_view token) const;
  bool contains(std::string_view token) const { return index_.contains(std::string(token)); }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Prefix (Polish) serialization; never emits markers.
std::vector<int> tokenize(const Skeleton& skeleton, const Vocabulary& vocab = Vocabulary::standard());

/// Inverse of tokenize. Rejects empty, truncated and over-long sequences and
/// ids that are markers or outside the vocabulary.
Skeleton detokenize(std::span<const int> ids, const Vocabulary& vocab = Vocabulary::standard(),
                    int variable_count = 1);

}  // namespace symkfcv
