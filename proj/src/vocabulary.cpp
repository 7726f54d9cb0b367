#include "symkfcv/vocabulary.hpp"

#include <charconv>
#include <map>
#include <mutex>

namespace symkfcv {

namespace {

constexpr Op kOperatorTokens[] = {Op::Add, Op::Sub, Op::Mul, Op::Div, Op::Pow, Op::Neg,
                                  Op::Sin, Op::Cos, Op::Log, Op::Exp};

}  // namespace

const Vocabulary& Vocabulary::standard(int variable_count) {
  static std::mutex mutex;
  static std::map<int, Vocabulary> cache;
  std::lock_guard lock(mutex);
  if (auto it = cache.find(variable_count); it != cache.end()) return it->second;
  std::vector<std::string> tokens{"<pad>", "<s>", "</s>"};
  for (Op op : kOperatorTokens) tokens.emplace_back(op_name(op));
  for (int v = 1; v <= variable_count; ++v) tokens.push_back("x" + std::to_string(v));
  tokens.emplace_back("C");
  for (int e = kMinLiteralExponent; e <= kMaxLiteralExponent; ++e) tokens.push_back(std::to_string(e));
  return cache.emplace(variable_count, Vocabulary(std::move(tokens))).first->second;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw std::invalid_argument("duplicate token '" + tokens_[i] + "'");
    }
  }
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw TokenError(TokenError::Kind::UnknownId, "token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) {
    throw TokenError(TokenError::Kind::UnknownToken, "token '" + std::string(token) + "' not in vocabulary");
  }
  return it->second;
}

namespace {

void emit(const Node& n, const Vocabulary& vocab, std::vector<int>& out) {
  switch (n.op) {
    case Op::Variable:
      out.push_back(vocab.id("x" + std::to_string(n.index + 1)));
      return;
    case Op::Placeholder:
      out.push_back(vocab.id("C"));
      return;
    case Op::Constant:
      // Only literal exponents reach here; Skeleton rejects other constants.
      out.push_back(vocab.id(std::to_string(static_cast<int>(n.value))));
      return;
    default:
      out.push_back(vocab.id(op_name(n.op)));
      emit(*n.lhs, vocab, out);
      if (n.rhs) emit(*n.rhs, vocab, out);
  }
}

class PrefixReader {
 public:
  PrefixReader(std::span<const int> ids, const Vocabulary& vocab) : ids_(ids), vocab_(vocab) {
    for (Op op : kOperatorTokens) ops_.emplace(std::string(op_name(op)), op);
  }

  NodePtr read() {
    if (pos_ >= ids_.size()) {
      throw TokenError(TokenError::Kind::Truncated,
                       "token sequence ends before operator arity is satisfied (after " +
                           std::to_string(ids_.size()) + " tokens)");
    }
    const int id = ids_[pos_++];
    if (id == Vocabulary::kPad || id == Vocabulary::kStart || id == Vocabulary::kEnd) {
      throw TokenError(TokenError::Kind::UnknownId,
                       "marker token id " + std::to_string(id) + " inside skeleton at " + std::to_string(pos_ - 1));
    }
    const std::string& tok = vocab_.token(id);
    if (auto it = ops_.find(tok); it != ops_.end()) {
      NodePtr lhs = read();
      if (arity(it->second) == 1) return make_unary(it->second, lhs);
      return make_binary(it->second, lhs, read());
    }
    if (tok == "C") return make_placeholder(next_placeholder_++);
    if (tok.size() >= 2 && tok[0] == 'x') return make_variable(std::stoi(tok.substr(1)) - 1);
    int literal = 0;
    const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), literal);
    if (ec == std::errc{} && ptr == tok.data() + tok.size()) return make_constant(literal);
    throw TokenError(TokenError::Kind::UnknownId, "token '" + tok + "' has no skeleton meaning");
  }

  std::size_t position() const { return pos_; }

 private:
  std::span<const int> ids_;
  const Vocabulary& vocab_;
  std::map<std::string, Op> ops_;
  std::size_t pos_ = 0;
  int next_placeholder_ = 0;
};

}  // namespace

std::vector<int> tokenize(const Skeleton& skeleton, const Vocabulary& vocab) {
  std::vector<int> out;
  emit(skeleton.root(), vocab, out);
  return out;
}

Skeleton detokenize(std::span<const int> ids, const Vocabulary& vocab, int variable_count) {
  if (ids.empty()) throw TokenError(TokenError::Kind::Empty, "empty token sequence");
  PrefixReader reader(ids, vocab);
  NodePtr root = reader.read();
  if (reader.position() != ids.size()) {
    throw TokenError(TokenError::Kind::Trailing, "trailing tokens after complete skeleton at position " +
                                                     std::to_string(reader.position()));
  }
  try {
    return Skeleton(std::move(root), variable_count);
  } catch (const InvalidExpressionError& e) {
    // e.g. a literal exponent token outside a pow exponent slot
    throw TokenError(TokenError::Kind::UnknownId, std::string("ill-formed skeleton: ") + e.what());
  }
}

}  // namespace symkfcv
