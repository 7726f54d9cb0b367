#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace symkfcv {

/// Node kinds of the equation AST. Placeholder only appears in skeletons.
enum class Op : std::uint8_t {
  Constant,
  Variable,
  Placeholder,
  Sin,
  Cos,
  Log,
  Exp,
  Neg,
  Add,
  Sub,
  Mul,
  Div,
  Pow,
};

int arity(Op op);
std::string_view op_name(Op op);

struct Node;
using NodePtr = std::shared_ptr<const Node>;

/// Immutable AST node. Unary nodes keep their child in `lhs`.
struct Node {
  Op op = Op::Constant;
  double value = 0.0;  // Constant
  int index = 0;       // Variable index or Placeholder ordinal
  NodePtr lhs;
  NodePtr rhs;
};

NodePtr make_constant(double value);
NodePtr make_variable(int index);
NodePtr make_placeholder(int ordinal);
NodePtr make_unary(Op op, NodePtr child);
NodePtr make_binary(Op op, NodePtr lhs, NodePtr rhs);

/// Number of levels; a single leaf has depth 1.
int depth(const Node& node);
std::size_t node_count(const Node& node);

/// Exact structural equality, including bitwise constant equality.
bool same_structure(const Node& a, const Node& b);

/// Pow exponents that stay literal in a skeleton: the integers the generator
/// emits for `^`. They get their own vocabulary tokens instead of a `C`.
inline constexpr int kMinLiteralExponent = 2;
inline constexpr int kMaxLiteralExponent = 4;
bool is_literal_exponent(const Node& pow_node);

class InvalidExpressionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A constant-bearing equation over `variable_count` input variables.
class Expression {
 public:
  /// Throws InvalidExpressionError if the tree holds placeholders, non-finite
  /// constants, malformed arity, or out-of-range variables.
  explicit Expression(NodePtr root, int variable_count = 1);

  const Node& root() const { return *root_; }
  const NodePtr& root_ptr() const { return root_; }
  int variable_count() const { return variable_count_; }

  friend bool operator==(const Expression& a, const Expression& b) {
    return same_structure(*a.root_, *b.root_);
  }

 private:
  NodePtr root_;
  int variable_count_;
};

/// An equation whose free constants are placeholders numbered 0..n-1 in
/// depth-first, left-to-right order. Literal pow exponents may remain.
class Skeleton {
 public:
  explicit Skeleton(NodePtr root, int variable_count = 1);

  const Node& root() const { return *root_; }
  const NodePtr& root_ptr() const { return root_; }
  int variable_count() const { return variable_count_; }
  int placeholder_count() const { return placeholder_count_; }

  friend bool operator==(const Skeleton& a, const Skeleton& b) {
    return same_structure(*a.root_, *b.root_);
  }

 private:
  NodePtr root_;
  int variable_count_;
  int placeholder_count_ = 0;
};

// ---------------------------------------------------------------------------
// Text form

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& message, std::size_t position);
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

class UnknownIdentifierError : public ParseError {
 public:
  UnknownIdentifierError(const std::string& identifier, std::size_t position);
  const std::string& identifier() const { return identifier_; }

 private:
  std::string identifier_;
};

/// Infix grammar: + - * / ^, sin cos log exp, decimal literals, x1..xN,
/// parentheses. ^ binds tighter than unary minus, which binds tighter than * /.
/// A minus sign directly before a literal (not followed by ^) yields a
/// negative constant.
Expression parse(std::string_view text, int variable_count = 1);

/// Same grammar, plus the placeholder symbol `C`. Numeric literals are only
/// accepted as literal pow exponents.
Skeleton parse_skeleton(std::string_view text, int variable_count = 1);

/// Canonical text; constants use the shortest decimal that round-trips.
std::string print(const Node& node);
inline std::string print(const Expression& e) { return print(e.root()); }
inline std::string print(const Skeleton& s) { return print(s.root()); }

// ---------------------------------------------------------------------------
// Evaluation

/// Value of an evaluation, or the kind of the innermost node whose result was
/// not finite (log of non-positive, division by zero, 0^negative, overflow...).
struct EvalResult {
  double value = 0.0;
  std::optional<Op> fault;

  bool ok() const { return !fault.has_value(); }
};

EvalResult evaluate(const Expression& expr, std::span<const double> x);

/// Evaluates a skeleton with placeholder i bound to constants[i].
EvalResult evaluate(const Skeleton& skeleton, std::span<const double> constants,
                    std::span<const double> x);

// ---------------------------------------------------------------------------
// Skeletons

class ArityMismatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Skeletonized {
  Skeleton skeleton;
  std::vector<double> constants;
};

Skeletonized skeletonize(const Expression& expr);

/// Throws ArityMismatchError when constants.size() != placeholder_count().
Expression substitute(const Skeleton& skeleton, std::span<const double> constants);

}  // namespace symkfcv
