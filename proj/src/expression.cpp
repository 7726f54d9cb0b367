#include "symkfcv/expression.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <charconv>
#include <cmath>
#include <system_error>

namespace symkfcv {

int arity(Op op) {
  switch (op) {
    case Op::Constant:
    case Op::Variable:
    case Op::Placeholder:
      return 0;
    case Op::Sin:
    case Op::Cos:
    case Op::Log:
    case Op::Exp:
    case Op::Neg:
      return 1;
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div:
    case Op::Pow:
      return 2;
  }
  return 0;
}

std::string_view op_name(Op op) {
  switch (op) {
    case Op::Constant: return "constant";
    case Op::Variable: return "variable";
    case Op::Placeholder: return "placeholder";
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Log: return "log";
    case Op::Exp: return "exp";
    case Op::Neg: return "neg";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Pow: return "pow";
  }
  return "?";
}

NodePtr make_constant(double value) {
  auto n = std::make_shared<Node>();
  n->op = Op::Constant;
  n->value = value;
  return n;
}

NodePtr make_variable(int index) {
  auto n = std::make_shared<Node>();
  n->op = Op::Variable;
  n->index = index;
  return n;
}

NodePtr make_placeholder(int ordinal) {
  auto n = std::make_shared<Node>();
  n->op = Op::Placeholder;
  n->index = ordinal;
  return n;
}

NodePtr make_unary(Op op, NodePtr child) {
  if (arity(op) != 1) throw InvalidExpressionError(std::string(op_name(op)) + " is not unary");
  auto n = std::make_shared<Node>();
  n->op = op;
  n->lhs = std::move(child);
  return n;
}

NodePtr make_binary(Op op, NodePtr lhs, NodePtr rhs) {
  if (arity(op) != 2) throw InvalidExpressionError(std::string(op_name(op)) + " is not binary");
  auto n = std::make_shared<Node>();
  n->op = op;
  n->lhs = std::move(lhs);
  n->rhs = std::move(rhs);
  return n;
}

int depth(const Node& node) {
  switch (arity(node.op)) {
    case 0: return 1;
    case 1: return 1 + depth(*node.lhs);
    default: return 1 + std::max(depth(*node.lhs), depth(*node.rhs));
  }
}

std::size_t node_count(const Node& node) {
  std::size_t n = 1;
  if (node.lhs) n += node_count(*node.lhs);
  if (node.rhs) n += node_count(*node.rhs);
  return n;
}

bool same_structure(const Node& a, const Node& b) {
  if (a.op != b.op) return false;
  switch (a.op) {
    case Op::Constant:
      return std::bit_cast<std::uint64_t>(a.value) == std::bit_cast<std::uint64_t>(b.value);
    case Op::Variable:
    case Op::Placeholder:
      return a.index == b.index;
    default:
      break;
  }
  if (!same_structure(*a.lhs, *b.lhs)) return false;
  return arity(a.op) == 1 || same_structure(*a.rhs, *b.rhs);
}

bool is_literal_exponent(const Node& pow_node) {
  if (pow_node.op != Op::Pow || !pow_node.rhs || pow_node.rhs->op != Op::Constant) return false;
  const double v = pow_node.rhs->value;
  return v == std::floor(v) && v >= kMinLiteralExponent && v <= kMaxLiteralExponent;
}

namespace {

void check_shape(const Node& node, int variable_count, bool allow_placeholders) {
  const int a = arity(node.op);
  if ((a >= 1) != static_cast<bool>(node.lhs) || (a == 2) != static_cast<bool>(node.rhs)) {
    throw InvalidExpressionError("node " + std::string(op_name(node.op)) + " has wrong child count");
  }
  switch (node.op) {
    case Op::Constant:
      if (!std::isfinite(node.value)) throw InvalidExpressionError("non-finite constant");
      return;
    case Op::Variable:
      if (node.index < 0 || node.index >= variable_count) {
        throw InvalidExpressionError("variable index " + std::to_string(node.index) + " out of range");
      }
      return;
    case Op::Placeholder:
      if (!allow_placeholders) throw InvalidExpressionError("placeholder in a concrete expression");
      return;
    default:
      break;
  }
  check_shape(*node.lhs, variable_count, allow_placeholders);
  if (a == 2) check_shape(*node.rhs, variable_count, allow_placeholders);
}

// Walks a skeleton in depth-first order checking placeholder numbering and
// that every constant is a literal pow exponent.
void check_skeleton(const Node& node, int& next_ordinal) {
  switch (node.op) {
    case Op::Constant:
      throw InvalidExpressionError("skeleton contains a free constant");
    case Op::Placeholder:
      if (node.index != next_ordinal) {
        throw InvalidExpressionError("placeholder ordinal " + std::to_string(node.index) + ", expected " +
                                     std::to_string(next_ordinal));
      }
      ++next_ordinal;
      return;
    case Op::Variable:
      return;
    default:
      break;
  }
  check_skeleton(*node.lhs, next_ordinal);
  if (node.op == Op::Pow && is_literal_exponent(node)) return;
  if (arity(node.op) == 2) check_skeleton(*node.rhs, next_ordinal);
}

}  // namespace

Expression::Expression(NodePtr root, int variable_count)
    : root_(std::move(root)), variable_count_(variable_count) {
  if (!root_) throw InvalidExpressionError("empty expression");
  if (variable_count_ < 1) throw InvalidExpressionError("variable count must be positive");
  check_shape(*root_, variable_count_, false);
}

Skeleton::Skeleton(NodePtr root, int variable_count)
    : root_(std::move(root)), variable_count_(variable_count) {
  if (!root_) throw InvalidExpressionError("empty skeleton");
  if (variable_count_ < 1) throw InvalidExpressionError("variable count must be positive");
  check_shape(*root_, variable_count_, true);
  check_skeleton(*root_, placeholder_count_);
}

// ---------------------------------------------------------------------------
// Parsing

ParseError::ParseError(const std::string& message, std::size_t position)
    : std::runtime_error(message + " at position " + std::to_string(position)), position_(position) {}

UnknownIdentifierError::UnknownIdentifierError(const std::string& identifier, std::size_t position)
    : ParseError("unknown identifier '" + identifier + "'", position), identifier_(identifier) {}

namespace {

enum class Tok { Number, Ident, Plus, Minus, Star, Slash, Caret, LParen, RParen, End };

struct Token {
  Tok kind = Tok::End;
  std::size_t pos = 0;
  std::string_view text;
  double number = 0.0;
};

std::vector<Token> lex(std::string_view s) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const char c = s[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    Token t;
    t.pos = i;
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      std::size_t j = i;
      while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) ++j;
      if (j < s.size() && s[j] == '.') {
        ++j;
        while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) ++j;
      }
      if (j < s.size() && (s[j] == 'e' || s[j] == 'E')) {
        std::size_t k = j + 1;
        if (k < s.size() && (s[k] == '+' || s[k] == '-')) ++k;
        if (k < s.size() && std::isdigit(static_cast<unsigned char>(s[k]))) {
          while (k < s.size() && std::isdigit(static_cast<unsigned char>(s[k]))) ++k;
          j = k;
        } else {
          throw ParseError("malformed exponent in numeric literal", j);
        }
      }
      t.kind = Tok::Number;
      t.text = s.substr(i, j - i);
      const auto [ptr, ec] = std::from_chars(t.text.data(), t.text.data() + t.text.size(), t.number);
      if (ec != std::errc{} || ptr != t.text.data() + t.text.size() || !std::isfinite(t.number)) {
        throw ParseError("malformed numeric literal '" + std::string(t.text) + "'", i);
      }
      out.push_back(t);
      i = j;
      continue;
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = i;
      while (j < s.size() && (std::isalnum(static_cast<unsigned char>(s[j])) || s[j] == '_')) ++j;
      t.kind = Tok::Ident;
      t.text = s.substr(i, j - i);
      out.push_back(t);
      i = j;
      continue;
    }
    switch (c) {
      case '+': t.kind = Tok::Plus; break;
      case '-': t.kind = Tok::Minus; break;
      case '*': t.kind = Tok::Star; break;
      case '/': t.kind = Tok::Slash; break;
      case '^': t.kind = Tok::Caret; break;
      case '(': t.kind = Tok::LParen; break;
      case ')': t.kind = Tok::RParen; break;
      default:
        throw ParseError(std::string("unexpected character '") + c + "'", i);
    }
    t.text = s.substr(i, 1);
    out.push_back(t);
    ++i;
  }
  Token end;
  end.kind = Tok::End;
  end.pos = s.size();
  out.push_back(end);
  return out;
}

class Parser {
 public:
  Parser(std::string_view text, int variable_count, bool placeholders)
      : tokens_(lex(text)), variable_count_(variable_count), placeholders_(placeholders) {}

  NodePtr parse_all() {
    if (peek().kind == Tok::End) throw ParseError("empty equation", 0);
    NodePtr root = expr();
    if (peek().kind != Tok::End) throw ParseError("unexpected '" + std::string(peek().text) + "'", peek().pos);
    return root;
  }

 private:
  const Token& peek(std::size_t ahead = 0) const {
    return tokens_[std::min(pos_ + ahead, tokens_.size() - 1)];
  }
  const Token& take() { return tokens_[pos_++]; }

  void expect(Tok kind, const char* what) {
    if (peek().kind != kind) {
      throw ParseError(std::string("expected ") + what, peek().pos);
    }
    ++pos_;
  }

  NodePtr expr() {
    NodePtr lhs = term();
    while (peek().kind == Tok::Plus || peek().kind == Tok::Minus) {
      const Op op = take().kind == Tok::Plus ? Op::Add : Op::Sub;
      lhs = make_binary(op, lhs, term());
    }
    return lhs;
  }

  NodePtr term() {
    NodePtr lhs = unary();
    while (peek().kind == Tok::Star || peek().kind == Tok::Slash) {
      const Op op = take().kind == Tok::Star ? Op::Mul : Op::Div;
      lhs = make_binary(op, lhs, unary());
    }
    return lhs;
  }

  NodePtr unary() {
    if (peek().kind != Tok::Minus) return power();
    take();
    if (peek().kind == Tok::Number && peek(1).kind != Tok::Caret) {
      return make_constant(-take().number);
    }
    return make_unary(Op::Neg, unary());
  }

  NodePtr power() {
    NodePtr base = primary();
    if (peek().kind == Tok::Caret) {
      take();
      return make_binary(Op::Pow, base, unary());
    }
    return base;
  }

  NodePtr primary() {
    const Token& t = peek();
    switch (t.kind) {
      case Tok::Number:
        take();
        return make_constant(t.number);
      case Tok::LParen: {
        take();
        NodePtr inner = expr();
        expect(Tok::RParen, "')'");
        return inner;
      }
      case Tok::Ident:
        return identifier();
      case Tok::End:
        throw ParseError("unexpected end of equation", t.pos);
      default:
        throw ParseError("unexpected '" + std::string(t.text) + "'", t.pos);
    }
  }

  NodePtr identifier() {
    const Token t = take();
    static constexpr std::array<std::pair<std::string_view, Op>, 4> functions{{
        {"sin", Op::Sin}, {"cos", Op::Cos}, {"log", Op::Log}, {"exp", Op::Exp}}};
    for (const auto& [name, op] : functions) {
      if (t.text == name) {
        expect(Tok::LParen, "'(' after function name");
        NodePtr arg = expr();
        expect(Tok::RParen, "')'");
        return make_unary(op, arg);
      }
    }
    if (placeholders_ && t.text == "C") return make_placeholder(next_placeholder_++);
    if (t.text.size() >= 2 && t.text[0] == 'x' && t.text[1] != '0') {
      int n = 0;
      const auto [ptr, ec] = std::from_chars(t.text.data() + 1, t.text.data() + t.text.size(), n);
      if (ec == std::errc{} && ptr == t.text.data() + t.text.size() && n >= 1 && n <= variable_count_) {
        return make_variable(n - 1);
      }
    }
    throw UnknownIdentifierError(std::string(t.text), t.pos);
  }

  std::vector<Token> tokens_;
  std::size_t pos_ = 0;
  int variable_count_;
  bool placeholders_;
  int next_placeholder_ = 0;
};

}  // namespace

Expression parse(std::string_view text, int variable_count) {
  return Expression(Parser(text, variable_count, false).parse_all(), variable_count);
}

Skeleton parse_skeleton(std::string_view text, int variable_count) {
  return Skeleton(Parser(text, variable_count, true).parse_all(), variable_count);
}

// ---------------------------------------------------------------------------
// Printing

namespace {

constexpr int kPrecAdd = 1;
constexpr int kPrecMul = 2;
constexpr int kPrecNeg = 3;
constexpr int kPrecPow = 4;
constexpr int kPrecAtom = 5;

int precedence(const Node& n) {
  switch (n.op) {
    case Op::Add:
    case Op::Sub:
      return kPrecAdd;
    case Op::Mul:
    case Op::Div:
      return kPrecMul;
    case Op::Neg:
      return kPrecNeg;
    case Op::Pow:
      return kPrecPow;
    case Op::Constant:
      return std::signbit(n.value) ? kPrecNeg : kPrecAtom;
    default:
      return kPrecAtom;
  }
}

std::string format_number(double v) {
  std::array<char, 64> buf{};
  const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  (void)ec;
  return std::string(buf.data(), ptr);
}

std::string render(const Node& n);

// Operands that would start with '-' in a non-leading position are wrapped so
// the text never contains sequences like "x1--2".
std::string operand(const Node& child, int min_prec, bool leading) {
  std::string s = render(child);
  if (precedence(child) < min_prec || (!leading && !s.empty() && s.front() == '-')) {
    return "(" + s + ")";
  }
  return s;
}

std::string render(const Node& n) {
  switch (n.op) {
    case Op::Constant:
      return format_number(n.value);
    case Op::Variable:
      return "x" + std::to_string(n.index + 1);
    case Op::Placeholder:
      return "C";
    case Op::Sin:
    case Op::Cos:
    case Op::Log:
    case Op::Exp:
      return std::string(op_name(n.op)) + "(" + render(*n.lhs) + ")";
    case Op::Neg: {
      // A bare literal after '-' would re-parse as a negative constant.
      if (n.lhs->op == Op::Constant) return "-(" + render(*n.lhs) + ")";
      return "-" + operand(*n.lhs, kPrecNeg, false);
    }
    case Op::Add:
      return operand(*n.lhs, kPrecAdd, true) + "+" + operand(*n.rhs, kPrecAdd + 1, false);
    case Op::Sub:
      return operand(*n.lhs, kPrecAdd, true) + "-" + operand(*n.rhs, kPrecAdd + 1, false);
    case Op::Mul:
      return operand(*n.lhs, kPrecMul, true) + "*" + operand(*n.rhs, kPrecMul + 1, false);
    case Op::Div:
      return operand(*n.lhs, kPrecMul, true) + "/" + operand(*n.rhs, kPrecMul + 1, false);
    case Op::Pow:
      return operand(*n.lhs, kPrecAtom, true) + "^" + operand(*n.rhs, kPrecPow, false);
  }
  return {};
}

}  // namespace

std::string print(const Node& node) { return render(node); }

// ---------------------------------------------------------------------------
// Evaluation

namespace {

struct Evaluator {
  std::span<const double> constants;
  std::span<const double> x;
  std::optional<Op> fault;

  double run(const Node& n) {
    double v = 0.0;
    switch (n.op) {
      case Op::Constant:
        return n.value;
      case Op::Variable:
        return x[static_cast<std::size_t>(n.index)];
      case Op::Placeholder:
        return constants[static_cast<std::size_t>(n.index)];
      case Op::Sin: v = std::sin(run(*n.lhs)); break;
      case Op::Cos: v = std::cos(run(*n.lhs)); break;
      case Op::Log: v = std::log(run(*n.lhs)); break;
      case Op::Exp: v = std::exp(run(*n.lhs)); break;
      case Op::Neg: v = -run(*n.lhs); break;
      case Op::Add: { const double a = run(*n.lhs); v = a + run(*n.rhs); break; }
      case Op::Sub: { const double a = run(*n.lhs); v = a - run(*n.rhs); break; }
      case Op::Mul: { const double a = run(*n.lhs); v = a * run(*n.rhs); break; }
      case Op::Div: { const double a = run(*n.lhs); v = a / run(*n.rhs); break; }
      case Op::Pow: { const double a = run(*n.lhs); v = std::pow(a, run(*n.rhs)); break; }
    }
    if (!fault && !std::isfinite(v)) fault = n.op;
    return v;
  }
};

std::size_t max_variable(const Node& n) {
  std::size_t m = n.op == Op::Variable ? static_cast<std::size_t>(n.index) + 1 : 0;
  if (n.lhs) m = std::max(m, max_variable(*n.lhs));
  if (n.rhs) m = std::max(m, max_variable(*n.rhs));
  return m;
}

}  // namespace

EvalResult evaluate(const Expression& expr, std::span<const double> x) {
  if (x.size() < max_variable(expr.root())) {
    throw std::out_of_range("input vector shorter than the expression's variables");
  }
  Evaluator ev{{}, x, std::nullopt};
  const double v = ev.run(expr.root());
  return {v, ev.fault};
}

EvalResult evaluate(const Skeleton& skeleton, std::span<const double> constants, std::span<const double> x) {
  if (constants.size() != static_cast<std::size_t>(skeleton.placeholder_count())) {
    throw ArityMismatchError("skeleton has " + std::to_string(skeleton.placeholder_count()) +
                             " placeholders, got " + std::to_string(constants.size()) + " constants");
  }
  if (x.size() < max_variable(skeleton.root())) {
    throw std::out_of_range("input vector shorter than the skeleton's variables");
  }
  Evaluator ev{constants, x, std::nullopt};
  const double v = ev.run(skeleton.root());
  return {v, ev.fault};
}

// ---------------------------------------------------------------------------
// Skeletons

namespace {

NodePtr abstract_constants(const NodePtr& n, std::vector<double>& constants) {
  switch (n->op) {
    case Op::Constant:
      constants.push_back(n->value);
      return make_placeholder(static_cast<int>(constants.size()) - 1);
    case Op::Variable:
    case Op::Placeholder:
      return n;
    default:
      break;
  }
  NodePtr lhs = abstract_constants(n->lhs, constants);
  if (arity(n->op) == 1) return make_unary(n->op, lhs);
  NodePtr rhs = is_literal_exponent(*n) ? n->rhs : abstract_constants(n->rhs, constants);
  return make_binary(n->op, lhs, rhs);
}

NodePtr fill_placeholders(const NodePtr& n, std::span<const double> constants) {
  switch (n->op) {
    case Op::Placeholder:
      return make_constant(constants[static_cast<std::size_t>(n->index)]);
    case Op::Constant:
    case Op::Variable:
      return n;
    default:
      break;
  }
  NodePtr lhs = fill_placeholders(n->lhs, constants);
  if (arity(n->op) == 1) return make_unary(n->op, lhs);
  return make_binary(n->op, lhs, fill_placeholders(n->rhs, constants));
}

}  // namespace

Skeletonized skeletonize(const Expression& expr) {
  std::vector<double> constants;
  NodePtr root = abstract_constants(expr.root_ptr(), constants);
  return {Skeleton(std::move(root), expr.variable_count()), std::move(constants)};
}

Expression substitute(const Skeleton& skeleton, std::span<const double> constants) {
  if (constants.size() != static_cast<std::size_t>(skeleton.placeholder_count())) {
    throw ArityMismatchError("skeleton has " + std::to_string(skeleton.placeholder_count()) +
                             " placeholders, got " + std::to_string(constants.size()) + " constants");
  }
  return Expression(fill_placeholders(skeleton.root_ptr(), constants), skeleton.variable_count());
}

}  // namespace symkfcv
