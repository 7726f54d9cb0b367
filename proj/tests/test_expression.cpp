#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "support.hpp"
#include "symkfcv/expression.hpp"
#include "symkfcv/vocabulary.hpp"

using namespace symkfcv;

namespace {

NodePtr x() { return make_variable(0); }
NodePtr c(double v) { return make_constant(v); }

bool same(const Expression& a, const NodePtr& b) { return same_structure(a.root(), *b); }

}  // namespace

TEST(Parse, SingleFunction) {
  EXPECT_TRUE(same(parse("sin(x1)"), make_unary(Op::Sin, x())));
}

TEST(Parse, SumOfProduct) {
  auto want = make_binary(Op::Add, make_binary(Op::Mul, c(3.2), make_unary(Op::Sin, x())), c(1.5));
  EXPECT_TRUE(same(parse("3.2*sin(x1)+1.5"), want));
}

TEST(Parse, PowerIsRightAssociative) {
  auto want = make_binary(Op::Pow, x(), make_binary(Op::Pow, c(2), c(3)));
  EXPECT_TRUE(same(parse("x1^2^3"), want));
}

TEST(Parse, Precedence) {
  // ^ > unary minus > * / > + -
  EXPECT_TRUE(same(parse("-x1^2"), make_unary(Op::Neg, make_binary(Op::Pow, x(), c(2)))));
  EXPECT_TRUE(same(parse("1-2-x1"), make_binary(Op::Sub, make_binary(Op::Sub, c(1), c(2)), x())));
  EXPECT_TRUE(same(parse("x1/2*3"), make_binary(Op::Mul, make_binary(Op::Div, x(), c(2)), c(3))));
  EXPECT_TRUE(same(parse("-x1*2"), make_binary(Op::Mul, make_unary(Op::Neg, x()), c(2))));
  EXPECT_TRUE(same(parse("-2.5*x1"), make_binary(Op::Mul, c(-2.5), x())));
  EXPECT_TRUE(same(parse("-2^2"), make_unary(Op::Neg, make_binary(Op::Pow, c(2), c(2)))));
}

TEST(Parse, SyntaxErrorCarriesPosition) {
  try {
    parse("sin(x1");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.position(), 6u);
  }
  EXPECT_THROW(parse(""), ParseError);
  EXPECT_THROW(parse("x1+"), ParseError);
  EXPECT_THROW(parse("x1 x1"), ParseError);
  EXPECT_THROW(parse("2x1"), ParseError);
  EXPECT_THROW(parse("x1$"), ParseError);
}

TEST(Parse, UnknownIdentifier) {
  try {
    parse("tan(x1)");
    FAIL();
  } catch (const UnknownIdentifierError& e) {
    EXPECT_EQ(e.identifier(), "tan");
    EXPECT_EQ(e.position(), 0u);
  }
  EXPECT_THROW(parse("x2"), UnknownIdentifierError);
  EXPECT_THROW(parse("C*x1"), UnknownIdentifierError);
}

// Fully parenthesized text needs no precedence rules, so it pins down which
// tree the canonical print must denote.
TEST(Parse, AgreesWithFullyParenthesizedOracle) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 50; ++i) {
    auto tree = testsupport::random_tree(rng, 5);
    const Expression e(tree);
    const Expression from_oracle = parse(testsupport::full_parens(*tree));
    ASSERT_TRUE(same_structure(from_oracle.root(), *tree)) << testsupport::full_parens(*tree);
    ASSERT_TRUE(same_structure(parse(print(e)).root(), *tree)) << print(e);
  }
}

TEST(Print, Basics) {
  EXPECT_EQ(print(*c(1.5)), "1.5");
  EXPECT_EQ(print(*make_binary(Op::Add, x(), c(2))), "x1+2");
  EXPECT_EQ(print(parse("x1-(x1-x1)")), "x1-(x1-x1)");
  EXPECT_EQ(print(parse("(x1^2)^3")), "(x1^2)^3");
  EXPECT_EQ(print(parse("x1^2^3")), "x1^2^3");
  EXPECT_EQ(print(parse("x1*(-2)")), "x1*(-2)");
  EXPECT_EQ(print(*make_unary(Op::Neg, c(2))), "-(2)");
  EXPECT_EQ(print(parse("--x1")), "-(-x1)");
}

TEST(Print, RoundTripsRandomTrees) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 250; ++i) {
    const Expression e(testsupport::random_tree(rng, 6));
    const std::string text = print(e);
    const Expression back = parse(text);
    ASSERT_EQ(back, e) << text;
    ASSERT_EQ(print(back), text);
  }
}

TEST(Print, ConstantsRoundTripExactly) {
  for (double v : {0.1, 1.0 / 3.0, 2.718281828459045, 1e-7, 123456789.125, -4.25e-9}) {
    const Expression e(make_binary(Op::Mul, c(v), x()));
    EXPECT_EQ(parse(print(e)).root().lhs->value, v);
  }
}

TEST(Evaluate, Examples) {
  const double zero = 0.0, two = 2.0, minus_one = -1.0;
  EXPECT_EQ(evaluate(parse("sin(x1)"), {&zero, 1}).value, 0.0);
  const EvalResult log_neg = evaluate(parse("log(x1)"), {&minus_one, 1});
  ASSERT_FALSE(log_neg.ok());
  EXPECT_EQ(*log_neg.fault, Op::Log);
  EXPECT_DOUBLE_EQ(evaluate(parse("x1^2+3*x1"), {&two, 1}).value, 10.0);
}

TEST(Evaluate, FaultsAreValues) {
  const double zero = 0.0, big = 1000.0;
  EXPECT_EQ(*evaluate(parse("1/x1"), {&zero, 1}).fault, Op::Div);
  EXPECT_EQ(*evaluate(parse("x1^(-1)"), {&zero, 1}).fault, Op::Pow);
  EXPECT_EQ(*evaluate(parse("exp(x1)"), {&big, 1}).fault, Op::Exp);
  EXPECT_EQ(*evaluate(parse("sin(log(x1))"), {&zero, 1}).fault, Op::Log);
  const double h = 0.5;
  EXPECT_DOUBLE_EQ(evaluate(parse("x1^0.5"), {&h, 1}).value, std::sqrt(0.5));
}

TEST(Evaluate, ShortInputThrows) {
  EXPECT_THROW(evaluate(parse("x1"), std::span<const double>{}), std::out_of_range);
}

TEST(Skeleton, Examples) {
  auto s = skeletonize(parse("3.2*sin(x1)+1.5"));
  EXPECT_EQ(print(s.skeleton), "C*sin(x1)+C");
  EXPECT_EQ(s.constants, (std::vector<double>{3.2, 1.5}));
  auto id = skeletonize(parse("x1"));
  EXPECT_EQ(print(id.skeleton), "x1");
  EXPECT_TRUE(id.constants.empty());
}

TEST(Skeleton, LiteralExponentsStay) {
  auto s = skeletonize(parse("2.5*x1^3"));
  EXPECT_EQ(print(s.skeleton), "C*x1^3");
  EXPECT_EQ(s.skeleton.placeholder_count(), 1);
  auto t = skeletonize(parse("x1^2.5"));
  EXPECT_EQ(print(t.skeleton), "x1^C");
}

TEST(Skeleton, OrdinalsValidated) {
  EXPECT_THROW(Skeleton(make_binary(Op::Add, make_placeholder(1), make_placeholder(0))), InvalidExpressionError);
  EXPECT_THROW(Skeleton(make_binary(Op::Add, make_placeholder(0), c(1.5))), InvalidExpressionError);
  EXPECT_EQ(Skeleton(make_binary(Op::Add, make_placeholder(0), make_placeholder(1))).placeholder_count(), 2);
}

TEST(Substitute, Examples) {
  const std::vector<double> two = {2.0}, none = {}, pair = {3.0, 4.0};
  EXPECT_EQ(print(substitute(parse_skeleton("C*x1"), two)), "2*x1");
  EXPECT_EQ(print(substitute(parse_skeleton("x1"), none)), "x1");
  EXPECT_EQ(print(substitute(parse_skeleton("C+C*x1"), pair)), "3+4*x1");
  EXPECT_THROW(substitute(parse_skeleton("C+C*x1"), two), ArityMismatchError);
}

TEST(Substitute, RoundTripsRandomTrees) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 100; ++i) {
    const Expression e(testsupport::random_tree(rng, 5));
    const auto s = skeletonize(e);
    ASSERT_EQ(substitute(s.skeleton, s.constants), e) << print(e);
  }
}

TEST(Tokens, PrefixOrder) {
  const auto& v = Vocabulary::standard();
  const auto ids = tokenize(parse_skeleton("C*sin(x1)+C"));
  const std::vector<int> want = {v.id("add"), v.id("mul"), v.id("C"), v.id("sin"), v.id("x1"), v.id("C")};
  EXPECT_EQ(ids, want);
}

TEST(Tokens, VocabularyIsDenseBijection) {
  const auto& v = Vocabulary::standard();
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(v.id(v.token(static_cast<int>(i))), static_cast<int>(i));
  EXPECT_EQ(v.token(Vocabulary::kPad), "<pad>");
  EXPECT_EQ(v.token(Vocabulary::kStart), "<s>");
  EXPECT_EQ(v.token(Vocabulary::kEnd), "</s>");
}

TEST(Tokens, RejectsIllFormed) {
  const auto& v = Vocabulary::standard();
  auto kind = [](std::vector<int> ids) {
    try {
      detokenize(ids);
    } catch (const TokenError& e) {
      return e.kind();
    }
    ADD_FAILURE() << "accepted";
    return TokenError::Kind::Empty;
  };
  EXPECT_EQ(kind({}), TokenError::Kind::Empty);
  EXPECT_EQ(kind({v.id("add"), v.id("x1")}), TokenError::Kind::Truncated);
  EXPECT_EQ(kind({v.id("x1"), v.id("x1")}), TokenError::Kind::Trailing);
  EXPECT_EQ(kind({999}), TokenError::Kind::UnknownId);
  EXPECT_EQ(kind({Vocabulary::kEnd}), TokenError::Kind::UnknownId);
}

TEST(Tokens, RoundTripRandomSkeletons) {
  std::mt19937_64 rng(9);
  for (int i = 0; i < 200; ++i) {
    int next = 0;
    const Skeleton s(testsupport::random_tree(rng, 5, true, &next));
    ASSERT_EQ(detokenize(tokenize(s)), s) << print(s);
  }
}

TEST(Tokens, LiteralExponentTokens) {
  const auto s = parse_skeleton("C*x1^3");
  const auto ids = tokenize(s);
  EXPECT_EQ(ids.back(), Vocabulary::standard().id("3"));
  EXPECT_EQ(detokenize(ids), s);
}
