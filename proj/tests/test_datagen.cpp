#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "support.hpp"
#include "symkfcv/datagen.hpp"
#include "symkfcv/io.hpp"

using namespace symkfcv;

namespace {

bool has_variable(const Node& n) {
  if (n.op == Op::Variable) return true;
  return (n.lhs && has_variable(*n.lhs)) || (n.rhs && has_variable(*n.rhs));
}

}  // namespace

TEST(SampleExpression, ForcedLeaf) {
  GrammarConfig cfg;
  cfg.weights.fill(0.0);
  cfg.weight(Op::Variable) = 1.0;
  cfg.max_depth = 1;
  EXPECT_EQ(print(sample_expression(cfg, 42)), "x1");
}

TEST(SampleExpression, Deterministic) {
  GrammarConfig cfg;
  for (std::uint64_t s = 0; s < 20; ++s) EXPECT_EQ(sample_expression(cfg, s), sample_expression(cfg, s));
}

TEST(SampleExpression, DepthAndVariableProperty) {
  GrammarConfig cfg;
  std::set<std::string> distinct;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const Expression e = sample_expression(cfg, s);
    ASSERT_TRUE(has_variable(e.root()));
    ASSERT_LE(depth(e.root()), cfg.max_depth);
    distinct.insert(print(e));
  }
  EXPECT_GT(distinct.size(), 300u);
}

TEST(SampleExpression, PowExponentsAreSmallIntegers) {
  GrammarConfig cfg;
  for (std::uint64_t s = 0; s < 500; ++s) {
    const Expression e = sample_expression(cfg, s);
    std::vector<const Node*> stack{&e.root()};
    while (!stack.empty()) {
      const Node* n = stack.back();
      stack.pop_back();
      if (n->op == Op::Pow) {
        ASSERT_EQ(n->rhs->op, Op::Constant);
        ASSERT_TRUE(n->rhs->value == 2 || n->rhs->value == 3 || n->rhs->value == 4);
      }
      if (n->lhs) stack.push_back(n->lhs.get());
      if (n->rhs) stack.push_back(n->rhs.get());
    }
  }
}

TEST(GenerateIndex, Identity) {
  GrammarConfig cfg;
  cfg.x_lo = -1;
  cfg.x_hi = 1;
  cfg.min_points = cfg.max_points = 5;
  const auto idx = generate_index(parse("x1"), cfg, 1);
  ASSERT_TRUE(idx);
  ASSERT_EQ(idx->points.size(), 5u);
  for (const auto& p : idx->points) {
    EXPECT_EQ(p.y, p.x[0]);
    EXPECT_GE(p.x[0], -1.0);
    EXPECT_LE(p.x[0], 1.0);
  }
  EXPECT_EQ(idx->eq, "x1");
  EXPECT_EQ(idx->skeleton, "x1");
}

TEST(GenerateIndex, LogOnNegativeRangeRejected) {
  GrammarConfig cfg;
  cfg.x_lo = -3;
  cfg.x_hi = -1;
  EXPECT_FALSE(generate_index(parse("log(x1)"), cfg, 1));
}

TEST(GenerateIndex, SelfConsistent) {
  GrammarConfig cfg;
  const auto data = generate_dataset(cfg, 100, 77);
  ASSERT_EQ(data.indices.size(), 100u);
  for (const auto& idx : data.indices) {
    ASSERT_FALSE(check_index(idx, cfg)) << *check_index(idx, cfg);
    const Expression e = parse(idx.eq);
    for (const auto& p : idx.points) {
      const EvalResult r = evaluate(e, p.x);
      ASSERT_TRUE(r.ok());
      ASSERT_NEAR(r.value, p.y, 1e-9 * std::max(1.0, std::abs(p.y)));
      ASSERT_LE(std::abs(p.y), kOverflowCap);
    }
  }
}

TEST(GenerateDataset, ParallelMatchesSerial) {
  GrammarConfig cfg;
  const auto a = generate_dataset(cfg, 40, 5);
  setenv("SYMKFCV_THREADS", "1", 1);
  const auto b = generate_dataset(cfg, 40, 5);
  unsetenv("SYMKFCV_THREADS");
  ASSERT_EQ(a.indices.size(), b.indices.size());
  for (std::size_t i = 0; i < a.indices.size(); ++i) EXPECT_EQ(dataset_line(a.indices[i]), dataset_line(b.indices[i]));
  EXPECT_EQ(a.rejected, b.rejected);
}

TEST(Dataset, LineSchema) {
  DatasetIndex idx{{{{0.5}, 1.5}, {{-1.0}, 0.0}}, "x1+1", "x1+C"};
  EXPECT_EQ(dataset_line(idx), R"({"x":[[0.5],[-1.0]],"y":[1.5,0.0],"eq":"x1+1","skeleton":"x1+C"})");
}

TEST(Dataset, RoundTrip) {
  const auto dir = testsupport::temp_dir("dataset_rt");
  const auto data = generate_dataset(GrammarConfig{}, 100, 3).indices;
  write_dataset(data, dir / "d.jsonl");
  const auto back = read_dataset(dir / "d.jsonl");
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(back[i].eq, data[i].eq);
    EXPECT_EQ(back[i].skeleton, data[i].skeleton);
    ASSERT_EQ(back[i].points.size(), data[i].points.size());
    for (std::size_t p = 0; p < data[i].points.size(); ++p) {
      EXPECT_EQ(back[i].points[p].x, data[i].points[p].x);
      EXPECT_EQ(back[i].points[p].y, data[i].points[p].y);
    }
  }
}

TEST(Dataset, EmptyFileIsEmptyDataset) {
  const auto dir = testsupport::temp_dir("dataset_empty");
  write_file(dir / "e.jsonl", "");
  EXPECT_TRUE(read_dataset(dir / "e.jsonl").empty());
}

TEST(Dataset, TruncatedLineNamed) {
  const auto dir = testsupport::temp_dir("dataset_trunc");
  const auto data = generate_dataset(GrammarConfig{}, 3, 3).indices;
  std::string text = dataset_line(data[0]) + "\n" + dataset_line(data[1]).substr(0, 20) + "\n";
  write_file(dir / "t.jsonl", text);
  try {
    read_dataset(dir / "t.jsonl");
    FAIL();
  } catch (const DatasetFormatError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(Dataset, MissingFieldNamed) {
  try {
    parse_dataset_line(R"({"x":[[1.0]],"y":[1.0],"eq":"x1"})", 4);
    FAIL();
  } catch (const DatasetFormatError& e) {
    EXPECT_EQ(e.line(), 4u);
    EXPECT_NE(std::string(e.what()).find("skeleton"), std::string::npos);
  }
  EXPECT_THROW(parse_dataset_line(R"({"x":[[1.0]],"y":[1.0,2.0],"eq":"x1","skeleton":"x1"})", 1), DatasetFormatError);
  EXPECT_THROW(parse_dataset_line(R"({"x":[[1.0]],"y":[1.0],"eq":"2*x1","skeleton":"x1"})", 1), DatasetFormatError);
}

TEST(Subsample, FullReduction) {
  // 500,000 -> 15,000 indices
  EXPECT_NEAR((1.0 - 15000.0 / 500000.0) * 100.0, 97.0, 1e-12);
}

TEST(Subsample, Properties) {
  const auto data = generate_dataset(GrammarConfig{}, 60, 9).indices;
  const auto same = subsample(data, data.size(), 1);
  ASSERT_EQ(same.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) EXPECT_EQ(dataset_line(same[i]), dataset_line(data[i]));

  const auto a = subsample(data, 20, 4), b = subsample(data, 20, 4);
  ASSERT_EQ(a.size(), 20u);
  std::vector<std::size_t> positions;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(dataset_line(a[i]), dataset_line(b[i]));
    const auto it = std::find_if(data.begin(), data.end(),
                                 [&](const DatasetIndex& d) { return dataset_line(d) == dataset_line(a[i]); });
    ASSERT_NE(it, data.end());
    positions.push_back(static_cast<std::size_t>(it - data.begin()));
  }
  EXPECT_TRUE(std::is_sorted(positions.begin(), positions.end()));
  EXPECT_THROW(subsample(data, 61, 1), std::invalid_argument);
}

TEST(GrammarConfig, Validation) {
  GrammarConfig cfg;
  cfg.const_lo = cfg.const_hi = 1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  GrammarConfig zero;
  zero.weights.fill(0.0);
  EXPECT_THROW(zero.validate(), std::invalid_argument);
  GrammarConfig neg;
  neg.weight(Op::Sin) = -1;
  EXPECT_THROW(neg.validate(), std::invalid_argument);
}
