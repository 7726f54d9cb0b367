#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "symkfcv/datagen.hpp"
#include "symkfcv/expression.hpp"
#include "symkfcv/kfold.hpp"

namespace testsupport {

// Per-epoch (train, val) losses of the 80/20 run and per-fold losses of the
// 5-fold run, as printed in the source tables.
inline const std::array<double, 20> kTable1Train = {
    1.87382, 0.46677, 0.32406, 0.27361, 0.24153, 0.22168, 0.21086, 0.20035, 0.19437, 0.18695,
    0.18185, 0.17765, 0.17289, 0.17167, 0.16750, 0.16447, 0.16218, 0.16171, 0.15876, 0.15666};
inline const std::array<double, 20> kTable1Val = {
    0.58396, 0.45976, 0.48057, 0.55539, 0.51188, 0.56281, 0.53505, 0.56998, 0.59583, 0.58485,
    0.65605, 0.58455, 0.66382, 0.64183, 0.65485, 0.72675, 0.63886, 0.67435, 0.64022, 0.61153};
inline constexpr double kTable1OverallTrain = 0.293467;
inline constexpr double kTable1OverallVal = 0.5966445;

inline const std::array<double, 5> kTable2Train = {0.32908, 0.27029, 0.25590, 0.24714, 0.24494};
inline const std::array<double, 5> kTable2Val = {0.27480, 0.25325, 0.26972, 0.31040, 0.28471};
inline constexpr double kTable2OverallTrain = 0.26947;
inline constexpr double kTable2OverallVal = 0.27858;  // printed rounded to 5 places
inline constexpr double kHeadlineImprovement = 53.31;

template <std::size_t N>
std::vector<symkfcv::LossRecord> records(const std::array<double, N>& train, const std::array<double, N>& val) {
  std::vector<symkfcv::LossRecord> out;
  for (std::size_t i = 0; i < N; ++i) out.push_back({static_cast<int>(i + 1), train[i], val[i]});
  return out;
}

inline std::vector<symkfcv::LossRecord> table1() { return records(kTable1Train, kTable1Val); }
inline std::vector<symkfcv::LossRecord> table2() { return records(kTable2Train, kTable2Val); }

// Naive left-to-right mean, independent of the library's summation.
inline double column_mean(const std::vector<double>& v) {
  long double s = 0;
  for (double x : v) s += x;
  return static_cast<double>(s / v.size());
}

// Fraction of errors whose clamped log10 is <= v, by direct counting.
inline double brute_frequency(const std::vector<double>& errors, double v) {
  std::size_t c = 0;
  for (double e : errors) {
    const double l = std::log10(std::min(std::max(e, 1e-12), 1e6));
    if (l <= v) ++c;
  }
  return static_cast<double>(c) / static_cast<double>(errors.size());
}

// Random AST over one variable with arbitrary real constants.
inline symkfcv::NodePtr random_tree(std::mt19937_64& rng, int depth, bool placeholders = false,
                                    int* next_placeholder = nullptr) {
  using namespace symkfcv;
  std::uniform_int_distribution<int> pick(0, 9);
  std::uniform_real_distribution<double> cval(-10.0, 10.0);
  const int choice = depth <= 1 ? pick(rng) % 2 : pick(rng);
  switch (choice) {
    case 0:
      return make_variable(0);
    case 1:
      if (placeholders) return make_placeholder((*next_placeholder)++);
      return make_constant(std::ldexp(std::round(std::ldexp(cval(rng), 20)), -20) * (pick(rng) == 0 ? 1e-7 : 1.0));
    case 2: case 3: {
      static const Op unary[] = {Op::Sin, Op::Cos, Op::Log, Op::Exp, Op::Neg};
      const Op op = unary[pick(rng) % 5];
      return make_unary(op, random_tree(rng, depth - 1, placeholders, next_placeholder));
    }
    default: {
      static const Op binary[] = {Op::Add, Op::Sub, Op::Mul, Op::Div, Op::Pow};
      const Op op = binary[pick(rng) % 5];
      auto lhs = random_tree(rng, depth - 1, placeholders, next_placeholder);
      auto rhs = random_tree(rng, depth - 1, placeholders, next_placeholder);
      return make_binary(op, lhs, rhs);
    }
  }
}

// Fully parenthesized rendering: unambiguous without any precedence rules.
inline std::string full_parens(const symkfcv::Node& n) {
  using namespace symkfcv;
  char buf[64];
  switch (n.op) {
    case Op::Constant:
      std::snprintf(buf, sizeof buf, "(%.17g)", n.value);
      return buf;
    case Op::Variable:
      return "x" + std::to_string(n.index + 1);
    case Op::Placeholder:
      return "C";
    case Op::Neg:
      return "(-" + full_parens(*n.lhs) + ")";
    case Op::Sin: return "sin(" + full_parens(*n.lhs) + ")";
    case Op::Cos: return "cos(" + full_parens(*n.lhs) + ")";
    case Op::Log: return "log(" + full_parens(*n.lhs) + ")";
    case Op::Exp: return "exp(" + full_parens(*n.lhs) + ")";
    default: {
      const char* sym = n.op == Op::Add ? "+" : n.op == Op::Sub ? "-" : n.op == Op::Mul ? "*" : n.op == Op::Div ? "/" : "^";
      return "(" + full_parens(*n.lhs) + sym + full_parens(*n.rhs) + ")";
    }
  }
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("symkfcv_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testsupport
