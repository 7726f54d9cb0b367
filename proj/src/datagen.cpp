#include "symkfcv/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "symkfcv/io.hpp"
#include "symkfcv/parallel.hpp"
#include "symkfcv/random.hpp"

namespace symkfcv {

namespace {

constexpr int kMaxVariableRetries = 1000;
constexpr int kMaxPointRetries = 100;
constexpr int kMaxExpressionAttempts = 10000;

std::size_t slot(Op op) { return static_cast<std::size_t>(op); }

}  // namespace

std::array<double, kOpCount> GrammarConfig::default_weights() {
  std::array<double, kOpCount> w{};
  w[slot(Op::Variable)] = 1.0;
  w[slot(Op::Constant)] = 1.0;
  w[slot(Op::Add)] = 1.0;
  w[slot(Op::Sub)] = 0.6;
  w[slot(Op::Mul)] = 1.0;
  w[slot(Op::Div)] = 0.4;
  w[slot(Op::Pow)] = 0.4;
  w[slot(Op::Sin)] = 0.5;
  w[slot(Op::Cos)] = 0.5;
  w[slot(Op::Log)] = 0.3;
  w[slot(Op::Exp)] = 0.3;
  w[slot(Op::Neg)] = 0.2;
  return w;
}

void GrammarConfig::validate() const {
  if (max_depth < 1) throw std::invalid_argument("max_depth must be >= 1");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("operator weights must be finite and >= 0");
    total += w;
  }
  if (total <= 0.0) throw std::invalid_argument("operator weights are all zero");
  if (weight(Op::Placeholder) != 0.0) throw std::invalid_argument("placeholder weight must be zero");
  if (weight(Op::Variable) <= 0.0) throw std::invalid_argument("variable weight must be positive");
  if (!(const_lo < const_hi)) throw std::invalid_argument("constant range is empty");
  if (!(x_lo < x_hi)) throw std::invalid_argument("x sampling range is empty");
  if (min_points < 1 || min_points > max_points) throw std::invalid_argument("invalid points-per-index range");
  if (variable_count < 1) throw std::invalid_argument("variable_count must be >= 1");
}

namespace {

class TreeSampler {
 public:
  TreeSampler(const GrammarConfig& cfg, Rng& rng) : cfg_(cfg), rng_(rng) {}

  NodePtr grow(int levels) {
    const Op op = pick(levels == 1);
    switch (arity(op)) {
      case 0:
        return leaf(op);
      case 1:
        return make_unary(op, grow(levels - 1));
      default:
        break;
    }
    if (op == Op::Pow) {
      const auto e = rng_.between(kMinLiteralExponent, kMaxLiteralExponent);
      return make_binary(op, grow(levels - 1), make_constant(static_cast<double>(e)));
    }
    NodePtr lhs = grow(levels - 1);
    return make_binary(op, lhs, grow(levels - 1));
  }

 private:
  Op pick(bool leaves_only) {
    double total = 0.0;
    for (std::size_t i = 0; i < kOpCount; ++i) {
      if (!leaves_only || arity(static_cast<Op>(i)) == 0) total += cfg_.weights[i];
    }
    if (total <= 0.0) return Op::Variable;
    double r = rng_.uniform() * total;
    Op chosen = Op::Variable;
    for (std::size_t i = 0; i < kOpCount; ++i) {
      const Op op = static_cast<Op>(i);
      if (leaves_only && arity(op) != 0) continue;
      if (cfg_.weights[i] <= 0.0) continue;
      chosen = op;
      if (r < cfg_.weights[i]) break;
      r -= cfg_.weights[i];
    }
    return chosen;
  }

  NodePtr leaf(Op op) {
    if (op == Op::Variable) {
      return make_variable(static_cast<int>(rng_.below(static_cast<std::uint64_t>(cfg_.variable_count))));
    }
    double v = rng_.uniform(cfg_.const_lo, cfg_.const_hi);
    if (cfg_.constant_decimals >= 0) {
      const double scale = std::pow(10.0, cfg_.constant_decimals);
      v = std::round(v * scale) / scale;
    }
    return make_constant(v == 0.0 ? 0.0 : v);
  }

  const GrammarConfig& cfg_;
  Rng& rng_;
};

bool has_variable(const Node& n) {
  if (n.op == Op::Variable) return true;
  return (n.lhs && has_variable(*n.lhs)) || (n.rhs && has_variable(*n.rhs));
}

}  // namespace

Expression sample_expression(const GrammarConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  TreeSampler sampler(cfg, rng);
  for (int attempt = 0; attempt < kMaxVariableRetries; ++attempt) {
    NodePtr root = sampler.grow(cfg.max_depth);
    if (has_variable(*root)) return Expression(std::move(root), cfg.variable_count);
  }
  throw std::runtime_error("no expression with a variable after " + std::to_string(kMaxVariableRetries) +
                           " draws; check grammar weights");
}

std::optional<DatasetIndex> generate_index(const Expression& expr, const GrammarConfig& cfg,
                                           std::uint64_t seed) {
  Rng rng(seed);
  const auto count = static_cast<std::size_t>(rng.between(cfg.min_points, cfg.max_points));
  DatasetIndex index;
  index.points.reserve(count);
  std::vector<double> x(static_cast<std::size_t>(cfg.variable_count));
  for (std::size_t p = 0; p < count; ++p) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxPointRetries && !placed; ++attempt) {
      for (double& xi : x) xi = rng.uniform(cfg.x_lo, cfg.x_hi);
      const EvalResult r = evaluate(expr, x);
      if (r.ok() && std::abs(r.value) <= kOverflowCap) {
        index.points.push_back({x, r.value});
        placed = true;
      }
    }
    if (!placed) return std::nullopt;
  }
  index.eq = print(expr);
  index.skeleton = print(skeletonize(expr).skeleton);
  return index;
}

GeneratedDataset generate_dataset(const GrammarConfig& cfg, std::size_t count, std::uint64_t master_seed) {
  cfg.validate();
  std::vector<DatasetIndex> indices(count);
  std::vector<std::size_t> rejections(count, 0);
  parallel_for(count, [&](std::size_t i) {
    const std::uint64_t seed = derive_seed(master_seed, i);
    for (std::uint64_t attempt = 0; attempt < kMaxExpressionAttempts; ++attempt) {
      const Expression expr = sample_expression(cfg, derive_seed(seed, 2 * attempt));
      if (auto idx = generate_index(expr, cfg, derive_seed(seed, 2 * attempt + 1))) {
        indices[i] = std::move(*idx);
        return;
      }
      ++rejections[i];
    }
    throw std::runtime_error("index " + std::to_string(i) + ": every sampled expression was rejected");
  });
  return {std::move(indices), std::accumulate(rejections.begin(), rejections.end(), std::size_t{0})};
}

// ---------------------------------------------------------------------------
// JSONL

DatasetFormatError::DatasetFormatError(std::size_t line, const std::string& message)
    : std::runtime_error("line " + std::to_string(line) + ": " + message), line_(line) {}

std::string dataset_line(const DatasetIndex& index) {
  nlohmann::ordered_json j;
  auto xs = nlohmann::ordered_json::array();
  auto ys = nlohmann::ordered_json::array();
  for (const Point& p : index.points) {
    xs.push_back(p.x);
    ys.push_back(p.y);
  }
  j["x"] = std::move(xs);
  j["y"] = std::move(ys);
  j["eq"] = index.eq;
  j["skeleton"] = index.skeleton;
  return j.dump();
}

DatasetIndex parse_dataset_line(std::string_view line, std::size_t line_number, int variable_count) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw DatasetFormatError(line_number, std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw DatasetFormatError(line_number, "expected a JSON object");
  for (const char* field : {"x", "y", "eq", "skeleton"}) {
    if (!j.contains(field)) throw DatasetFormatError(line_number, std::string("missing field '") + field + "'");
  }
  DatasetIndex idx;
  try {
    const auto& xs = j.at("x");
    const auto& ys = j.at("y");
    if (!xs.is_array() || !ys.is_array()) throw DatasetFormatError(line_number, "'x' and 'y' must be arrays");
    if (xs.size() != ys.size()) {
      throw DatasetFormatError(line_number, "'x' has " + std::to_string(xs.size()) + " entries but 'y' has " +
                                                std::to_string(ys.size()));
    }
    idx.points.resize(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      idx.points[i].x = xs[i].get<std::vector<double>>();
      idx.points[i].y = ys[i].get<double>();
      if (idx.points[i].x.size() != static_cast<std::size_t>(variable_count)) {
        throw DatasetFormatError(line_number, "point " + std::to_string(i) + " has wrong x dimension");
      }
    }
    idx.eq = j.at("eq").get<std::string>();
    idx.skeleton = j.at("skeleton").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DatasetFormatError(line_number, std::string("schema violation: ") + e.what());
  }
  try {
    const Expression expr = parse(idx.eq, variable_count);
    if (print(skeletonize(expr).skeleton) != idx.skeleton) {
      throw DatasetFormatError(line_number, "'skeleton' does not match 'eq'");
    }
  } catch (const ParseError& e) {
    throw DatasetFormatError(line_number, std::string("bad 'eq': ") + e.what());
  }
  return idx;
}

void write_dataset(const std::vector<DatasetIndex>& indices, const std::filesystem::path& path) {
  std::string out;
  for (const auto& idx : indices) {
    out += dataset_line(idx);
    out += '\n';
  }
  write_file(path, out);
}

std::vector<DatasetIndex> read_dataset(const std::filesystem::path& path, int variable_count) {
  const std::string text = read_file(path);
  std::vector<DatasetIndex> out;
  std::size_t start = 0;
  std::size_t line_number = 0;
  while (start < text.size()) {
    ++line_number;
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string_view line(text.data() + start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) throw DatasetFormatError(line_number, "empty line");
    out.push_back(parse_dataset_line(line, line_number, variable_count));
    start = end + 1;
  }
  return out;
}

std::vector<DatasetIndex> subsample(const std::vector<DatasetIndex>& dataset, std::size_t target_count,
                                    std::uint64_t seed) {
  if (target_count > dataset.size()) {
    throw std::invalid_argument("subsample target " + std::to_string(target_count) + " exceeds dataset size " +
                                std::to_string(dataset.size()));
  }
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  // Partial Fisher-Yates: the first target_count slots are a uniform sample.
  for (std::size_t i = 0; i < target_count; ++i) {
    const std::size_t j = i + rng.below(order.size() - i);
    std::swap(order[i], order[j]);
  }
  order.resize(target_count);
  std::sort(order.begin(), order.end());
  std::vector<DatasetIndex> out;
  out.reserve(target_count);
  for (std::size_t i : order) out.push_back(dataset[i]);
  return out;
}

std::optional<std::string> check_index(const DatasetIndex& index, const GrammarConfig& cfg) {
  const auto n = index.points.size();
  if (n < static_cast<std::size_t>(cfg.min_points) || n > static_cast<std::size_t>(cfg.max_points)) {
    return "point count " + std::to_string(n) + " outside configured range";
  }
  for (const Point& p : index.points) {
    if (!std::isfinite(p.y)) return "non-finite y";
    if (p.x.size() != static_cast<std::size_t>(cfg.variable_count)) return "wrong x dimension";
    for (double xi : p.x) {
      if (xi < cfg.x_lo || xi > cfg.x_hi) return "x outside sampling range";
    }
  }
  try {
    const Expression expr = parse(index.eq, cfg.variable_count);
    if (print(skeletonize(expr).skeleton) != index.skeleton) return "skeleton does not match eq";
  } catch (const std::exception& e) {
    return std::string("eq does not parse: ") + e.what();
  }
  return std::nullopt;
}

}  // namespace symkfcv
