#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "symkfcv/expression.hpp"

namespace symkfcv {

/// |y| above this is treated like a domain fault when sampling points.
inline constexpr double kOverflowCap = 1e6;

inline constexpr std::size_t kOpCount = 13;

struct GrammarConfig {
  int max_depth = 4;
  /// Production weights indexed by Op. Constant and Variable are the leaf
  /// productions; Placeholder must stay zero.
  std::array<double, kOpCount> weights = default_weights();
  double const_lo = -5.0;
  double const_hi = 5.0;
  /// Sampled constants are rounded to this many decimals (-1 keeps full precision).
  int constant_decimals = 3;
  int min_points = 30;
  int max_points = 200;
  double x_lo = -3.0;
  double x_hi = 3.0;
  int variable_count = 1;

  double& weight(Op op) { return weights[static_cast<std::size_t>(op)]; }
  double weight(Op op) const { return weights[static_cast<std::size_t>(op)]; }

  /// Throws std::invalid_argument on negative/all-zero weights or degenerate ranges.
  void validate() const;

  static std::array<double, kOpCount> default_weights();
};

struct Point {
  std::vector<double> x;
  double y = 0.0;
};

/// One dataset line: a point set plus its ground-truth equation.
struct DatasetIndex {
  std::vector<Point> points;
  std::string eq;
  std::string skeleton;
};

/// Random expression tree of depth <= cfg.max_depth containing at least one
/// variable. Deterministic in seed; throws std::runtime_error after 1000
/// variable-free draws.
Expression sample_expression(const GrammarConfig& cfg, std::uint64_t seed);

/// Samples the point set for `expr`. Returns nullopt when some point could not
/// be placed within 100 draws (domain faults or |y| > kOverflowCap).
std::optional<DatasetIndex> generate_index(const Expression& expr, const GrammarConfig& cfg,
                                           std::uint64_t seed);

struct GeneratedDataset {
  std::vector<DatasetIndex> indices;
  std::size_t rejected = 0;  // expressions discarded by generate_index
};

/// `count` indices; index i depends only on (cfg, derive_seed(master_seed, i)).
GeneratedDataset generate_dataset(const GrammarConfig& cfg, std::size_t count, std::uint64_t master_seed);

/// Error for a specific JSONL line (1-based).
class DatasetFormatError : public std::runtime_error {
 public:
  DatasetFormatError(std::size_t line, const std::string& message);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

std::string dataset_line(const DatasetIndex& index);
DatasetIndex parse_dataset_line(std::string_view line, std::size_t line_number, int variable_count = 1);

void write_dataset(const std::vector<DatasetIndex>& indices, const std::filesystem::path& path);
std::vector<DatasetIndex> read_dataset(const std::filesystem::path& path, int variable_count = 1);

/// Uniform sample without replacement; survivors keep their source order.
/// Throws std::invalid_argument when target_count > dataset.size().
std::vector<DatasetIndex> subsample(const std::vector<DatasetIndex>& dataset, std::size_t target_count,
                                    std::uint64_t seed);

/// Checks the per-index invariants against cfg; returns a description of the
/// first violation.
std::optional<std::string> check_index(const DatasetIndex& index, const GrammarConfig& cfg);

}  // namespace symkfcv
