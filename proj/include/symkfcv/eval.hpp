#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "symkfcv/constopt.hpp"
#include "symkfcv/datagen.hpp"
#include "symkfcv/kfold.hpp"
#include "symkfcv/model.hpp"

namespace symkfcv {

/// Error assigned to faulted scores and the upper clamp of curves.
inline constexpr double kErrorCeiling = 1e6;
/// Lower clamp applied before taking log10.
inline constexpr double kErrorFloor = 1e-12;

inline constexpr const char* kErrorDefinition =
    "relative squared error: sum((yhat - y)^2) / sum((y - mean(y))^2) over the index's stored points; "
    "plain mean squared error when y is constant; faults scored at 1e6; log10 after clamping to [1e-12, 1e6]";

struct IndexScore {
  std::size_t ordinal = 0;
  std::string predicted;  // fitted equation text, or the raw token ids when generation was ill-formed
  double error = 0.0;
  bool faulted = false;
  /// Target had zero variance; error is plain MSE.
  bool degenerate_target = false;
};

/// Sum of squared residuals over the target's total sum of squares. Falls back
/// to MSE (and sets *degenerate) when the targets are constant.
double relative_squared_error(std::span<const double> predicted, std::span<const double> target,
                              bool* degenerate = nullptr);

/// Full pipeline on one index: encode, greedy skeleton, constant fit, error.
/// Points are put in a canonical order first, so the score does not depend on
/// their stored order.
IndexScore score_index(const ModelParams& params, const DatasetIndex& index, std::size_t ordinal,
                       const FitBudget& budget, std::uint64_t seed);

/// Stage 3 only: fits the given skeleton instead of a generated one.
IndexScore score_skeleton(const Skeleton& skeleton, const DatasetIndex& index, std::size_t ordinal,
                          const FitBudget& budget, std::uint64_t seed);

/// score_index over every index, in parallel; results in ordinal order.
std::vector<IndexScore> score_dataset(const ModelParams& params, std::span<const DatasetIndex> dataset,
                                      const FitBudget& budget, std::uint64_t seed);

struct CurvePoint {
  double log_error = 0.0;
  double cumulative_frequency = 0.0;

  friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

using CumulativeCurve = std::vector<CurvePoint>;

/// Distinct clamped log10 errors, ascending, with the fraction of scores at or
/// below each. Throws std::invalid_argument on empty input.
CumulativeCurve cumulative_curve(std::span<const IndexScore> scores);
CumulativeCurve cumulative_curve_from_errors(std::span<const double> errors);

std::string curve_csv(const CumulativeCurve& curve);
CumulativeCurve parse_curve_csv(const std::string& text);

/// Learning-curve table: `unit,train_loss,val_loss` for one curve, or
/// `unit,fold_1_train_loss,fold_1_val_loss,...` for per-fold overlays.
std::string learning_curve_csv(const LossSummary& summary);

struct ReportInputs {
  std::optional<LossSummary> baseline;
  std::optional<LossSummary> kfcv;
  std::optional<CumulativeCurve> curve;
  std::vector<IndexScore> scores;
  bool plots = false;
};

/// Writes learning_curve.csv (learning_curve_baseline.csv and
/// learning_curve_kfcv.csv when both protocols are given), cumulative_curve.csv
/// when a curve is given, report.json, and optional SVG plots.
void emit_report(const ReportInputs& inputs, const std::filesystem::path& dir);

}  // namespace symkfcv
