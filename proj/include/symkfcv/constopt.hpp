#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "symkfcv/datagen.hpp"
#include "symkfcv/expression.hpp"

namespace symkfcv {

/// Squared-error contribution of a point whose prediction faults.
inline constexpr double kFaultPenalty = 1e6;

struct FitBudget {
  int restarts = 8;
  int max_iterations = 200;
  double tolerance = 1e-9;
  /// Keep the accepted-step MSE trajectory of every start.
  bool record_history = false;
};

struct FitResult {
  Expression expression;
  std::vector<double> constants;
  double residual = 0.0;  // mean squared error, faults counted at kFaultPenalty
  bool converged = false;
  int restarts_used = 0;
  std::size_t faulted_points = 0;
  std::vector<std::vector<double>> histories;
};

/// Mean squared error of skeleton(constants) over the points.
double fit_objective(const Skeleton& skeleton, std::span<const double> constants, std::span<const Point> points,
                     std::size_t* faulted = nullptr);

/// Multi-start damped least squares. Start 0 is all ones, starts 1..restarts
/// draw constants from U(-5, 5). Each start is refined with Levenberg-Marquardt
/// steps on a central-difference Jacobian (step 1e-6, scaled by |c|) until an
/// accepted step improves the MSE by less than the tolerance, no damping level
/// gives descent, or max_iterations is reached. The best start wins, ties going
/// to the lower ordinal.
FitResult fit_constants(const Skeleton& skeleton, std::span<const Point> points, const FitBudget& budget,
                        std::uint64_t seed);

}  // namespace symkfcv
