#include "symkfcv/constopt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "symkfcv/random.hpp"

namespace symkfcv {

namespace {

constexpr double kFdStep = 1e-6;
constexpr double kInitialDamping = 1e-3;
constexpr double kMaxDamping = 1e16;
constexpr double kStartLo = -5.0;
constexpr double kStartHi = 5.0;
const double kFaultResidual = std::sqrt(kFaultPenalty);

// Signed residual per point; nullopt marks a fault.
std::optional<double> residual_at(const Skeleton& s, std::span<const double> c, const Point& p) {
  const EvalResult r = evaluate(s, c, p.x);
  if (!r.ok()) return std::nullopt;
  const double e = r.value - p.y;
  if (!std::isfinite(e * e)) return std::nullopt;
  return e;
}

struct Residuals {
  std::vector<double> r;
  std::vector<unsigned char> fault;
  double mse = 0.0;
};

void compute_residuals(const Skeleton& s, std::span<const double> c, std::span<const Point> points, Residuals& out) {
  out.r.resize(points.size());
  out.fault.resize(points.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto e = residual_at(s, c, points[i]);
    out.fault[i] = !e.has_value();
    out.r[i] = e ? *e : kFaultResidual;
    sum += out.r[i] * out.r[i];
  }
  out.mse = sum / static_cast<double>(points.size());
}

// Solves a (symmetric positive definite in practice) system by Gaussian
// elimination with partial pivoting. Returns false if singular.
bool solve(std::vector<double> a, std::vector<double> b, std::size_t n, std::vector<double>& x) {
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    }
    if (!(std::abs(a[piv * n + col]) > 0.0)) return false;
    if (piv != col) {
      for (std::size_t k = 0; k < n; ++k) std::swap(a[col * n + k], a[piv * n + k]);
      std::swap(b[col], b[piv]);
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r * n + col] / a[col * n + col];
      for (std::size_t k = col; k < n; ++k) a[r * n + k] -= f * a[col * n + k];
      b[r] -= f * b[col];
    }
  }
  x.assign(n, 0.0);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a[i * n + k] * x[k];
    x[i] = s / a[i * n + i];
  }
  return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

struct StartOutcome {
  std::vector<double> constants;
  double mse = std::numeric_limits<double>::infinity();
  bool stopped_early = false;
  std::vector<double> history;
};

StartOutcome refine(const Skeleton& s, std::vector<double> c, std::span<const Point> points, const FitBudget& budget) {
  const std::size_t n = c.size();
  const std::size_t m = points.size();
  StartOutcome out;
  Residuals cur;
  compute_residuals(s, c, points, cur);
  out.history.push_back(cur.mse);
  double damping = kInitialDamping;
  std::vector<double> jac(m * n);
  std::vector<double> plus(n), minus(n), step, trial(n);
  Residuals cand;
  for (int it = 0; it < budget.max_iterations; ++it) {
    if (cur.mse == 0.0) {
      out.stopped_early = true;
      break;
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double h = kFdStep * std::max(1.0, std::abs(c[j]));
      plus = c;
      minus = c;
      plus[j] += h;
      minus[j] -= h;
      for (std::size_t i = 0; i < m; ++i) {
        double d = 0.0;
        if (!cur.fault[i]) {
          const auto rp = residual_at(s, plus, points[i]);
          const auto rm = residual_at(s, minus, points[i]);
          if (rp && rm) d = (*rp - *rm) / (2.0 * h);
        }
        jac[i * n + j] = std::isfinite(d) ? d : 0.0;
      }
    }
    std::vector<double> jtj(n * n, 0.0), jtr(n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      const double* row = jac.data() + i * n;
      for (std::size_t a = 0; a < n; ++a) {
        jtr[a] += row[a] * cur.r[i];
        for (std::size_t b = 0; b < n; ++b) jtj[a * n + b] += row[a] * row[b];
      }
    }
    if (std::all_of(jtr.begin(), jtr.end(), [](double v) { return v == 0.0; })) {
      out.stopped_early = true;
      break;
    }
    double max_diag = 0.0;
    for (std::size_t a = 0; a < n; ++a) max_diag = std::max(max_diag, jtj[a * n + a]);
    bool accepted = false;
    while (damping <= kMaxDamping) {
      std::vector<double> lhs = jtj;
      for (std::size_t a = 0; a < n; ++a) {
        lhs[a * n + a] += damping * std::max(jtj[a * n + a], 1e-12 * max_diag + 1e-300);
      }
      std::vector<double> rhs(n);
      for (std::size_t a = 0; a < n; ++a) rhs[a] = -jtr[a];
      if (solve(lhs, rhs, n, step)) {
        for (std::size_t a = 0; a < n; ++a) trial[a] = c[a] + step[a];
        if (std::all_of(trial.begin(), trial.end(), [](double v) { return std::isfinite(v); })) {
          compute_residuals(s, trial, points, cand);
          if (cand.mse < cur.mse) {
            accepted = true;
            break;
          }
        }
      }
      damping *= 10.0;
    }
    if (!accepted) {
      out.stopped_early = true;
      break;
    }
    const double improvement = cur.mse - cand.mse;
    c = trial;
    std::swap(cur, cand);
    out.history.push_back(cur.mse);
    damping = std::max(damping / 10.0, 1e-12);
    if (improvement < budget.tolerance) {
      out.stopped_early = true;
      break;
    }
  }
  out.constants = std::move(c);
  out.mse = cur.mse;
  return out;
}

}  // namespace

double fit_objective(const Skeleton& skeleton, std::span<const double> constants, std::span<const Point> points,
                     std::size_t* faulted) {
  if (points.empty()) throw std::invalid_argument("fit_objective needs at least one point");
  Residuals r;
  compute_residuals(skeleton, constants, points, r);
  if (faulted) *faulted = static_cast<std::size_t>(std::count(r.fault.begin(), r.fault.end(), 1));
  return r.mse;
}

FitResult fit_constants(const Skeleton& skeleton, std::span<const Point> points, const FitBudget& budget,
                        std::uint64_t seed) {
  if (points.empty()) throw std::invalid_argument("fit_constants needs at least one point");
  if (budget.restarts < 0 || budget.max_iterations < 0) throw std::invalid_argument("negative fit budget");
  const auto n = static_cast<std::size_t>(skeleton.placeholder_count());
  if (n == 0) {
    std::size_t faulted = 0;
    const double mse = fit_objective(skeleton, {}, points, &faulted);
    return FitResult{substitute(skeleton, {}), {}, mse, true, 0, faulted, {}};
  }
  std::optional<StartOutcome> best;
  std::vector<std::vector<double>> histories;
  for (int k = 0; k <= budget.restarts; ++k) {
    std::vector<double> start(n, 1.0);
    if (k > 0) {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
      for (double& v : start) v = rng.uniform(kStartLo, kStartHi);
    }
    StartOutcome o = refine(skeleton, std::move(start), points, budget);
    if (budget.record_history) histories.push_back(o.history);
    if (!best || o.mse < best->mse) best = std::move(o);
  }
  std::size_t faulted = 0;
  const double mse = fit_objective(skeleton, best->constants, points, &faulted);
  FitResult result{substitute(skeleton, best->constants), best->constants, mse, false, budget.restarts + 1, faulted,
                   std::move(histories)};
  result.converged = best->stopped_early && faulted == 0 && std::isfinite(mse);
  return result;
}

}  // namespace symkfcv
