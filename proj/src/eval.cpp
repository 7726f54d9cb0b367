#include "symkfcv/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "symkfcv/io.hpp"
#include "symkfcv/parallel.hpp"
#include "symkfcv/random.hpp"
#include "symkfcv/vocabulary.hpp"

namespace symkfcv {

namespace {

std::vector<Point> canonical_points(const std::vector<Point>& points) {
  std::vector<Point> out = points;
  std::sort(out.begin(), out.end(), [](const Point& a, const Point& b) {
    if (a.x != b.x) return a.x < b.x;
    return a.y < b.y;
  });
  return out;
}

IndexScore faulted_score(std::size_t ordinal, std::string predicted) {
  IndexScore s;
  s.ordinal = ordinal;
  s.predicted = std::move(predicted);
  s.error = kErrorCeiling;
  s.faulted = true;
  return s;
}

IndexScore fit_and_score(const Skeleton& skeleton, const std::vector<Point>& points, std::size_t ordinal,
                         const FitBudget& budget, std::uint64_t seed) {
  const FitResult fit = fit_constants(skeleton, points, budget, seed);
  const std::string text = print(fit.expression);
  std::vector<double> predicted, target;
  predicted.reserve(points.size());
  target.reserve(points.size());
  for (const auto& p : points) {
    const EvalResult r = evaluate(fit.expression, p.x);
    if (!r.ok()) return faulted_score(ordinal, text);
    predicted.push_back(r.value);
    target.push_back(p.y);
  }
  IndexScore s;
  s.ordinal = ordinal;
  s.predicted = text;
  s.error = relative_squared_error(predicted, target, &s.degenerate_target);
  if (!std::isfinite(s.error)) return faulted_score(ordinal, text);
  return s;
}

std::string ids_text(const std::vector<int>& ids) {
  std::string out = "tokens:";
  for (int id : ids) out += " " + std::to_string(id);
  return out;
}

double clamp_log(double error) {
  if (std::isnan(error)) error = kErrorCeiling;
  return std::log10(std::clamp(error, kErrorFloor, kErrorCeiling));
}

// ---------------------------------------------------------------------------
// SVG

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

std::string svg_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                     const std::vector<Series>& series, bool step) {
  constexpr double W = 640, H = 420, L = 70, R = 160, T = 40, B = 50;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (auto [x, y] : s.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x0 -= 0.5, x1 += 0.5;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << title << "</text>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4, yv = y0 + (y1 - y0) * i / 4;
    o << "<text x=\"" << fixed(px(xv)) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\" font-size=\"11\">"
      << fixed(xv) << "</text>\n";
    o << "<text x=\"" << L - 6 << "\" y=\"" << fixed(py(yv) + 4) << "\" text-anchor=\"end\" font-size=\"11\">"
      << fixed(yv) << "</text>\n";
  }
  o << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\" font-size=\"13\">"
    << xlabel << "</text>\n";
  o << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 16 "
    << (T + H - B) / 2 << ")\">" << ylabel << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* c = colors[i % std::size(colors)];
    o << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t j = 0; j < s.points.size(); ++j) {
      if (step && j > 0) o << fixed(px(s.points[j].first)) << "," << fixed(py(s.points[j - 1].second)) << " ";
      o << fixed(px(s.points[j].first)) << "," << fixed(py(s.points[j].second)) << " ";
    }
    o << "\"/>\n";
    const double ly = T + 16 * static_cast<double>(i);
    o << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 30 << "\" y2=\"" << ly
      << "\" stroke=\"" << c << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << W - R + 35 << "\" y=\"" << ly + 4 << "\" font-size=\"11\">" << s.name << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::vector<Series> loss_series(const LossSummary& summary, const std::string& prefix) {
  std::vector<Series> out;
  auto add = [&](const std::vector<LossRecord>& records, const std::string& tag) {
    Series tr{prefix + tag + "train", {}}, va{prefix + tag + "val", {}};
    for (const auto& r : records) {
      tr.points.emplace_back(r.unit, r.train_loss);
      va.points.emplace_back(r.unit, r.val_loss);
    }
    out.push_back(std::move(tr));
    out.push_back(std::move(va));
  };
  if (!summary.trajectories.empty()) {
    for (std::size_t f = 0; f < summary.trajectories.size(); ++f) {
      add(summary.trajectories[f], "fold " + std::to_string(f + 1) + " ");
    }
  } else {
    add(summary.records, "");
  }
  return out;
}

nlohmann::ordered_json summary_block(const LossSummary& s) {
  nlohmann::ordered_json j;
  j["unit"] = s.unit == LossUnit::Epoch ? "epoch" : "fold";
  j["records"] = s.records.size();
  j["avg_train_loss"] = s.avg_train;
  j["avg_val_loss"] = s.avg_val;
  if (s.representative_fold) j["representative_fold"] = *s.representative_fold;
  return j;
}

}  // namespace

double relative_squared_error(std::span<const double> predicted, std::span<const double> target,
                              bool* degenerate) {
  if (predicted.size() != target.size() || target.empty()) {
    throw std::invalid_argument("relative_squared_error needs equal, non-empty spans");
  }
  double mean = 0.0;
  for (double y : target) mean += y;
  mean /= static_cast<double>(target.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double r = predicted[i] - target[i];
    const double d = target[i] - mean;
    ss_res += r * r;
    ss_tot += d * d;
  }
  const bool flat = !(ss_tot > 0.0);
  if (degenerate) *degenerate = flat;
  if (flat) return ss_res / static_cast<double>(target.size());
  return ss_res / ss_tot;
}

IndexScore score_index(const ModelParams& params, const DatasetIndex& index, std::size_t ordinal,
                       const FitBudget& budget, std::uint64_t seed) {
  const ModelConfig& cfg = params.config();
  const std::vector<Point> points = canonical_points(index.points);
  const std::vector<double> features = point_features(points, cfg);
  const std::size_t n = features.size() / static_cast<std::size_t>(cfg.point_features());
  const std::vector<unsigned char> mask(n, 1);
  const std::vector<double> emb = encode(params, features, mask);
  const std::vector<int> ids = generate(params, emb, cfg.context - 1);
  std::optional<Skeleton> skeleton;
  try {
    skeleton.emplace(detokenize(ids, Vocabulary::standard(cfg.variable_count)));
  } catch (const TokenError&) {
    return faulted_score(ordinal, ids_text(ids));
  }
  return fit_and_score(*skeleton, points, ordinal, budget, seed);
}

IndexScore score_skeleton(const Skeleton& skeleton, const DatasetIndex& index, std::size_t ordinal,
                          const FitBudget& budget, std::uint64_t seed) {
  return fit_and_score(skeleton, canonical_points(index.points), ordinal, budget, seed);
}

std::vector<IndexScore> score_dataset(const ModelParams& params, std::span<const DatasetIndex> dataset,
                                      const FitBudget& budget, std::uint64_t seed) {
  std::vector<IndexScore> out(dataset.size());
  parallel_for(dataset.size(), [&](std::size_t i) {
    out[i] = score_index(params, dataset[i], i, budget, derive_seed(seed, i));
  });
  return out;
}

CumulativeCurve cumulative_curve_from_errors(std::span<const double> errors) {
  if (errors.empty()) throw std::invalid_argument("cumulative curve of no errors");
  std::vector<double> logs;
  logs.reserve(errors.size());
  for (double e : errors) logs.push_back(clamp_log(e));
  std::sort(logs.begin(), logs.end());
  CumulativeCurve curve;
  const double n = static_cast<double>(logs.size());
  for (std::size_t i = 0; i < logs.size(); ++i) {
    if (i + 1 < logs.size() && logs[i + 1] == logs[i]) continue;
    curve.push_back({logs[i], static_cast<double>(i + 1) / n});
  }
  return curve;
}

CumulativeCurve cumulative_curve(std::span<const IndexScore> scores) {
  std::vector<double> errors;
  errors.reserve(scores.size());
  for (const auto& s : scores) errors.push_back(s.faulted ? kErrorCeiling : s.error);
  return cumulative_curve_from_errors(errors);
}

std::string curve_csv(const CumulativeCurve& curve) {
  std::string out = "log_error,cum_freq\n";
  for (const auto& p : curve) out += format_double(p.log_error) + "," + format_double(p.cumulative_frequency) + "\n";
  return out;
}

CumulativeCurve parse_curve_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "log_error,cum_freq") {
    throw std::invalid_argument("curve csv: bad header");
  }
  CumulativeCurve curve;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw std::invalid_argument("curve csv: bad row '" + line + "'");
    try {
      std::size_t used = 0;
      const std::string a = line.substr(0, comma), b = line.substr(comma + 1);
      CurvePoint p;
      p.log_error = std::stod(a, &used);
      if (used != a.size()) throw std::invalid_argument(a);
      p.cumulative_frequency = std::stod(b, &used);
      if (used != b.size()) throw std::invalid_argument(b);
      curve.push_back(p);
    } catch (const std::logic_error&) {
      throw std::invalid_argument("curve csv: bad row '" + line + "'");
    }
  }
  return curve;
}

std::string learning_curve_csv(const LossSummary& summary) {
  if (summary.trajectories.empty()) return loss_csv(summary.records);
  std::string out = "unit";
  std::size_t rows = 0;
  for (std::size_t f = 0; f < summary.trajectories.size(); ++f) {
    const std::string tag = "fold_" + std::to_string(f + 1);
    out += "," + tag + "_train_loss," + tag + "_val_loss";
    rows = std::max(rows, summary.trajectories[f].size());
  }
  out += "\n";
  for (std::size_t r = 0; r < rows; ++r) {
    out += std::to_string(r + 1);
    for (const auto& traj : summary.trajectories) {
      if (r < traj.size()) out += "," + format_double(traj[r].train_loss) + "," + format_double(traj[r].val_loss);
      else out += ",,";
    }
    out += "\n";
  }
  return out;
}

void emit_report(const ReportInputs& inputs, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json report;
  report["error_metric"] = kErrorDefinition;

  const bool both = inputs.baseline && inputs.kfcv;
  auto emit_losses = [&](const LossSummary& s, const std::string& name, const std::string& file) {
    write_file(dir / (file + ".csv"), learning_curve_csv(s));
    report[name] = summary_block(s);
    if (inputs.plots) {
      write_file(dir / (file + ".svg"),
                 svg_plot(name + " learning curve", s.unit == LossUnit::Epoch || !s.trajectories.empty() ? "epoch" : "fold",
                          "loss", loss_series(s, ""), false));
    }
  };
  if (inputs.baseline) emit_losses(*inputs.baseline, "baseline", both ? "learning_curve_baseline" : "learning_curve");
  if (inputs.kfcv) emit_losses(*inputs.kfcv, "kfcv", both ? "learning_curve_kfcv" : "learning_curve");
  if (both) {
    report["relative_improvement_percent"] = relative_improvement(inputs.baseline->avg_val, inputs.kfcv->avg_val);
  }

  if (!inputs.scores.empty()) {
    std::vector<double> errors;
    std::size_t faulted = 0, degenerate = 0;
    std::string rows = "ordinal,error,faulted,predicted\n";
    for (const auto& s : inputs.scores) {
      errors.push_back(s.faulted ? kErrorCeiling : s.error);
      faulted += s.faulted;
      degenerate += s.degenerate_target;
      rows += std::to_string(s.ordinal) + "," + format_double(s.error) + "," + (s.faulted ? "1" : "0") + "," +
              s.predicted + "\n";
    }
    write_file(dir / "scores.csv", rows);
    std::vector<double> sorted = errors;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    nlohmann::ordered_json ev;
    ev["indices"] = n;
    ev["faulted"] = faulted;
    ev["degenerate_targets"] = degenerate;
    ev["median_error"] = median;
    ev["median_log10_error"] = clamp_log(median);
    report["evaluation"] = ev;
  }

  if (inputs.curve) {
    write_file(dir / "cumulative_curve.csv", curve_csv(*inputs.curve));
    report["curve_points"] = inputs.curve->size();
    if (inputs.plots) {
      Series s{"indices", {}};
      for (const auto& p : *inputs.curve) s.points.emplace_back(p.log_error, p.cumulative_frequency);
      write_file(dir / "cumulative_curve.svg",
                 svg_plot("cumulative frequency of log error", "log10 error", "fraction of indices", {s}, true));
    }
  }
  write_file(dir / "report.json", report.dump(2) + "\n");
}

}  // namespace symkfcv
