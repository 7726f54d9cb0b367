#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "symkfcv/model.hpp"

namespace testsupport {

struct GradCheck {
  std::size_t parameters = 0;
  std::size_t within = 0;  // relative error < 1e-4
  double max_relative = 0.0;
  double fraction() const { return parameters ? static_cast<double>(within) / static_cast<double>(parameters) : 0.0; }
};

inline symkfcv::ModelConfig micro_config() {
  symkfcv::ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.context = 8;
  cfg.vocab_size = 10;
  cfg.max_points = 6;
  cfg.batch_size = 4;
  return cfg;
}

// Every parameter perturbed away from its structured init so no gradient
// vanishes by symmetry.
inline symkfcv::ModelParams micro_params(std::uint64_t seed) {
  const auto cfg = micro_config();
  symkfcv::ModelParams p(cfg);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (const auto& t : p.layout().tensors) {
    auto v = p.tensor(t.name);
    const bool gain = t.name.ends_with("_gain");
    for (double& x : v) x = gain ? 1.0 + u(rng) : u(rng);
  }
  return p;
}

inline symkfcv::Batch micro_batch(const symkfcv::ModelConfig& cfg) {
  std::vector<symkfcv::Example> ex(3);
  const std::vector<std::vector<int>> tokens = {{3, 7, 5}, {9, 4}, {6, 8, 3, 5, 4}};
  for (std::size_t i = 0; i < ex.size(); ++i) {
    const std::size_t n = 3 + i;
    for (std::size_t p = 0; p < n; ++p) {
      const double x = -1.3 + 0.61 * static_cast<double>(p) + 0.17 * static_cast<double>(i);
      ex[i].features.push_back(x);
      ex[i].features.push_back(std::asinh(std::sin(2.0 * x) + 0.3 * x * static_cast<double>(i)));
    }
    ex[i].point_count = n;
    ex[i].tokens = tokens[i];
  }
  return symkfcv::make_batch(ex, cfg);
}

// Central differences with step h against loss_and_gradient. Relative error is
// |a - n| / max(|a|, |n|, 1e-6).
inline GradCheck gradient_check(double h = 1e-4, std::uint64_t seed = 17) {
  auto params = micro_params(seed);
  const auto batch = micro_batch(params.config());
  std::vector<double> grad(params.values().size());
  symkfcv::loss_and_gradient(params, batch, grad);
  GradCheck out;
  auto values = params.values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double keep = values[i];
    values[i] = keep + h;
    const double up = symkfcv::loss(params, batch);
    values[i] = keep - h;
    const double down = symkfcv::loss(params, batch);
    values[i] = keep;
    const double numeric = (up - down) / (2.0 * h);
    const double rel = std::abs(grad[i] - numeric) / std::max({std::abs(grad[i]), std::abs(numeric), 1e-6});
    ++out.parameters;
    if (rel < 1e-4) ++out.within;
    out.max_relative = std::max(out.max_relative, rel);
  }
  return out;
}

}  // namespace testsupport
