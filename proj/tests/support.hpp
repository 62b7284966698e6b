// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <random>
#include <string>
#include <vector>

#include "bglab/model.hpp"
#include "bglab/oracle.hpp"
#include "bglab/trainer.hpp"

namespace bglab::testing {

inline StateSpec fixed_state(Token token) {
  return {StateKind::Deterministic, "layout", {token}, {1.0}};
}

inline StateSpec choice_state(StateKind kind, std::vector<Token> candidates, std::vector<double> probs) {
  return {kind, "choice", std::move(candidates), std::move(probs)};
}

// Small position-indexed oracles for exhaustive checks. They bypass the
// production-domain validation (candidate counts of 2 or 3).
inline OracleSpec mini_oracle(int variant) {
  OracleSpec spec;
  spec.domain = Domain::Dialogue;
  spec.token_names.resize(kVocabSize);
  for (int v = 0; v < kVocabSize; ++v) spec.token_names[v] = "t" + std::to_string(v);
  auto& s = spec.schedule;
  switch (variant) {
    case 0:  // length 6, two decisions
      s = {fixed_state(10), choice_state(StateKind::HighRisk, {20, 21, 22}, {0.9, 0.05, 0.05}), fixed_state(11),
           choice_state(StateKind::Flexible, {30, 31}, {0.6, 0.4}), fixed_state(12), fixed_state(kEos)};
      break;
    case 1:  // length 8, three decisions
      s = {choice_state(StateKind::Flexible, {40, 41, 42}, {0.5, 0.3, 0.2}), fixed_state(13),
           choice_state(StateKind::HighRisk, {23, 24, 25}, {0.96, 0.02, 0.02}), fixed_state(14),
           fixed_state(15), choice_state(StateKind::Flexible, {32, 33}, {0.55, 0.45}), fixed_state(16),
           fixed_state(kEos)};
      break;
    case 2:  // length 5, decision right before the end
      s = {fixed_state(17), choice_state(StateKind::HighRisk, {26, 27, 28}, {0.7, 0.15, 0.15}), fixed_state(18),
           choice_state(StateKind::Flexible, {34, 35, 36}, {0.4, 0.35, 0.25}), fixed_state(kEos)};
      break;
    default:  // length 7, rare branches for pruning tests
      s = {fixed_state(19), choice_state(StateKind::HighRisk, {43, 44, 45}, {0.998, 0.001, 0.001}),
           choice_state(StateKind::Flexible, {46, 47}, {0.9, 0.1}), fixed_state(50),
           choice_state(StateKind::HighRisk, {48, 49, 51}, {0.99, 0.009, 0.001}), fixed_state(52),
           fixed_state(kEos)};
      break;
  }
  for (int pos = 0; pos < spec.template_length(); ++pos) {
    if (spec.is_choice(pos)) spec.decision_positions.push_back(pos);
  }
  return spec;
}

inline constexpr int kMiniOracles = 4;

inline ModelConfig tiny_config(int max_positions = 12) {
  ModelConfig c;
  c.layers = 2;
  c.width = 16;
  c.heads = 2;
  c.ffn_width = 32;
  c.dropout = 0.0;
  c.max_positions = max_positions;
  return c;
}

// Random parameters with a large spread so the student is far from uniform.
template <class T>
Model<T> random_model(const ModelConfig& config, std::uint64_t seed, double scale = 0.5) {
  Model<T> m = init_model<T>(config, seed);
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::normal_distribution<double> normal(0.0, scale);
  for (auto& p : m.params) p = static_cast<T>(normal(rng));
  return m;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

struct GradCheck {
  double rel_error = 0.0;
  std::size_t checked = 0;
};

// Central differences of the batch objective against the analytic gradient,
// in eval mode. Checks every parameter when max_params covers the model,
// otherwise a seeded random subset. rel_error = |fd - g| / max(|fd|, |g|).
inline GradCheck objective_gradient_check(const Model<double>& model, const OracleSpec& spec,
                                          const ObjectiveConfig& objective, std::span<const Example* const> batch,
                                          long step, std::size_t max_params, std::uint64_t seed, double h = 1e-5) {
  std::vector<double> grad(model.params.size(), 0.0);
  batch_objective(model, spec, objective, batch, step, Mode::Eval, nullptr, std::span<double>(grad));
  std::vector<std::size_t> idx(model.params.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (max_params < idx.size()) {
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(max_params);
  }
  Model<double> probe = model;
  double diff = 0.0, nfd = 0.0, ng = 0.0;
  for (std::size_t i : idx) {
    const double keep = probe.params[i];
    probe.params[i] = keep + h;
    const double up = batch_objective(probe, spec, objective, batch, step, Mode::Eval, nullptr);
    probe.params[i] = keep - h;
    const double down = batch_objective(probe, spec, objective, batch, step, Mode::Eval, nullptr);
    probe.params[i] = keep;
    const double fd = (up - down) / (2.0 * h);
    diff += (fd - grad[i]) * (fd - grad[i]);
    nfd += fd * fd;
    ng += grad[i] * grad[i];
  }
  const double scale = std::max(std::sqrt(std::max(nfd, ng)), 1e-300);
  return {std::sqrt(diff) / scale, idx.size()};
}

}  // namespace bglab::testing
