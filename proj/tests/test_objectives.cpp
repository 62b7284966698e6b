// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>

#include "bglab/objectives.hpp"
#include "support.hpp"

using namespace bglab;
using bglab::testing::objective_gradient_check;

namespace {

const Divergence kDivergences[] = {Divergence::ForwardKL, Divergence::ReverseKL, Divergence::JensenShannon,
                                   Divergence::TotalVariation};

Eigen::VectorXd random_logits(std::mt19937_64& rng, double scale = 2.0) {
  std::normal_distribution<double> n(0.0, scale);
  Eigen::VectorXd z(kVocabSize);
  for (int i = 0; i < kVocabSize; ++i) z[i] = n(rng);
  return z;
}

Eigen::VectorXd random_distribution(std::mt19937_64& rng) { return softmax(random_logits(rng)); }

Eigen::VectorXd teacher_vector(const OracleSpec& spec, int pos) {
  const Distribution d = teacher_distribution(spec, pos);
  return Eigen::Map<const Eigen::VectorXd>(d.data(), kVocabSize);
}

int first_of_kind(const OracleSpec& spec, StateKind kind) {
  for (int p : spec.decision_positions) {
    if (spec.schedule[p].kind == kind) return p;
  }
  return -1;
}

// Logits row for which softmax puts probability p on `target` and spreads
// the rest uniformly.
Eigen::VectorXd logits_with_target_prob(Token target, double p) {
  Eigen::VectorXd z = Eigen::VectorXd::Zero(kVocabSize);
  z[target] = std::log(p * (kVocabSize - 1) / (1.0 - p));
  return z;
}

template <class F>
Eigen::VectorXd numeric_gradient(const Eigen::VectorXd& x, F&& f, double h = 1e-5) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd y = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    y[i] = x[i] + h;
    const double up = f(y);
    y[i] = x[i] - h;
    const double down = f(y);
    y[i] = x[i];
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

double rel_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-300});
}

std::vector<ObjectiveConfig> all_objectives() {
  std::vector<ObjectiveConfig> out;
  for (Divergence d : kDivergences) {
    ObjectiveConfig c;
    c.mode = ObjectiveMode::Soft;
    c.divergence = d;
    out.push_back(c);
  }
  for (ObjectiveMode m : {ObjectiveMode::Hard, ObjectiveMode::HybridStatic, ObjectiveMode::HybridConfidence,
                          ObjectiveMode::HybridEntropy, ObjectiveMode::HybridCurriculum, ObjectiveMode::RiskGuided,
                          ObjectiveMode::CodePerState}) {
    for (Divergence d : kDivergences) {
      if (m == ObjectiveMode::Hard && d != Divergence::ForwardKL) continue;
      ObjectiveConfig c;
      c.mode = m;
      c.divergence = d;
      c.lambda = 0.3;
      c.alpha = 0.1;
      c.warmup_steps = 10;
      out.push_back(c);
    }
  }
  return out;
}

std::string label(const ObjectiveConfig& c) {
  return std::string(objective_mode_name(c.mode)) + "/" + std::string(divergence_name(c.divergence));
}

}  // namespace

TEST_CASE("hard loss") {
  const Eigen::VectorXd uniform = Eigen::VectorXd::Zero(kVocabSize);
  CHECK(hard_loss(uniform, 7) == doctest::Approx(std::log(64.0)).epsilon(1e-12));
  CHECK(hard_loss(logits_with_target_prob(7, 0.5), 7) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(hard_loss(logits_with_target_prob(7, 1.0 - 1e-9), 7) < 1e-8);
  Eigen::VectorXd big = Eigen::VectorXd::Zero(kVocabSize);
  big[3] = 1000.0;
  CHECK(std::isfinite(hard_loss(big, 4)));
  CHECK(hard_loss(big, 4) == doctest::Approx(1000.0));
}

TEST_CASE("soft loss examples") {
  const auto spec = build_oracle(Domain::Math);
  const Eigen::VectorXd uniform = Eigen::VectorXd::Zero(kVocabSize);
  const Eigen::VectorXd one_hot = teacher_vector(spec, 0);
  CHECK(soft_loss(one_hot, uniform, Divergence::ForwardKL) == doctest::Approx(std::log(64.0)).epsilon(1e-12));
  const int flex = first_of_kind(spec, StateKind::Flexible);
  const Eigen::VectorXd p = teacher_vector(spec, flex);
  CHECK(soft_loss(p, uniform, Divergence::ForwardKL) == doctest::Approx(std::log(64.0) - 1.8018).epsilon(1e-4));
  for (Divergence d : kDivergences) {
    CAPTURE(divergence_name(d));
    // A student that matches the teacher exactly (floored for reverse KL).
    Eigen::VectorXd z = p.unaryExpr([](double v) { return std::log(std::max(v, 1e-300)); });
    CHECK(soft_loss(p, z, d) == doctest::Approx(0.0).epsilon(1e-9).scale(1.0));
  }
}

TEST_CASE("soft forward KL with a one-hot teacher equals the hard loss") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 20; ++i) {
    const Eigen::VectorXd z = random_logits(rng);
    Eigen::VectorXd p = Eigen::VectorXd::Zero(kVocabSize);
    const Token t = static_cast<Token>(2 + i);
    p[t] = 1.0;
    CHECK(soft_loss(p, z, Divergence::ForwardKL) == doctest::Approx(hard_loss(z, t)).epsilon(1e-12));
  }
}

TEST_CASE("divergence properties") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 200; ++i) {
    const Eigen::VectorXd p = random_distribution(rng);
    const Eigen::VectorXd q = random_distribution(rng);
    for (Divergence d : kDivergences) {
      CAPTURE(divergence_name(d));
      CHECK(divergence(d, p, q) >= 0.0);
      CHECK(std::abs(divergence(d, p, p)) < 1e-12);
    }
    CHECK(divergence(Divergence::JensenShannon, p, q) <= std::log(2.0) + 1e-12);
    CHECK(divergence(Divergence::TotalVariation, p, q) <= 1.0 + 1e-12);
    CHECK(divergence(Divergence::JensenShannon, p, q) ==
          doctest::Approx(divergence(Divergence::JensenShannon, q, p)).epsilon(1e-12));
    const Eigen::VectorXd z = q.array().log();
    for (Divergence d : kDivergences) {
      CHECK(soft_loss(p, z, d) == doctest::Approx(divergence(d, p, q)).epsilon(1e-9));
    }
  }
}

TEST_CASE("losses are invariant to a constant logit shift") {
  std::mt19937_64 rng(5);
  const Eigen::VectorXd p = random_distribution(rng);
  const Eigen::VectorXd z = random_logits(rng);
  const Eigen::VectorXd shifted = z.array() + 37.0;
  CHECK(hard_loss(z, 9) == doctest::Approx(hard_loss(shifted, 9)).epsilon(1e-12));
  for (Divergence d : kDivergences) CHECK(soft_loss(p, z, d) == doctest::Approx(soft_loss(p, shifted, d)).epsilon(1e-10));
}

TEST_CASE("loss gradients match finite differences") {
  std::mt19937_64 rng(17);
  const auto spec = build_oracle(Domain::Dialogue);
  for (int i = 0; i < 5; ++i) {
    const Eigen::VectorXd z = random_logits(rng);
    Eigen::VectorXd g;
    hard_loss(z, 12, &g);
    CHECK(rel_error(g, numeric_gradient(z, [](const Eigen::VectorXd& x) { return hard_loss(x, 12); })) < 1e-7);
    for (int pos : {0, first_of_kind(spec, StateKind::HighRisk), first_of_kind(spec, StateKind::Flexible)}) {
      const Eigen::VectorXd p = teacher_vector(spec, pos);
      for (Divergence d : kDivergences) {
        CAPTURE(divergence_name(d));
        soft_loss(p, z, d, &g);
        const auto f = [&](const Eigen::VectorXd& x) { return soft_loss(p, x, d); };
        CHECK(rel_error(g, numeric_gradient(z, f)) < 1e-5);
      }
    }
  }
}

TEST_CASE("hybrid loss is affine in lambda") {
  CHECK(hybrid_loss(0.0, 3.0, 5.0) == 5.0);
  CHECK(hybrid_loss(1.0, 3.0, 5.0) == 3.0);
  CHECK(hybrid_loss(0.25, 3.0, 5.0) == doctest::Approx(4.5).epsilon(1e-15));
}

TEST_CASE("adaptive lambdas") {
  const auto spec = build_oracle(Domain::Dialogue);
  const Eigen::VectorXd uniform = Eigen::VectorXd::Constant(kVocabSize, 1.0 / kVocabSize);
  const Eigen::VectorXd one_hot = teacher_vector(spec, 0);
  const Eigen::VectorXd hr = teacher_vector(spec, first_of_kind(spec, StateKind::HighRisk));
  const Eigen::VectorXd flex = teacher_vector(spec, first_of_kind(spec, StateKind::Flexible));

  CHECK(lambda_confidence(one_hot) == 0.0);
  CHECK(lambda_confidence(uniform) == doctest::Approx(63.0 / 64.0).epsilon(1e-12));
  CHECK(lambda_confidence(hr) == doctest::Approx(0.02).epsilon(1e-12));

  CHECK(lambda_entropy(one_hot) == 0.0);
  CHECK(lambda_entropy(uniform) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(lambda_entropy(flex) == doctest::Approx(0.4333).epsilon(1e-3));

  CHECK(lambda_curriculum(0, 100, 0.8) == 0.0);
  CHECK(lambda_curriculum(50, 100, 0.8) == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(lambda_curriculum(100, 100, 0.8) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(lambda_curriculum(1000, 100, 0.8) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK_THROWS_AS(lambda_curriculum(5, 0, 0.8), UsageError);

  std::mt19937_64 rng(23);
  for (int i = 0; i < 100; ++i) {
    const Eigen::VectorXd p = random_distribution(rng);
    for (double l : {lambda_confidence(p), lambda_entropy(p)}) {
      CHECK(l >= 0.0);
      CHECK(l <= 1.0);
    }
  }
}

TEST_CASE("risk penalty") {
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(kVocabSize);
  const RiskPenalty r = risk_penalty(zero, zero, 5, 0.1);
  CHECK(r.delta == doctest::Approx(std::log(64.0)).epsilon(1e-12));
  CHECK(r.value == doctest::Approx(0.4324).epsilon(1e-3));
  CHECK(r.value == doctest::Approx(0.1 / 4.0 * std::log(64.0) * std::log(64.0)).epsilon(1e-12));

  Eigen::VectorXd extreme = Eigen::VectorXd::Constant(kVocabSize, -50.0);
  extreme[5] = 50.0;
  const RiskPenalty e = risk_penalty(extreme, -extreme, 5, 0.1);
  CHECK(std::isfinite(e.value));
  CHECK(std::isfinite(e.delta));

  std::mt19937_64 rng(29);
  const Eigen::VectorXd a = random_logits(rng);
  const Eigen::VectorXd b = random_logits(rng);
  Eigen::VectorXd ga, gb;
  risk_penalty(a, b, 9, 0.3, &ga, &gb);
  CHECK(rel_error(ga, numeric_gradient(a, [&](const Eigen::VectorXd& x) { return risk_penalty(x, b, 9, 0.3).value; })) <
        1e-7);
  CHECK(rel_error(gb, numeric_gradient(b, [&](const Eigen::VectorXd& x) { return risk_penalty(a, x, 9, 0.3).value; })) <
        1e-7);
}

TEST_CASE("code per-state weights") {
  const auto spec = build_oracle(Domain::Code);
  CHECK(code_per_state_weight(spec, first_of_kind(spec, StateKind::HighRisk), 0.1) == 0.0);
  CHECK(code_per_state_weight(spec, 0, 0.1) == 0.0);
  CHECK(code_per_state_weight(spec, first_of_kind(spec, StateKind::Flexible), 0.1) ==
        doctest::Approx(0.0867).epsilon(1e-3));
  CHECK_THROWS_AS(code_per_state_weight(build_oracle(Domain::Math), 3, 0.1), UsageError);
  CHECK_THROWS_AS(code_per_state_weight(spec, 47, 0.1), UsageError);
}

TEST_CASE("objective names round-trip") {
  for (const auto& c : all_objectives()) CHECK(parse_objective_mode(objective_mode_name(c.mode)) == c.mode);
  for (Divergence d : kDivergences) CHECK(parse_divergence(divergence_name(d)) == d);
  CHECK_THROWS_AS(parse_objective_mode("magic"), UsageError);
  ObjectiveConfig c;
  c.lambda = 1.5;
  CHECK_THROWS_AS(c.validate(), UsageError);
}

TEST_CASE("sequence loss gradient for every objective") {
  std::mt19937_64 rng(31);
  for (const auto& config : all_objectives()) {
    CAPTURE(label(config));
    const auto spec = build_oracle(config.mode == ObjectiveMode::CodePerState ? Domain::Code : Domain::Math);
    const auto ex = sample_example(spec, 4);
    const int rows = spec.template_length() + (needs_lookahead_row(config) ? 1 : 0);
    Eigen::MatrixXd z(rows, kVocabSize);
    for (int r = 0; r < rows; ++r) z.row(r) = random_logits(rng).transpose();
    Eigen::MatrixXd g;
    sequence_loss(config, spec, ex.tokens, z, 4, &g);
    Eigen::MatrixXd fd(rows, kVocabSize);
    Eigen::MatrixXd y = z;
    const double h = 1e-6;
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < kVocabSize; ++c) {
        y(r, c) = z(r, c) + h;
        const double up = sequence_loss(config, spec, ex.tokens, y, 4, nullptr);
        y(r, c) = z(r, c) - h;
        const double down = sequence_loss(config, spec, ex.tokens, y, 4, nullptr);
        y(r, c) = z(r, c);
        fd(r, c) = (up - down) / (2.0 * h);
      }
    }
    CHECK(rel_error(g, fd) < 1e-6);
  }
}

TEST_CASE("sequence loss rejects mismatched shapes") {
  const auto spec = build_oracle(Domain::Math);
  const auto ex = sample_example(spec, 1);
  ObjectiveConfig c;
  c.mode = ObjectiveMode::RiskGuided;
  const Eigen::MatrixXd z = Eigen::MatrixXd::Zero(spec.template_length(), kVocabSize);
  CHECK_THROWS_AS(sequence_loss(c, spec, ex.tokens, z, 0, nullptr), UsageError);
  c.mode = ObjectiveMode::Hard;
  CHECK_NOTHROW(sequence_loss(c, spec, ex.tokens, z, 0, nullptr));
  CHECK(sequence_loss(c, spec, ex.tokens, z, 0, nullptr) == doctest::Approx(std::log(64.0)).epsilon(1e-12));
}

TEST_CASE("model-level gradients for every objective") {
  std::mt19937_64 rng(37);
  for (const auto& config : all_objectives()) {
    CAPTURE(label(config));
    const auto spec = build_oracle(config.mode == ObjectiveMode::CodePerState ? Domain::Code : Domain::Math);
    const auto model = bglab::testing::random_model<double>(bglab::testing::tiny_config(48), 41, 0.3);
    const auto a = sample_example(spec, 1);
    const auto b = sample_example(spec, 2);
    const Example* batch[] = {&a, &b};
    const auto r = objective_gradient_check(model, spec, config, batch, 4, 150, rng());
    CHECK(r.rel_error < 1e-4);
  }
}

TEST_CASE("hard loss on teacher samples is an unbiased estimate of the cross-entropy") {
  const auto spec = build_oracle(Domain::Dialogue);
  const int pos = first_of_kind(spec, StateKind::Flexible);
  const auto& st = spec.schedule[pos];
  std::mt19937_64 rng(43);
  const Eigen::VectorXd z = random_logits(rng, 1.0);
  const Eigen::VectorXd p = teacher_vector(spec, pos);
  double expected = 0.0;
  for (int v = 0; v < kVocabSize; ++v) {
    if (p[v] > 0.0) expected += p[v] * hard_loss(z, v);
  }
  std::discrete_distribution<int> pick(st.probs.begin(), st.probs.end());
  const int n = 100000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double l = hard_loss(z, st.candidates[pick(rng)]);
    sum += l;
    sq += l * l;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sq / n - mean * mean) / n);
  CHECK(std::abs(mean - expected) < 4.0 * se);
  CHECK(expected == doctest::Approx(soft_loss(p, z, Divergence::ForwardKL) + entropy(p)).epsilon(1e-12));
}
