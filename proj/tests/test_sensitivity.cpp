// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <random>

#include "bglab/sensitivity.hpp"
#include "support.hpp"

using namespace bglab;
using bglab::testing::kMiniOracles;
using bglab::testing::mini_oracle;
using bglab::testing::random_model;
using bglab::testing::tiny_config;

namespace {

// Forward KL of the teacher's scheduled distribution against one logits row.
double reference_fkl(const StateSpec& st, const Eigen::VectorXd& logits) {
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  double s = 0.0;
  for (std::size_t i = 0; i < st.candidates.size(); ++i) {
    s += st.probs[i] * (std::log(st.probs[i]) - (logits[st.candidates[i]] - lse));
  }
  return s;
}

// Expected loss from position u to the end, given inputs = [BOS, y_0..y_{u-1}],
// by plain recursion over the teacher's candidates.
double reference_tail(const Model<double>& model, const OracleSpec& spec, std::vector<Token>& inputs, int u) {
  const int L = spec.template_length();
  const RowMat<double> logits = forward_logits(model, inputs);
  const Eigen::VectorXd row = logits.row(u).transpose();
  double total = reference_fkl(spec.schedule[u], row);
  if (u == L - 1) return total;
  const auto& st = spec.schedule[u];
  for (std::size_t i = 0; i < st.candidates.size(); ++i) {
    inputs.push_back(st.candidates[i]);
    total += st.probs[i] * reference_tail(model, spec, inputs, u + 1);
    inputs.pop_back();
  }
  return total;
}

double reference_q(const Model<double>& model, const OracleSpec& spec, const Example& ex, int t, Token a) {
  if (t == spec.template_length() - 1) return 0.0;
  std::vector<Token> inputs{kBos};
  inputs.insert(inputs.end(), ex.tokens.begin(), ex.tokens.begin() + t);
  inputs.push_back(a);
  return reference_tail(model, spec, inputs, t + 1);
}

std::vector<Example> sample_examples(const OracleSpec& spec, int n, std::uint64_t seed) {
  std::vector<Example> out;
  for (int i = 0; i < n; ++i) out.push_back(sample_example(spec, seed + i));
  return out;
}

KappaTable synthetic_table(int examples, int length, std::uint64_t seed) {
  KappaTable t;
  t.domain = Domain::Math;
  t.template_length = length;
  t.examples = examples;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int e = 0; e < examples; ++e) {
    for (int p = 0; p < length; ++p) {
      StateKappa s;
      s.example = e;
      s.position = p;
      s.kappa_state = p == length - 1 ? 0.0 : n(rng);
      s.kappa_state_abs = std::abs(s.kappa_state) + 1.0;
      t.states.push_back(s);
    }
  }
  return t;
}

void check_table_invariants(const OracleSpec& spec, const KappaTable& table) {
  const int L = spec.template_length();
  REQUIRE(table.states.size() == static_cast<std::size_t>(table.examples * L));
  for (const auto& s : table.states) {
    const auto& st = spec.schedule[s.position];
    double centered = 0.0;
    for (std::size_t i = 0; i < st.candidates.size(); ++i) centered += st.probs[i] * s.kappa[eval_index(st.candidates[i])];
    CHECK(std::abs(centered) < 1e-9);
    if (s.position == L - 1) {
      for (double k : s.kappa) CHECK(k == 0.0);
    }
    if (!spec.is_choice(s.position)) CHECK(s.kappa[eval_index(st.candidates[0])] == 0.0);
  }
}

}  // namespace

TEST_CASE("mini oracles are well formed") {
  for (int v = 0; v < kMiniOracles; ++v) {
    const auto spec = mini_oracle(v);
    CHECK(spec.template_length() <= 8);
    CHECK(spec.decision_positions.size() <= 3);
    for (const auto& st : spec.schedule) CHECK(st.candidates.size() <= 3);
  }
}

TEST_CASE("brute force matches an independent recursion") {
  for (int v = 0; v < kMiniOracles; ++v) {
    CAPTURE(v);
    const auto spec = mini_oracle(v);
    const auto model = random_model<double>(tiny_config(), 100 + v);
    const auto ex = sample_example(spec, 7);
    for (int t = 0; t < spec.template_length(); ++t) {
      for (Token a : {Token{2}, Token{20}, spec.schedule[t].candidates[0], Token{63}}) {
        const auto bf = brute_force_q(model, spec, ex, t, a);
        CHECK(std::abs(bf.q - reference_q(model, spec, ex, t, a)) < 1e-12);
        CHECK(std::abs(bf.total_path_probability - 1.0) < 1e-12);
      }
    }
  }
}

TEST_CASE("exact kappa matches brute force on mini oracles") {
  for (int v = 0; v < kMiniOracles; ++v) {
    CAPTURE(v);
    const auto spec = mini_oracle(v);
    const auto model = random_model<double>(tiny_config(), 200 + v);
    const auto examples = sample_examples(spec, 3, 50);
    const auto table = build_kappa_table(model, spec, std::span<const Example>(examples), KappaSettings{});
    check_table_invariants(spec, table);
    double worst = 0.0;
    for (const auto& s : table.states) {
      std::vector<double> q(kEvalActions);
      for (int a = 0; a < kEvalActions; ++a) q[a] = brute_force_q(model, spec, examples[s.example], s.position, eval_token(a)).q;
      const auto ref = make_state_kappa(spec, s.example, s.position, s.token, q, 0.0);
      for (int a = 0; a < kEvalActions; ++a) {
        worst = std::max(worst, std::abs(ref.kappa[a] - s.kappa[a]));
        worst = std::max(worst, std::abs(ref.q[a] - s.q[a]));
      }
      CHECK(s.error_bound == 0.0);
    }
    CHECK(worst < 1e-9);
  }
}

TEST_CASE("random Q queries agree with brute force") {
  std::mt19937_64 rng(9);
  for (int i = 0; i < 100; ++i) {
    const int v = static_cast<int>(rng() % kMiniOracles);
    const auto spec = mini_oracle(v);
    const auto model = random_model<double>(tiny_config(), 300 + v);
    const auto ex = sample_example(spec, rng());
    const int t = static_cast<int>(rng() % spec.template_length());
    const Token a = eval_token(static_cast<int>(rng() % kEvalActions));
    CHECK(std::abs(q_value(model, spec, ex, t, a) - brute_force_q(model, spec, ex, t, a).q) < 1e-9);
  }
}

TEST_CASE("single-precision student stays close to the double reference") {
  const auto spec = mini_oracle(1);
  const auto md = random_model<double>(tiny_config(), 400);
  const auto mf = cast_model<float>(md);
  const auto ex = sample_example(spec, 3);
  for (int t = 0; t < spec.template_length(); ++t) {
    const double qd = q_value(md, spec, ex, t, Token{40});
    CHECK(std::abs(q_value(mf, spec, ex, t, Token{40}) - qd) < 1e-4 * std::max(1.0, std::abs(qd)));
  }
}

TEST_CASE("single-path tail equals the sum of step losses") {
  const auto spec = mini_oracle(2);  // decision at 3, then one fixed step
  const auto model = random_model<double>(tiny_config(), 500);
  const auto ex = sample_example(spec, 1);
  const int t = 3;
  const Token a = 34;
  std::vector<Token> inputs{kBos};
  inputs.insert(inputs.end(), ex.tokens.begin(), ex.tokens.begin() + t);
  inputs.push_back(a);
  const RowMat<double> logits = forward_logits(model, inputs);
  const double manual = reference_fkl(spec.schedule[4], logits.row(4).transpose());
  CHECK(std::abs(q_value(model, spec, ex, t, a) - manual) < 1e-12);
  CHECK(brute_force_q(model, spec, ex, t, a).paths == 1);
}

TEST_CASE("kappa scales with the step loss") {
  const auto spec = mini_oracle(0);
  const auto model = random_model<double>(tiny_config(), 600);
  const auto ex = sample_example(spec, 2);
  const StepLoss base = make_step_loss(StepLossKind::ForwardKL);
  const StepLoss doubled = [&](const StateSpec& st, std::span<const double> z) { return 2.5 * base(st, z); };
  const auto k1 = kappa_for_state(model, spec, ex, 0, 1, KappaSettings{}, base);
  const auto k2 = kappa_for_state(model, spec, ex, 0, 1, KappaSettings{}, doubled);
  for (int a = 0; a < kEvalActions; ++a) CHECK(std::abs(k2.kappa[a] - 2.5 * k1.kappa[a]) < 1e-9);
  CHECK(std::abs(k2.kappa_state - 2.5 * k1.kappa_state) < 1e-8);
}

TEST_CASE("cross-entropy step loss differs from forward KL by the teacher entropy") {
  const auto spec = mini_oracle(1);
  const auto model = random_model<double>(tiny_config(), 700);
  const auto ex = sample_example(spec, 4);
  KappaSettings ce;
  ce.loss = StepLossKind::CrossEntropy;
  const auto a = kappa_for_state(model, spec, ex, 0, 2, KappaSettings{});
  const auto b = kappa_for_state(model, spec, ex, 0, 2, ce);
  // The tail entropy does not depend on the forced action, so kappa agrees.
  for (int i = 0; i < kEvalActions; ++i) CHECK(std::abs(a.kappa[i] - b.kappa[i]) < 1e-9);
  CHECK(b.baseline > a.baseline);
}

TEST_CASE("pruned kappa stays within its error bound") {
  for (int v = 0; v < kMiniOracles; ++v) {
    CAPTURE(v);
    const auto spec = mini_oracle(v);
    const auto model = random_model<double>(tiny_config(), 800 + v);
    const auto examples = sample_examples(spec, 2, 60);
    const auto exact = build_kappa_table(model, spec, std::span<const Example>(examples), KappaSettings{});
    for (double eps : {1e-3, 1e-2, 0.05}) {
      KappaSettings s;
      s.prune_eps = eps;
      const auto pruned = build_kappa_table(model, spec, std::span<const Example>(examples), s);
      check_table_invariants(spec, pruned);
      double widest = 0.0;
      for (const auto& st : pruned.states) widest = std::max(widest, st.error_bound);
      if (v == 3) CHECK(widest > 0.0);  // rare branches were dropped
      for (std::size_t i = 0; i < exact.states.size(); ++i) {
        const auto& e = exact.states[i];
        const auto& p = pruned.states[i];
        for (int a = 0; a < kEvalActions; ++a) {
          CHECK(std::abs(p.q[a] - e.q[a]) <= p.error_bound + 1e-12);
          CHECK(std::abs(p.kappa[a] - e.kappa[a]) <= p.error_bound + 1e-12);
        }
      }
    }
  }
}

TEST_CASE("step loss bound holds on random inputs") {
  const auto model = random_model<double>(tiny_config(), 900);
  const double bound = step_loss_bound(model);
  const double zmax = logit_magnitude_bound(model);
  const auto spec = mini_oracle(1);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) {
    std::vector<Token> inputs{kBos};
    for (int k = 0; k < 8; ++k) inputs.push_back(static_cast<Token>(rng() % kVocabSize));
    const RowMat<double> logits = forward_logits(model, inputs);
    CHECK(logits.cwiseAbs().maxCoeff() <= zmax);
    for (int u = 0; u < spec.template_length(); ++u) {
      CHECK(reference_fkl(spec.schedule[u], logits.row(u).transpose()) <= bound);
    }
  }
}

TEST_CASE("query validation") {
  const auto spec = mini_oracle(0);
  const auto model = random_model<double>(tiny_config(), 1);
  const auto ex = sample_example(spec, 1);
  CHECK_THROWS_AS(q_value(model, spec, ex, 0, kBos), UsageError);
  CHECK_THROWS_AS(q_value(model, spec, ex, 6, Token{5}), UsageError);
  CHECK_THROWS_AS(make_state_kappa(spec, 0, 0, 10, std::vector<double>(3), 0.0), UsageError);
  KappaSettings s;
  s.prune_eps = 1.0;
  CHECK_THROWS_AS(s.validate(), UsageError);
}

TEST_CASE("shared prefixes give identical rows") {
  const auto spec = mini_oracle(1);
  const auto model = random_model<double>(tiny_config(), 1000);
  const auto ex = sample_example(spec, 11);
  const std::vector<Example> same{ex, ex, sample_example(spec, 12)};
  const auto table = build_kappa_table(model, spec, std::span<const Example>(same), KappaSettings{});
  for (int p = 0; p < spec.template_length(); ++p) CHECK(table.at(0, p).kappa == table.at(1, p).kappa);
  CHECK(table.at(1, 3).example == 1);
  CHECK(table.at(1, 3).position == 3);
}

TEST_CASE("table callbacks and resume") {
  const auto spec = mini_oracle(0);
  const auto model = random_model<float>(tiny_config(), 1100);
  const auto examples = sample_examples(spec, 4, 70);
  const auto full = build_kappa_table(model, spec, std::span<const Example>(examples), KappaSettings{});

  std::vector<StateKappa> emitted;
  TableCallbacks cb;
  cb.on_state = [&](const StateKappa& s) { emitted.push_back(s); };
  build_kappa_table(model, spec, std::span<const Example>(examples), KappaSettings{}, cb);
  CHECK(emitted.size() == full.states.size());

  // Resume from the first half of the emitted states.
  std::vector<StateKappa> done(emitted.begin(), emitted.begin() + emitted.size() / 2);
  int fresh = 0;
  TableCallbacks resume;
  resume.skip = [&](int e, int p) {
    for (const auto& s : done) {
      if (s.example == e && s.position == p) return true;
    }
    return false;
  };
  resume.on_state = [&](const StateKappa&) { ++fresh; };
  const auto resumed = build_kappa_table(model, spec, std::span<const Example>(examples), KappaSettings{}, resume, done);
  CHECK(fresh == static_cast<int>(full.states.size() - done.size()));
  REQUIRE(resumed.states.size() == full.states.size());
  for (std::size_t i = 0; i < full.states.size(); ++i) {
    CHECK(resumed.states[i].example == full.states[i].example);
    CHECK(resumed.states[i].position == full.states[i].position);
    CHECK(resumed.states[i].kappa == full.states[i].kappa);
  }
}

TEST_CASE("thread count does not change the table") {
  const auto spec = mini_oracle(1);
  const auto model = random_model<float>(tiny_config(), 1200);
  const auto examples = sample_examples(spec, 5, 80);
  KappaSettings s;
  s.max_rows = 62;
  setenv("BGLAB_THREADS", "1", 1);
  const auto one = build_kappa_table(model, spec, std::span<const Example>(examples), s);
  setenv("BGLAB_THREADS", "3", 1);
  const auto three = build_kappa_table(model, spec, std::span<const Example>(examples), s);
  unsetenv("BGLAB_THREADS");
  for (std::size_t i = 0; i < one.states.size(); ++i) CHECK(one.states[i].kappa == three.states[i].kappa);
}

TEST_CASE("node budget") {
  const auto spec = mini_oracle(1);
  const auto model = random_model<float>(tiny_config(), 1300);
  const auto examples = sample_examples(spec, 2, 90);
  KappaSettings s;
  s.node_budget = 10;
  CHECK_THROWS_AS(build_kappa_table(model, spec, std::span<const Example>(examples), s), BudgetError);
  s.node_budget = 1000000;
  CHECK_NOTHROW(build_kappa_table(model, spec, std::span<const Example>(examples), s));
}

TEST_CASE("production-domain states respect the invariants") {
  const auto spec = build_oracle(Domain::Dialogue);
  const auto model = random_model<float>(tiny_config(40), 1400, 0.2);
  const auto ex = sample_example(spec, 5);
  KappaSettings s;
  s.prune_eps = 1e-2;
  for (int t : {spec.template_length() - 1, spec.template_length() - 4, spec.decision_positions.back()}) {
    const auto k = kappa_for_state(model, spec, ex, 0, t, s);
    const auto& st = spec.schedule[t];
    double centered = 0.0;
    for (std::size_t i = 0; i < st.candidates.size(); ++i) centered += st.probs[i] * k.kappa[eval_index(st.candidates[i])];
    CHECK(std::abs(centered) < 1e-9);
  }
}

TEST_CASE("partition sizes") {
  const auto table = synthetic_table(30, 43, 1);
  const auto p = partition_bridge_garden(table);
  CHECK(p.eligible == 1260);
  CHECK(p.bridge.size() == 252);
  CHECK(p.garden.size() == 252);
  const auto q = partition_bridge_garden(table, kPartitionFraction, false, false);
  CHECK(q.eligible == 1290);
  CHECK(q.bridge.size() == 258);
  CHECK(q.garden.size() == 258);

  for (std::size_t i = 1; i < p.bridge.size(); ++i) {
    CHECK(table.states[p.bridge[i - 1]].kappa_state >= table.states[p.bridge[i]].kappa_state);
  }
  CHECK(table.states[p.bridge.back()].kappa_state >= table.states[p.garden.front()].kappa_state);
  for (std::size_t i : p.bridge) CHECK(table.states[i].position != 42);
  for (std::size_t i : p.garden) CHECK(table.states[i].position != 42);

  const auto a = partition_bridge_garden(table, kPartitionFraction, true);
  CHECK(table.states[a.bridge.front()].kappa_state_abs >= table.states[a.garden.back()].kappa_state_abs);
}

TEST_CASE("partition ties follow table order") {
  auto table = synthetic_table(2, 10, 2);
  for (auto& s : table.states) s.kappa_state = 1.0;
  const auto p = partition_bridge_garden(table, 0.25);
  REQUIRE(p.eligible == 18);
  REQUIRE(p.bridge.size() == 5);
  CHECK(p.bridge == std::vector<std::size_t>{0, 1, 2, 3, 4});
  CHECK(p.garden.back() == 18);
}

TEST_CASE("partition errors") {
  const auto small = synthetic_table(1, 10, 3);
  CHECK_THROWS_AS(partition_bridge_garden(small), DataError);
  CHECK_NOTHROW(partition_bridge_garden(small, 0.2, false, false));
  const auto table = synthetic_table(3, 10, 3);
  CHECK_THROWS_AS(partition_bridge_garden(table, 0.0), UsageError);
  CHECK_THROWS_AS(partition_bridge_garden(table, 0.6), UsageError);
  CHECK_THROWS_AS(partition_by_scores(table, std::vector<double>(4), 0.2), UsageError);
}

TEST_CASE("common partition ranks by mean kappa") {
  const auto a = synthetic_table(30, 43, 4);
  auto b = synthetic_table(30, 43, 5);
  const KappaTable* one[] = {&a};
  CHECK(common_partition(one).bridge == partition_bridge_garden(a).bridge);
  const KappaTable* both[] = {&a, &b};
  const auto p = common_partition(both);
  std::vector<double> mean;
  for (std::size_t i = 0; i < a.states.size(); ++i) mean.push_back(0.5 * (a.states[i].kappa_state + b.states[i].kappa_state));
  CHECK(p.bridge == partition_by_scores(a, mean, kPartitionFraction).bridge);
  b.states.pop_back();
  CHECK_THROWS_AS(common_partition(both), DataError);
}
