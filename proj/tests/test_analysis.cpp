// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "bglab/analysis.hpp"
#include "support.hpp"

using namespace bglab;
using bglab::testing::mini_oracle;
using bglab::testing::random_model;
using bglab::testing::tiny_config;

namespace {

std::vector<Example> sample_examples(const OracleSpec& spec, int n, std::uint64_t seed) {
  std::vector<Example> out;
  for (int i = 0; i < n; ++i) out.push_back(sample_example(spec, seed + i));
  return out;
}

// Reference regional contribution computed state by state.
double manual_region(const KappaTable& table, const std::vector<std::size_t>& region, const Eigen::MatrixXd& student,
                     const Eigen::MatrixXd& teacher) {
  double total = 0.0;
  for (std::size_t i : region) {
    for (int a = 0; a < kEvalActions; ++a) {
      const Token v = eval_token(a);
      total += std::abs(table.states[i].kappa[a]) * std::abs(student(i, v) - teacher(i, v));
    }
  }
  return total / static_cast<double>(region.size());
}

struct Fixture {
  OracleSpec spec = build_oracle(Domain::Dialogue);
  Model<double> model = random_model<double>(tiny_config(40), 77, 0.2);
  std::vector<Example> examples = sample_examples(spec, 2, 500);
  KappaTable table;
  Eigen::MatrixXd student, teacher;

  Fixture() {
    KappaSettings s;
    s.prune_eps = 1e-2;
    table = build_kappa_table(model, spec, std::span<const Example>(examples), s);
    student = state_distributions(ModelPolicy<double>(model), spec, examples);
    teacher = teacher_state_distributions(spec, 2);
  }
};

}  // namespace

TEST_CASE("spearman") {
  const std::vector<double> a{1, 2, 3, 4, 5};
  const std::vector<double> rev{5, 4, 3, 2, 1};
  CHECK(spearman(a, a) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(spearman(a, rev) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(spearman(std::vector<double>{1, 2, 3, 4}, std::vector<double>{1, 3, 2, 4}) ==
        doctest::Approx(0.8).epsilon(1e-15));
  CHECK(average_ranks(std::vector<double>{10, 20, 20, 30}) == std::vector<double>{1, 2.5, 2.5, 4});

  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  std::vector<double> x(50), y(50);
  for (int i = 0; i < 50; ++i) {
    x[i] = n(rng);
    y[i] = x[i] + n(rng);
  }
  const double rho = spearman(x, y);
  CHECK(rho >= -1.0);
  CHECK(rho <= 1.0);
  std::vector<double> fx(50), fy(50);
  for (int i = 0; i < 50; ++i) {
    fx[i] = std::exp(3.0 * x[i]);
    fy[i] = y[i] * y[i] * y[i] - 7.0;
  }
  CHECK(spearman(fx, fy) == doctest::Approx(rho).epsilon(1e-12));

  CHECK_THROWS_AS(spearman(a, std::vector<double>{1, 2}), UsageError);
  CHECK_THROWS_AS(spearman(std::vector<double>{1, 2}, std::vector<double>{1, 2}), UsageError);
  CHECK_THROWS_AS(spearman(a, std::vector<double>(5, 2.0)), UsageError);
  CHECK_THROWS_AS(spearman(a, std::vector<double>{1, 2, std::numeric_limits<double>::quiet_NaN(), 4, 5}), UsageError);
}

TEST_CASE("teacher policy has zero exposure bias") {
  const auto spec = build_oracle(Domain::Math);
  const auto examples = sample_examples(spec, 30, 1);
  const TeacherPolicy teacher(spec);
  const auto r = exposure_bias(teacher, spec, examples, kReportRepeats, 5);
  CHECK(r.repeats == 30);
  CHECK(r.per_repeat.size() == 30);
  CHECK(std::abs(r.eb) <= 3.0 * r.se + 1e-12);
  CHECK(std::abs(r.tf_loss) < 1e-12);
  CHECK(std::abs(teacher_forced_loss(teacher, spec, examples)) < 1e-12);
  CHECK_THROWS_AS(exposure_bias(teacher, spec, examples, 0, 5), UsageError);
}

TEST_CASE("exposure bias of a student") {
  const auto spec = build_oracle(Domain::Math);
  const auto examples = sample_examples(spec, 30, 2);
  const auto model = random_model<float>(tiny_config(44), 3, 0.3);
  const ModelPolicy<float> policy(model);
  const auto r = exposure_bias(policy, spec, examples, 20, 9);
  CHECK(r.eb == r.rollout_loss - r.tf_loss);
  CHECK(r.tf_loss == doctest::Approx(teacher_forced_loss(policy, spec, examples)).epsilon(1e-12));
  double mean = 0.0;
  for (double e : r.per_repeat) mean += e;
  CHECK(mean / 20.0 == doctest::Approx(r.eb).epsilon(1e-9));

  const auto again = exposure_bias(policy, spec, examples, 20, 9);
  CHECK(again.eb == r.eb);
  const auto small_batches = exposure_bias(policy, spec, examples, 20, 9, 7);
  CHECK(small_batches.eb == doctest::Approx(r.eb).epsilon(1e-6));
  const auto other_seed = exposure_bias(policy, spec, examples, 20, 10);
  CHECK(other_seed.eb != r.eb);
}

TEST_CASE("exposure bias standard error shrinks with repeats") {
  const auto spec = build_oracle(Domain::Dialogue);
  const auto examples = sample_examples(spec, 30, 3);
  const auto model = random_model<float>(tiny_config(40), 4, 0.3);
  const ModelPolicy<float> policy(model);
  const double se5 = exposure_bias(policy, spec, examples, 5, 1).se;
  const double se20 = exposure_bias(policy, spec, examples, 20, 2).se;
  const double se80 = exposure_bias(policy, spec, examples, 80, 3).se;
  MESSAGE("se at 5/20/80 repeats: " << se5 << " " << se20 << " " << se80);
  CHECK(se5 > se20);
  CHECK(se20 > se80);
  // Expected ratio 2 per fourfold increase; allow sampling noise in the SE itself.
  CHECK(se5 / se20 == doctest::Approx(2.0).epsilon(0.6));
  CHECK(se20 / se80 == doctest::Approx(2.0).epsilon(0.4));
}

TEST_CASE("state distributions follow the table layout") {
  const auto spec = mini_oracle(1);
  const auto model = random_model<double>(tiny_config(), 5);
  const auto examples = sample_examples(spec, 3, 4);
  const auto s = state_distributions(ModelPolicy<double>(model), spec, examples);
  REQUIRE(s.rows() == 3 * spec.template_length());
  REQUIRE(s.cols() == kVocabSize);
  std::vector<Token> prefix{kBos};
  prefix.insert(prefix.end(), examples[2].tokens.begin(), examples[2].tokens.begin() + 4);
  const Eigen::VectorXd p = student_distribution(model, prefix);
  CHECK((s.row(2 * spec.template_length() + 4).transpose() - p).cwiseAbs().maxCoeff() < 1e-12);
  const auto t = teacher_state_distributions(spec, 3);
  CHECK(t(spec.template_length() + 2, 23) == doctest::Approx(0.96));
}

TEST_CASE("regional contributions") {
  Fixture f;
  const auto part = partition_bridge_garden(f.table);
  const auto r = regional_contributions(f.table, part, f.student, f.teacher);
  CHECK(r.bridge == doctest::Approx(manual_region(f.table, part.bridge, f.student, f.teacher)).epsilon(1e-12));
  CHECK(r.garden == doctest::Approx(manual_region(f.table, part.garden, f.student, f.teacher)).epsilon(1e-12));
  CHECK(r.bridge > 0.0);
  CHECK(r.garden >= 0.0);

  const auto zero = regional_contributions(f.table, part, f.teacher, f.teacher);
  CHECK(zero.bridge == 0.0);
  CHECK(zero.garden == 0.0);

  const Eigen::MatrixXd doubled = f.teacher + 2.0 * (f.student - f.teacher);
  const auto r2 = regional_contributions(f.table, part, doubled, f.teacher);
  CHECK(r2.bridge == doctest::Approx(2.0 * r.bridge).epsilon(1e-12));
  CHECK(r2.garden == doctest::Approx(2.0 * r.garden).epsilon(1e-12));

  const auto via_model = regional_contributions(f.model, f.spec, std::span<const Example>(f.examples), f.table, part);
  CHECK(via_model.bridge == doctest::Approx(r.bridge).epsilon(1e-12));
  const auto other = random_model<double>(tiny_config(40), 78, 0.2);
  CHECK_THROWS_AS(regional_contributions(other, f.spec, std::span<const Example>(f.examples), f.table, part), DataError);
}

TEST_CASE("f bound") {
  Fixture f;
  CHECK(f_bound(f.table, f.teacher, f.teacher, 3.0) == 0.0);
  double manual = 0.0;
  for (std::size_t i = 0; i < f.table.states.size(); ++i) {
    for (int a = 0; a < kEvalActions; ++a) {
      const Token v = eval_token(a);
      manual += f.table.states[i].kappa[a] * std::abs(f.student(i, v) - f.teacher(i, v));
    }
  }
  manual /= static_cast<double>(f.table.states.size());
  CHECK(f_bound(f.table, f.student, f.teacher, 0.0) == doctest::Approx(manual).epsilon(1e-12));
  const double with_c2 = f_bound(f.table, f.student, f.teacher, 0.5);
  double l1sq = 0.0;
  for (Eigen::Index i = 0; i < f.student.rows(); ++i) {
    const double l1 = (f.student.row(i) - f.teacher.row(i)).cwiseAbs().sum();
    l1sq += l1 * l1;
  }
  CHECK(with_c2 == doctest::Approx(manual + 0.5 * l1sq / f.student.rows()).epsilon(1e-12));
  CHECK_THROWS_AS(f_bound(f.table, f.student, f.teacher, -1.0), UsageError);

  CHECK(c2_from_constants(2.0, 0.5, 1.5, 4) == doctest::Approx(2.0 / (2.0 * 0.25) * 1.5 * 12.0));
  CHECK_THROWS_AS(c2_from_constants(1.0, 0.0, 1.0, 4), UsageError);
}

TEST_CASE("f bound with the constructive constant exceeds measured exposure bias") {
  const auto spec = mini_oracle(0);
  const auto model = random_model<double>(tiny_config(), 90, 0.3);
  const auto examples = sample_examples(spec, 20, 30);
  const auto table = build_kappa_table(model, spec, std::span<const Example>(examples), KappaSettings{});
  const ModelPolicy<double> policy(model);
  const auto student = state_distributions(policy, spec, examples);
  const auto teacher = teacher_state_distributions(spec, 20);
  const auto eb = exposure_bias(policy, spec, examples, 200, 4);
  const double beta = student.minCoeff();
  const double c2 = c2_from_constants(step_loss_bound(model), beta, 1.0, spec.template_length());
  const double bound = f_bound(table, student, teacher, c2);
  MESSAGE("eb " << eb.eb << " +- " << eb.se << ", bound " << bound << " (C2 " << c2 << ")");
  CHECK(bound >= eb.eb);
}

TEST_CASE("confidence") {
  auto spec = mini_oracle(0);
  spec.schedule[3].probs = {0.5, 0.5};
  CHECK(confidence(spec, 3) == doctest::Approx(0.0).scale(1.0));
  spec.schedule[1].probs = {1.0 - 2e-9, 1e-9, 1e-9};
  CHECK(confidence(spec, 1) > 0.999999);
  CHECK_THROWS_AS(confidence(spec, 0), UsageError);
  CHECK_THROWS_AS(confidence(spec, 6), UsageError);
  const auto code = build_oracle(Domain::Code);
  const double flex = confidence(code, code.decision_positions[0]);
  CHECK(flex == doctest::Approx(0.1335).epsilon(5e-4));
  CHECK(flex >= 0.0);
}

TEST_CASE("confidence and kappa correlation") {
  const auto spec = build_oracle(Domain::Math);
  KappaTable table;
  table.domain = Domain::Math;
  table.template_length = spec.template_length();
  table.examples = 30;
  for (int e = 0; e < 30; ++e) {
    for (int p = 0; p < spec.template_length(); ++p) {
      StateKappa s;
      s.example = e;
      s.position = p;
      s.kappa_state = spec.is_choice(p) ? 10.0 * confidence(spec, p) + 5.0 : 0.001 * e;
      s.kappa_state_abs = s.kappa_state;
      table.states.push_back(s);
    }
  }
  const auto part = partition_bridge_garden(table);
  const auto r = confidence_kappa_correlation(spec, table, part);
  CHECK(r.choice_states == 180);
  CHECK(r.rho == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.bridge_choice == 180);
  CHECK(r.mean_ct_bridge == doctest::Approx(0.6208).epsilon(1e-3));  // (4 * 0.864 + 2 * 0.134) / 6
  CHECK(r.garden_choice == 0);
  CHECK(std::isnan(r.mean_ct_garden));

  for (auto& s : table.states) {
    if (spec.is_choice(s.position)) s.kappa_state = -s.kappa_state;
  }
  const auto rev = confidence_kappa_correlation(spec, table, partition_bridge_garden(table));
  CHECK(rev.rho == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(rev.garden_choice == 180);

  // Two choice states are too few.
  const auto mini = mini_oracle(0);
  KappaTable one;
  one.domain = mini.domain;
  one.template_length = mini.template_length();
  one.examples = 1;
  for (int p = 0; p < mini.template_length(); ++p) {
    StateKappa s;
    s.position = p;
    s.kappa_state = p;
    one.states.push_back(s);
  }
  CHECK_THROWS_AS(confidence_kappa_correlation(mini, one, Partition{}), DataError);
}
