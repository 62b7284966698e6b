// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#include "bglab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace bglab {

double step_fkl(const StateSpec& teacher, const Eigen::Ref<const Eigen::RowVectorXd>& q) {
  double out = 0.0;
  for (std::size_t i = 0; i < teacher.candidates.size(); ++i) {
    const double p = teacher.probs[i];
    if (p > 0.0) out += p * (std::log(p) - std::log(q(teacher.candidates[i])));
  }
  return out;
}

namespace {

void check_examples(const OracleSpec& spec, std::span<const Example> examples) {
  if (examples.empty()) throw UsageError("no examples to evaluate");
  for (const auto& ex : examples) {
    if (static_cast<int>(ex.tokens.size()) != spec.template_length()) {
      throw DataError("example length does not match the oracle template");
    }
  }
}

// Runs `rows` lock-step rows through a template-length session; feed(u, r)
// picks the token pushed for row r after visiting position u.
template <class Visit, class Feed>
void drive(const Policy& policy, const OracleSpec& spec, int rows, Visit&& visit, Feed&& feed) {
  const int L = spec.template_length();
  auto session = policy.open(rows);
  std::vector<Token> next(rows);
  for (int u = 0; u < L; ++u) {
    const Eigen::MatrixXd& probs = session->distributions();
    visit(u, probs);
    if (u == L - 1) break;
    for (int r = 0; r < rows; ++r) next[r] = feed(u, r, probs);
    session->push(next);
  }
}

}  // namespace

Eigen::MatrixXd state_distributions(const Policy& policy, const OracleSpec& spec, std::span<const Example> examples) {
  check_examples(spec, examples);
  const int L = spec.template_length();
  const int N = static_cast<int>(examples.size());
  Eigen::MatrixXd out(static_cast<Eigen::Index>(N) * L, kVocabSize);
  drive(
      policy, spec, N,
      [&](int u, const Eigen::MatrixXd& probs) {
        for (int e = 0; e < N; ++e) out.row(static_cast<Eigen::Index>(e) * L + u) = probs.row(e);
      },
      [&](int u, int r, const Eigen::MatrixXd&) { return examples[r].tokens[u]; });
  return out;
}

Eigen::MatrixXd teacher_state_distributions(const OracleSpec& spec, int examples) {
  const int L = spec.template_length();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(examples) * L, kVocabSize);
  for (int u = 0; u < L; ++u) {
    const Distribution d = teacher_distribution(spec, u);
    for (int e = 0; e < examples; ++e) {
      for (int a = 0; a < kVocabSize; ++a) out(static_cast<Eigen::Index>(e) * L + u, a) = d[a];
    }
  }
  return out;
}

double teacher_forced_loss(const Policy& policy, const OracleSpec& spec, std::span<const Example> examples) {
  const Eigen::MatrixXd probs = state_distributions(policy, spec, examples);
  const int L = spec.template_length();
  double total = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) total += step_fkl(spec.schedule[i % L], probs.row(i));
  return total / static_cast<double>(probs.rows());
}

ExposureBias exposure_bias(const Policy& policy, const OracleSpec& spec, std::span<const Example> examples,
                           int repeats, std::uint64_t seed, int max_rows) {
  if (repeats <= 0) throw UsageError("exposure bias needs at least one rollout repeat");
  if (max_rows <= 0) throw UsageError("max_rows must be positive");
  check_examples(spec, examples);
  const int L = spec.template_length();
  const int N = static_cast<int>(examples.size());

  ExposureBias res;
  res.repeats = repeats;
  res.tf_loss = teacher_forced_loss(policy, spec, examples);

  // Pairs (example, repeat) in repeat-major order, processed in chunks.
  const long pairs = static_cast<long>(N) * repeats;
  std::vector<double> per_repeat(repeats, 0.0);
  for (long start = 0; start < pairs; start += max_rows) {
    const int rows = static_cast<int>(std::min<long>(max_rows, pairs - start));
    std::vector<std::mt19937_64> rng;
    std::vector<int> rep(rows);
    std::vector<double> acc(rows, 0.0);
    rng.reserve(rows);
    for (int r = 0; r < rows; ++r) {
      const long pair = start + r;
      const int e = static_cast<int>(pair % N);
      rep[r] = static_cast<int>(pair / N);
      rng.emplace_back(stream_seed(seed, 0x726F6C6CULL, e, rep[r]));
    }
    drive(
        policy, spec, rows,
        [&](int u, const Eigen::MatrixXd& probs) {
          for (int r = 0; r < rows; ++r) acc[r] += step_fkl(spec.schedule[u], probs.row(r));
        },
        [&](int, int r, const Eigen::MatrixXd& probs) {
          const double x = uniform01(rng[r]);
          double c = 0.0;
          Token pick = kVocabSize - 1;
          for (int a = 0; a < kVocabSize; ++a) {
            c += probs(r, a);
            if (x < c) {
              pick = a;
              break;
            }
          }
          return pick;
        });
    for (int r = 0; r < rows; ++r) per_repeat[rep[r]] += acc[r];
  }

  double total = 0.0;
  for (double v : per_repeat) total += v;
  res.rollout_loss = total / (static_cast<double>(pairs) * L);
  res.eb = res.rollout_loss - res.tf_loss;

  res.per_repeat.resize(repeats);
  for (int k = 0; k < repeats; ++k) res.per_repeat[k] = per_repeat[k] / (static_cast<double>(N) * L) - res.tf_loss;
  if (repeats > 1) {
    double mean = 0.0;
    for (double v : res.per_repeat) mean += v;
    mean /= repeats;
    double ss = 0.0;
    for (double v : res.per_repeat) ss += (v - mean) * (v - mean);
    res.se = std::sqrt(ss / (repeats - 1)) / std::sqrt(static_cast<double>(repeats));
  }
  return res;
}

namespace {

void check_layout(const KappaTable& table, const Eigen::Ref<const Eigen::MatrixXd>& student,
                  const Eigen::Ref<const Eigen::MatrixXd>& teacher) {
  const auto n = static_cast<Eigen::Index>(table.states.size());
  if (student.rows() != n || teacher.rows() != n || student.cols() != kVocabSize || teacher.cols() != kVocabSize) {
    throw DataError("state distributions do not match the kappa table layout");
  }
}

double region_mean(const KappaTable& table, std::span<const std::size_t> region,
                   const Eigen::Ref<const Eigen::MatrixXd>& student, const Eigen::Ref<const Eigen::MatrixXd>& teacher) {
  if (region.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i : region) {
    const auto& s = table.states.at(i);
    for (int a = 0; a < kEvalActions; ++a) {
      const Token tok = eval_token(a);
      total += std::abs(s.kappa[a]) * std::abs(student(i, tok) - teacher(i, tok));
    }
  }
  return total / static_cast<double>(region.size());
}

}  // namespace

RegionalContribution regional_contributions(const KappaTable& table, const Partition& partition,
                                            const Eigen::Ref<const Eigen::MatrixXd>& student,
                                            const Eigen::Ref<const Eigen::MatrixXd>& teacher) {
  check_layout(table, student, teacher);
  return {region_mean(table, partition.bridge, student, teacher),
          region_mean(table, partition.garden, student, teacher)};
}

template <class T>
RegionalContribution regional_contributions(const Model<T>& model, const OracleSpec& spec,
                                            std::span<const Example> examples, const KappaTable& table,
                                            const Partition& partition) {
  const std::string id = model_id(model);
  if (id != table.model_id) {
    throw DataError("kappa table was computed for model " + table.model_id + ", not " + id);
  }
  if (static_cast<int>(examples.size()) != table.examples || spec.template_length() != table.template_length) {
    throw DataError("examples do not match the kappa table");
  }
  ModelPolicy<T> policy(model);
  const Eigen::MatrixXd student = state_distributions(policy, spec, examples);
  const Eigen::MatrixXd teacher = teacher_state_distributions(spec, table.examples);
  return regional_contributions(table, partition, student, teacher);
}

double c2_from_constants(double l_max, double beta, double c_conc, int horizon) {
  if (!(l_max >= 0.0) || !(beta > 0.0) || !(c_conc >= 0.0) || horizon < 0) {
    throw UsageError("C2 constants must satisfy L_max >= 0, beta > 0, C_conc >= 0, T >= 0");
  }
  return l_max / (2.0 * beta * beta) * c_conc * static_cast<double>(horizon) * (horizon - 1);
}

double f_bound(const KappaTable& table, const Eigen::Ref<const Eigen::MatrixXd>& student,
               const Eigen::Ref<const Eigen::MatrixXd>& teacher, double c2) {
  if (!(c2 >= 0.0)) throw UsageError("C2 must be nonnegative");
  check_layout(table, student, teacher);
  if (table.states.empty()) throw DataError("empty kappa table");
  double total = 0.0;
  for (std::size_t i = 0; i < table.states.size(); ++i) {
    const auto& s = table.states[i];
    double linear = 0.0;
    for (int a = 0; a < kEvalActions; ++a) {
      const Token tok = eval_token(a);
      linear += s.kappa[a] * std::abs(student(i, tok) - teacher(i, tok));
    }
    // The quadratic term covers the whole vocabulary, PAD and BOS included.
    const double l1 = (student.row(static_cast<Eigen::Index>(i)) - teacher.row(static_cast<Eigen::Index>(i))).cwiseAbs().sum();
    total += linear + c2 * l1 * l1;
  }
  return total / static_cast<double>(table.states.size());
}

double confidence(const OracleSpec& spec, int position) {
  if (position < 0 || position >= spec.template_length()) throw UsageError("position outside template");
  const StateSpec& st = spec.schedule[position];
  if (st.candidates.size() < 2) {
    throw UsageError("confidence is undefined at position " + std::to_string(position) + " (single candidate)");
  }
  double h = 0.0;
  for (double p : st.probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return 1.0 - h / std::log(static_cast<double>(st.candidates.size()));
}

ConfidenceKappa confidence_kappa_correlation(const OracleSpec& spec, const KappaTable& table,
                                             const Partition& partition, bool use_abs) {
  if (spec.template_length() != table.template_length) throw DataError("kappa table does not match the oracle");
  std::vector<double> ct, ks;
  for (const auto& s : table.states) {
    if (!spec.is_choice(s.position)) continue;
    ct.push_back(confidence(spec, s.position));
    ks.push_back(use_abs ? s.kappa_state_abs : s.kappa_state);
  }
  if (ct.size() < 3) throw DataError("confidence/kappa correlation needs at least 3 choice states");
  ConfidenceKappa out;
  out.choice_states = ct.size();
  out.rho = spearman(ct, ks);
  auto region = [&](std::span<const std::size_t> idx, std::size_t& count) {
    double total = 0.0;
    count = 0;
    for (std::size_t i : idx) {
      const int pos = table.states.at(i).position;
      if (!spec.is_choice(pos)) continue;
      total += confidence(spec, pos);
      ++count;
    }
    return count == 0 ? std::numeric_limits<double>::quiet_NaN() : total / static_cast<double>(count);
  };
  out.mean_ct_bridge = region(partition.bridge, out.bridge_choice);
  out.mean_ct_garden = region(partition.garden, out.garden_choice);
  return out;
}

std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> idx(xs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && xs[idx[j + 1]] == xs[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw UsageError("spearman inputs differ in length");
  if (xs.size() < 3) throw UsageError("spearman needs at least 3 pairs");
  for (double v : xs) {
    if (!std::isfinite(v)) throw UsageError("spearman input is not finite");
  }
  for (double v : ys) {
    if (!std::isfinite(v)) throw UsageError("spearman input is not finite");
  }
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw UsageError("spearman is undefined for constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

template RegionalContribution regional_contributions<float>(const Model<float>&, const OracleSpec&,
                                                            std::span<const Example>, const KappaTable&,
                                                            const Partition&);
template RegionalContribution regional_contributions<double>(const Model<double>&, const OracleSpec&,
                                                             std::span<const Example>, const KappaTable&,
                                                             const Partition&);

}  // namespace bglab
