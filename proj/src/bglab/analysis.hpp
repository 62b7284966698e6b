// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bglab/model.hpp"
#include "bglab/oracle.hpp"
#include "bglab/policy.hpp"
#include "bglab/sensitivity.hpp"

namespace bglab {

// FKL(pi_T(.|u) || q) for a dense student distribution q.
double step_fkl(const StateSpec& teacher, const Eigen::Ref<const Eigen::RowVectorXd>& q);

// Mean FKL over every (example, position) on teacher prefixes.
double teacher_forced_loss(const Policy& policy, const OracleSpec& spec, std::span<const Example> examples);

// Student distributions on teacher prefixes, one row per (example, position)
// in table order.
Eigen::MatrixXd state_distributions(const Policy& policy, const OracleSpec& spec, std::span<const Example> examples);

// Teacher distributions in the same layout.
Eigen::MatrixXd teacher_state_distributions(const OracleSpec& spec, int examples);

struct ExposureBias {
  double eb = 0.0;            // rollout_loss - tf_loss
  double rollout_loss = 0.0;  // mean over (example, position, repeat)
  double tf_loss = 0.0;
  double se = 0.0;            // standard error of eb over repeats
  int repeats = 0;
  std::vector<double> per_repeat;  // eb of each repeat
};

inline constexpr int kReportRepeats = 30;
inline constexpr int kValidationRepeats = 5;

// Rollouts sample from the full policy distribution for template_length
// steps. Each (example, repeat) pair owns an RNG stream derived from seed.
ExposureBias exposure_bias(const Policy& policy, const OracleSpec& spec, std::span<const Example> examples,
                           int repeats, std::uint64_t seed, int max_rows = 1024);

struct RegionalContribution {
  double bridge = 0.0;
  double garden = 0.0;
};

// Mean over region states of sum_a |kappa(a|s)| |pi_theta(a|s) - pi_T(a|s)|.
RegionalContribution regional_contributions(const KappaTable& table, const Partition& partition,
                                            const Eigen::Ref<const Eigen::MatrixXd>& student,
                                            const Eigen::Ref<const Eigen::MatrixXd>& teacher);

// Same, checking that the table was computed for this model.
template <class T>
RegionalContribution regional_contributions(const Model<T>& model, const OracleSpec& spec,
                                            std::span<const Example> examples, const KappaTable& table,
                                            const Partition& partition);

// C2 = L_max / (2 beta^2) * C_conc * T (T - 1).
double c2_from_constants(double l_max, double beta, double c_conc, int horizon);

// Mean over all states of sum_a kappa(a|s) |dpi(a|s)| + C2 ||dpi(.|s)||_1^2,
// with a over the eval actions and the norm over the full vocabulary.
double f_bound(const KappaTable& table, const Eigen::Ref<const Eigen::MatrixXd>& student,
               const Eigen::Ref<const Eigen::MatrixXd>& teacher, double c2);

// c_T = 1 - H_T / log K_T over the candidate set. Choice states only.
double confidence(const OracleSpec& spec, int position);

struct ConfidenceKappa {
  double rho = 0.0;
  double mean_ct_bridge = 0.0;  // NaN when the region has no choice states
  double mean_ct_garden = 0.0;
  std::size_t choice_states = 0;
  std::size_t bridge_choice = 0;
  std::size_t garden_choice = 0;
};

ConfidenceKappa confidence_kappa_correlation(const OracleSpec& spec, const KappaTable& table,
                                             const Partition& partition, bool use_abs = false);

// Average ranks (1-based) with ties sharing the mean rank.
std::vector<double> average_ranks(std::span<const double> xs);

// Pearson correlation of average ranks.
double spearman(std::span<const double> xs, std::span<const double> ys);

}  // namespace bglab
