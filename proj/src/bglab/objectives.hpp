// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>
#include <string_view>

#include "bglab/oracle.hpp"

namespace bglab {

enum class Divergence { ForwardKL, ReverseKL, JensenShannon, TotalVariation };

Divergence parse_divergence(std::string_view name);
std::string_view divergence_name(Divergence d) noexcept;

// Floor used for teacher probabilities outside the candidate set when the
// divergence needs full support (reverse KL).
inline constexpr double kReverseKlFloor = 1e-12;

// D(p || q) between two distributions over the vocabulary.
double divergence(Divergence d, const Eigen::Ref<const Eigen::VectorXd>& p, const Eigen::Ref<const Eigen::VectorXd>& q);

// -log softmax(logits)[target]. If grad is non-null it receives d/dlogits.
double hard_loss(const Eigen::Ref<const Eigen::VectorXd>& logits, Token target, Eigen::VectorXd* grad = nullptr);

// D(teacher || softmax(logits)).
double soft_loss(const Eigen::Ref<const Eigen::VectorXd>& teacher, const Eigen::Ref<const Eigen::VectorXd>& logits,
                 Divergence d, Eigen::VectorXd* grad = nullptr);

double hybrid_loss(double lambda, double soft, double hard);

// Soft-label weights.
double lambda_confidence(const Eigen::Ref<const Eigen::VectorXd>& teacher);
double lambda_entropy(const Eigen::Ref<const Eigen::VectorXd>& teacher);
double lambda_curriculum(long step, long warmup_steps, double lambda_max);

double entropy(const Eigen::Ref<const Eigen::VectorXd>& p);

// Normalized teacher ambiguity H_T / log K_T over the candidate set; 0 for
// single-candidate (deterministic) positions.
double ambiguity(const StateSpec& state);

// Risk penalty (alpha/4) * delta^2 with
// delta = logsumexp(logits_after_target) - logits_at_state[target].
// Gradients flow into both rows.
struct RiskPenalty {
  double delta = 0.0;
  double value = 0.0;
};
RiskPenalty risk_penalty(const Eigen::Ref<const Eigen::VectorXd>& logits_at_state,
                         const Eigen::Ref<const Eigen::VectorXd>& logits_after_target, Token target, double alpha,
                         Eigen::VectorXd* grad_state = nullptr, Eigen::VectorXd* grad_after = nullptr);

// Code domain: HighRisk positions train on hard labels only; every other
// position uses lambda scaled by the teacher's normalized ambiguity.
double code_per_state_weight(const OracleSpec& spec, int position, double lambda);

enum class ObjectiveMode {
  Hard,
  Soft,
  HybridStatic,
  HybridConfidence,
  HybridEntropy,
  HybridCurriculum,
  RiskGuided,
  CodePerState
};

ObjectiveMode parse_objective_mode(std::string_view name);
std::string_view objective_mode_name(ObjectiveMode mode) noexcept;

struct ObjectiveConfig {
  ObjectiveMode mode = ObjectiveMode::Soft;
  Divergence divergence = Divergence::ForwardKL;
  double lambda = 0.5;              // static lambda, lambda_max for the curriculum, base lambda for CodePerState
  double warmup_fraction = 0.2;     // curriculum warm-up as a fraction of total steps
  double alpha = 0.1;               // risk-guided penalty strength
  long warmup_steps = 0;            // resolved by the trainer from warmup_fraction

  void validate() const;
};

// Whether the objective needs the logits row after the final target (the
// risk penalty looks one step ahead).
bool needs_lookahead_row(const ObjectiveConfig& config);

// Soft-label weight used at one position.
double effective_lambda(const ObjectiveConfig& config, const OracleSpec& spec, int position, long step);

// Per-sequence objective: mean over template positions. `logits` holds one
// row per template position, plus one lookahead row when needed. Gradient
// rows are written into `dlogits` (same shape), already divided by the
// number of positions.
double sequence_loss(const ObjectiveConfig& config, const OracleSpec& spec, std::span<const Token> targets,
                     const Eigen::Ref<const Eigen::MatrixXd>& logits, long step, Eigen::MatrixXd* dlogits);

}  // namespace bglab
