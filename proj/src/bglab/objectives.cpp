// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#include "bglab/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "bglab/model.hpp"

namespace bglab {

Divergence parse_divergence(std::string_view name) {
  if (name == "fkl" || name == "forward_kl") return Divergence::ForwardKL;
  if (name == "rkl" || name == "reverse_kl") return Divergence::ReverseKL;
  if (name == "js" || name == "jensen_shannon") return Divergence::JensenShannon;
  if (name == "tv" || name == "total_variation") return Divergence::TotalVariation;
  throw UsageError("unknown divergence '" + std::string(name) + "'");
}

std::string_view divergence_name(Divergence d) noexcept {
  switch (d) {
    case Divergence::ForwardKL: return "fkl";
    case Divergence::ReverseKL: return "rkl";
    case Divergence::JensenShannon: return "js";
    case Divergence::TotalVariation: return "tv";
  }
  return "?";
}

namespace {

double kl(const Eigen::Ref<const Eigen::VectorXd>& p, const Eigen::Ref<const Eigen::VectorXd>& q) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) s += p[i] * (std::log(p[i]) - std::log(q[i]));
  }
  return s;
}

double floored(double p) { return p > 0.0 ? p : kReverseKlFloor; }

// Pulls a gradient w.r.t. probabilities back through softmax:
// dz_j = q_j (h_j - sum_a q_a h_a).
Eigen::VectorXd through_softmax(const Eigen::VectorXd& q, const Eigen::VectorXd& dq) {
  const double mean = q.dot(dq);
  return q.cwiseProduct((dq.array() - mean).matrix());
}

}  // namespace

double divergence(Divergence d, const Eigen::Ref<const Eigen::VectorXd>& p, const Eigen::Ref<const Eigen::VectorXd>& q) {
  switch (d) {
    case Divergence::ForwardKL: return kl(p, q);
    case Divergence::ReverseKL: {
      double s = 0.0;
      for (Eigen::Index i = 0; i < q.size(); ++i) {
        if (q[i] > 0.0) s += q[i] * (std::log(q[i]) - std::log(floored(p[i])));
      }
      return s;
    }
    case Divergence::JensenShannon: {
      const Eigen::VectorXd m = 0.5 * (p + q);
      return 0.5 * kl(p, m) + 0.5 * kl(q, m);
    }
    case Divergence::TotalVariation: return 0.5 * (p - q).cwiseAbs().sum();
  }
  return 0.0;
}

double hard_loss(const Eigen::Ref<const Eigen::VectorXd>& logits, Token target, Eigen::VectorXd* grad) {
  if (target < 0 || target >= logits.size()) throw UsageError("hard target outside the vocabulary");
  const double lse = log_sum_exp(logits);
  if (grad) {
    *grad = (logits.array() - lse).exp();
    (*grad)[target] -= 1.0;
  }
  return lse - logits[target];
}

double soft_loss(const Eigen::Ref<const Eigen::VectorXd>& teacher, const Eigen::Ref<const Eigen::VectorXd>& logits,
                 Divergence d, Eigen::VectorXd* grad) {
  const double lse = log_sum_exp(logits);
  const Eigen::VectorXd logq = logits.array() - lse;
  const Eigen::VectorXd q = logq.array().exp();
  switch (d) {
    case Divergence::ForwardKL: {
      // Stable form: sum p (log p - log q) with log q from the shifted logits.
      double s = 0.0;
      for (Eigen::Index i = 0; i < teacher.size(); ++i) {
        if (teacher[i] > 0.0) s += teacher[i] * (std::log(teacher[i]) - logq[i]);
      }
      if (grad) *grad = q - teacher;
      return s;
    }
    case Divergence::ReverseKL: {
      Eigen::VectorXd g(q.size());
      for (Eigen::Index i = 0; i < q.size(); ++i) g[i] = logq[i] - std::log(floored(teacher[i]));
      if (grad) *grad = through_softmax(q, g);
      return q.dot(g);
    }
    case Divergence::JensenShannon: {
      const Eigen::VectorXd m = 0.5 * (teacher + q);
      if (grad) {
        Eigen::VectorXd h(q.size());
        for (Eigen::Index i = 0; i < q.size(); ++i) h[i] = 0.5 * (logq[i] - std::log(m[i]));
        *grad = through_softmax(q, h);
      }
      return 0.5 * kl(teacher, m) + 0.5 * kl(q, m);
    }
    case Divergence::TotalVariation: {
      if (grad) {
        Eigen::VectorXd h(q.size());
        for (Eigen::Index i = 0; i < q.size(); ++i) {
          const double diff = q[i] - teacher[i];
          h[i] = diff > 0.0 ? 0.5 : diff < 0.0 ? -0.5 : 0.0;
        }
        *grad = through_softmax(q, h);
      }
      return 0.5 * (teacher - q).cwiseAbs().sum();
    }
  }
  return 0.0;
}

double hybrid_loss(double lambda, double soft, double hard) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw UsageError("lambda must lie in [0, 1]");
  return lambda * soft + (1.0 - lambda) * hard;
}

double entropy(const Eigen::Ref<const Eigen::VectorXd>& p) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
  }
  return h;
}

double lambda_confidence(const Eigen::Ref<const Eigen::VectorXd>& teacher) { return 1.0 - teacher.maxCoeff(); }

double lambda_entropy(const Eigen::Ref<const Eigen::VectorXd>& teacher) {
  return entropy(teacher) / std::log(static_cast<double>(teacher.size()));
}

double lambda_curriculum(long step, long warmup_steps, double lambda_max) {
  if (warmup_steps <= 0) throw UsageError("curriculum warm-up steps must be positive");
  const double progress = std::min(static_cast<double>(std::max(step, 0L)) / static_cast<double>(warmup_steps), 1.0);
  return progress * lambda_max;
}

double ambiguity(const StateSpec& state) {
  const std::size_t k = state.probs.size();
  if (k < 2) return 0.0;
  const Eigen::Map<const Eigen::VectorXd> p(state.probs.data(), static_cast<Eigen::Index>(k));
  return entropy(p) / std::log(static_cast<double>(k));
}

RiskPenalty risk_penalty(const Eigen::Ref<const Eigen::VectorXd>& logits_at_state,
                         const Eigen::Ref<const Eigen::VectorXd>& logits_after_target, Token target, double alpha,
                         Eigen::VectorXd* grad_state, Eigen::VectorXd* grad_after) {
  if (target < 0 || target >= logits_at_state.size()) throw UsageError("risk target outside the vocabulary");
  if (!(alpha > 0.0)) throw UsageError("risk penalty alpha must be positive");
  RiskPenalty out;
  const double lse = log_sum_exp(logits_after_target);
  out.delta = lse - logits_at_state[target];
  out.value = 0.25 * alpha * out.delta * out.delta;
  const double coeff = 0.5 * alpha * out.delta;
  if (grad_state) {
    *grad_state = Eigen::VectorXd::Zero(logits_at_state.size());
    (*grad_state)[target] = -coeff;
  }
  if (grad_after) *grad_after = coeff * (logits_after_target.array() - lse).exp().matrix();
  return out;
}

double code_per_state_weight(const OracleSpec& spec, int position, double lambda) {
  if (spec.domain != Domain::Code) throw UsageError("per-state weighting is defined for the code domain only");
  if (position < 0 || position >= spec.template_length()) throw UsageError("position outside the template");
  const StateSpec& st = spec.schedule[position];
  if (st.kind == StateKind::HighRisk) return 0.0;
  return lambda * ambiguity(st);
}

ObjectiveMode parse_objective_mode(std::string_view name) {
  if (name == "hard") return ObjectiveMode::Hard;
  if (name == "soft") return ObjectiveMode::Soft;
  if (name == "hybrid-static") return ObjectiveMode::HybridStatic;
  if (name == "hybrid-confidence") return ObjectiveMode::HybridConfidence;
  if (name == "hybrid-entropy") return ObjectiveMode::HybridEntropy;
  if (name == "hybrid-curriculum") return ObjectiveMode::HybridCurriculum;
  if (name == "risk-guided") return ObjectiveMode::RiskGuided;
  if (name == "code-per-state") return ObjectiveMode::CodePerState;
  throw UsageError("unknown objective '" + std::string(name) + "'");
}

std::string_view objective_mode_name(ObjectiveMode mode) noexcept {
  switch (mode) {
    case ObjectiveMode::Hard: return "hard";
    case ObjectiveMode::Soft: return "soft";
    case ObjectiveMode::HybridStatic: return "hybrid-static";
    case ObjectiveMode::HybridConfidence: return "hybrid-confidence";
    case ObjectiveMode::HybridEntropy: return "hybrid-entropy";
    case ObjectiveMode::HybridCurriculum: return "hybrid-curriculum";
    case ObjectiveMode::RiskGuided: return "risk-guided";
    case ObjectiveMode::CodePerState: return "code-per-state";
  }
  return "?";
}

void ObjectiveConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw UsageError("lambda must lie in [0, 1]");
  if (!(alpha > 0.0)) throw UsageError("alpha must be positive");
  if (!(warmup_fraction > 0.0 && warmup_fraction <= 1.0)) throw UsageError("warmup_fraction must lie in (0, 1]");
}

bool needs_lookahead_row(const ObjectiveConfig& config) { return config.mode == ObjectiveMode::RiskGuided; }

double effective_lambda(const ObjectiveConfig& config, const OracleSpec& spec, int position, long step) {
  switch (config.mode) {
    case ObjectiveMode::Hard: return 0.0;
    case ObjectiveMode::Soft: return 1.0;
    case ObjectiveMode::HybridStatic:
    case ObjectiveMode::RiskGuided: return config.lambda;
    case ObjectiveMode::HybridConfidence: {
      const Distribution d = teacher_distribution(spec, position);
      return lambda_confidence(Eigen::Map<const Eigen::VectorXd>(d.data(), kVocabSize));
    }
    case ObjectiveMode::HybridEntropy: {
      const Distribution d = teacher_distribution(spec, position);
      return lambda_entropy(Eigen::Map<const Eigen::VectorXd>(d.data(), kVocabSize));
    }
    case ObjectiveMode::HybridCurriculum:
      return lambda_curriculum(step, std::max(config.warmup_steps, 1L), config.lambda);
    case ObjectiveMode::CodePerState: return code_per_state_weight(spec, position, config.lambda);
  }
  return 0.0;
}

double sequence_loss(const ObjectiveConfig& config, const OracleSpec& spec, std::span<const Token> targets,
                     const Eigen::Ref<const Eigen::MatrixXd>& logits, long step, Eigen::MatrixXd* dlogits) {
  const int L = spec.template_length();
  if (static_cast<int>(targets.size()) != L) throw UsageError("target sequence does not match the template length");
  const bool lookahead = needs_lookahead_row(config);
  if (logits.rows() != L + (lookahead ? 1 : 0)) throw UsageError("logits rows do not match the objective");
  if (dlogits) *dlogits = Eigen::MatrixXd::Zero(logits.rows(), logits.cols());

  double total = 0.0;
  Eigen::VectorXd g_soft, g_hard, g_state, g_after;
  for (int t = 0; t < L; ++t) {
    const double lam = effective_lambda(config, spec, t, step);
    const Eigen::VectorXd row = logits.row(t).transpose();
    double loss = 0.0;
    if (lam > 0.0) {
      const Distribution d = teacher_distribution(spec, t);
      const double s = soft_loss(Eigen::Map<const Eigen::VectorXd>(d.data(), kVocabSize), row, config.divergence,
                                 dlogits ? &g_soft : nullptr);
      loss += lam * s;
      if (dlogits) dlogits->row(t) += lam * g_soft.transpose();
    }
    if (lam < 1.0) {
      const double h = hard_loss(row, targets[t], dlogits ? &g_hard : nullptr);
      loss += (1.0 - lam) * h;
      if (dlogits) dlogits->row(t) += (1.0 - lam) * g_hard.transpose();
      if (config.mode == ObjectiveMode::RiskGuided) {
        const RiskPenalty pen = risk_penalty(row, logits.row(t + 1).transpose(), targets[t], config.alpha,
                                             dlogits ? &g_state : nullptr, dlogits ? &g_after : nullptr);
        loss += (1.0 - lam) * pen.value;
        if (dlogits) {
          dlogits->row(t) += (1.0 - lam) * g_state.transpose();
          dlogits->row(t + 1) += (1.0 - lam) * g_after.transpose();
        }
      }
    }
    total += loss;
  }
  if (dlogits) *dlogits /= static_cast<double>(L);
  return total / L;
}

}  // namespace bglab
