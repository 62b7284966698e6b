// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "bglab/common.hpp"

namespace bglab {

enum class Domain { Dialogue, Math, Code };

Domain parse_domain(std::string_view name);
std::string_view domain_name(Domain domain) noexcept;

enum class StateKind { HighRisk, Flexible, Deterministic };

std::string_view state_kind_name(StateKind kind) noexcept;
StateKind parse_state_kind(std::string_view name);

// Teacher behaviour at one template position.
struct StateSpec {
  StateKind kind = StateKind::Deterministic;
  std::string role;               // e.g. "recipient", "layout"
  std::vector<Token> candidates;  // 4 (HighRisk), 8 (Flexible) or 1
  std::vector<double> probs;      // aligned with candidates
};

using Distribution = std::array<double, kVocabSize>;

// A scripted, position-indexed teacher. The teacher's next-token
// distribution depends only on the position, never on prefix content.
struct OracleSpec {
  Domain domain = Domain::Dialogue;
  std::vector<StateSpec> schedule;
  std::vector<int> decision_positions;
  std::vector<std::string> token_names;  // kVocabSize entries

  int template_length() const noexcept { return static_cast<int>(schedule.size()); }
  bool is_choice(int position) const { return schedule.at(position).candidates.size() >= 2; }
};

// Main-token probabilities for HighRisk states, in schedule order.
inline constexpr double kHighRiskStart = 0.98;
inline constexpr double kHighRiskDecay = 0.01;
inline constexpr double kHighRiskFloor = 0.94;
// Flexible states: softmax over 8 logits evenly spaced on [0, -2.5].
inline constexpr int kFlexibleChoices = 8;
inline constexpr int kHighRiskChoices = 4;
inline constexpr double kFlexibleLogitSpan = 2.5;

std::vector<double> flexible_probs();
std::vector<double> high_risk_probs(double main_prob);

OracleSpec build_oracle(Domain domain);

// Throws DataError describing the first violated invariant.
void validate_oracle(const OracleSpec& spec);

Distribution teacher_distribution(const OracleSpec& spec, int position);

struct Example {
  Domain domain = Domain::Dialogue;
  std::vector<Token> tokens;  // template_length tokens; BOS is not stored
  std::uint64_t seed = 0;
};

Example sample_example(const OracleSpec& spec, std::uint64_t seed);

// Throws DataError when a token falls outside its position's candidate set.
void validate_example(const OracleSpec& spec, const Example& example);

enum class Split { Train, Val, Eval };
std::string_view split_name(Split split) noexcept;
Split parse_split(std::string_view name);

struct DatasetSizes {
  int train = 4000;
  int val = 500;
  int eval = 30;
};

struct Dataset {
  Domain domain = Domain::Dialogue;
  std::uint64_t seed = 0;
  std::vector<Example> train;
  std::vector<Example> val;
  std::vector<Example> eval;

  const std::vector<Example>& split(Split which) const;
};

// Each split draws from its own RNG stream, so any split can be regenerated
// on its own.
Dataset generate_dataset(const OracleSpec& spec, std::uint64_t seed, DatasetSizes sizes = {});

}  // namespace bglab
