// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bglab/model.hpp"
#include "bglab/oracle.hpp"

namespace bglab {

// Student loss at one downstream state, given the teacher's scheduled
// distribution there and the student's logits row (64-bit).
using StepLoss = std::function<double(const StateSpec& teacher, std::span<const double> logits)>;

enum class StepLossKind { ForwardKL, CrossEntropy };

std::string_view step_loss_name(StepLossKind kind) noexcept;
StepLossKind parse_step_loss(std::string_view name);
StepLoss make_step_loss(StepLossKind kind);

struct KappaSettings {
  double prune_eps = 0.0;          // 0 = exact enumeration
  std::uint64_t node_budget = 0;   // decoder row-steps per table; 0 = unlimited
  StepLossKind loss = StepLossKind::ForwardKL;
  int max_rows = 2048;             // decoder rows per batch

  void validate() const;
};

// Upper bound on |logit| for any input, from the head and final-norm weights.
template <class T>
double logit_magnitude_bound(const Model<T>& model);

// Upper bound on a single forward-KL or cross-entropy step loss.
template <class T>
double step_loss_bound(const Model<T>& model);

// Expected downstream loss for many rows at one position t. Row r continues
// bases[row_base[r]] (a committed prefix: BOS plus tokens 0..t-1), is forced
// to emit forced[r] at t, then follows the teacher to the end. Every row
// shares one continuation tree, so the walk is a single depth-first
// traversal over lock-step decoder rows.
struct DownstreamResult {
  std::vector<double> q;          // one per row
  double error_bound = 0.0;       // same for every row
  double dropped_mass = 0.0;      // teacher probability of pruned branches
  std::uint64_t row_steps = 0;
};

template <class T>
DownstreamResult expected_downstream(const Model<T>& model, const OracleSpec& spec, int t,
                                     std::span<const InferenceCache<T>* const> bases, std::span<const int> row_base,
                                     std::span<const Token> forced, const KappaSettings& settings,
                                     const StepLoss& loss, double loss_bound);

// Q(s_t, a) for one example prefix and one forced action.
template <class T>
double q_value(const Model<T>& model, const OracleSpec& spec, const Example& example, int t, Token forced,
               const KappaSettings& settings = {}, const StepLoss& loss = {});

// Reference Q by enumerating every continuation path and running a fresh
// full forward pass per path. No caching, no pruning.
inline constexpr std::uint64_t kBruteForcePathLimit = 100000;

struct BruteForceResult {
  double q = 0.0;
  double total_path_probability = 0.0;
  std::uint64_t paths = 0;
};

template <class T>
BruteForceResult brute_force_q(const Model<T>& model, const OracleSpec& spec, const Example& example, int t,
                               Token forced, const StepLoss& loss = {});

struct StateKappa {
  int example = 0;
  int position = 0;
  StateKind kind = StateKind::Deterministic;
  Token token = kPad;              // teacher-sampled token at this position
  std::vector<double> q;           // kEvalActions entries, Q(s, a)
  std::vector<double> kappa;       // kEvalActions entries
  double baseline = 0.0;           // sum_a pi_T(a|s) Q(s, a)
  double kappa_state = 0.0;        // signed sum over the eval actions
  double kappa_state_abs = 0.0;    // sum of |kappa|
  double error_bound = 0.0;        // bound on |kappa| and |Q| error from pruning
};

// Builds the full kappa record from the 62 Q values of one state.
StateKappa make_state_kappa(const OracleSpec& spec, int example, int position, Token token, std::vector<double> q,
                            double error_bound);

template <class T>
StateKappa kappa_for_state(const Model<T>& model, const OracleSpec& spec, const Example& example, int example_index,
                           int t, const KappaSettings& settings = {}, const StepLoss& loss = {});

struct KappaTable {
  Domain domain = Domain::Dialogue;
  int template_length = 0;
  int examples = 0;
  std::string model_id;
  std::string run_hash;
  KappaSettings settings;
  double step_loss_bound = 0.0;
  std::vector<StateKappa> states;  // ordered by (example, position)

  const StateKappa& at(int example, int position) const;
};

struct TableCallbacks {
  // Return true to skip a (example, position) key that is already done.
  std::function<bool(int example, int position)> skip;
  // Called once per finished state, in completion order.
  std::function<void(const StateKappa&)> on_state;
};

// kappa for every (example, position) over the 62 eval actions. Examples
// sharing a prefix at position t are evaluated once.
template <class T>
KappaTable build_kappa_table(const Model<T>& model, const OracleSpec& spec, std::span<const Example> examples,
                             const KappaSettings& settings, const TableCallbacks& callbacks = {},
                             std::vector<StateKappa> completed = {});

struct Partition {
  std::vector<std::size_t> bridge;  // indices into KappaTable::states, highest kappa(s) first
  std::vector<std::size_t> garden;  // lowest kappa(s) last
  double fraction = 0.2;
  std::size_t eligible = 0;         // states ranked
  bool use_abs = false;
  bool exclude_terminal = true;     // final-position states carry kappa = 0 and are left out
};

inline constexpr double kPartitionFraction = 0.2;
inline constexpr std::size_t kMinPartitionStates = 10;

// Ranks the eligible states by score (descending, ties by table order) and
// takes the top and bottom round(fraction * eligible).
Partition partition_by_scores(const KappaTable& layout, std::span<const double> scores, double fraction,
                              bool exclude_terminal = true);

Partition partition_bridge_garden(const KappaTable& table, double fraction = kPartitionFraction, bool use_abs = false,
                                  bool exclude_terminal = true);

// One partition shared by several models: states ranked by their mean
// kappa(s) across the given tables.
Partition common_partition(std::span<const KappaTable* const> tables, double fraction = kPartitionFraction,
                           bool use_abs = false, bool exclude_terminal = true);

}  // namespace bglab
