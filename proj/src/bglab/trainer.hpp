// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bglab/model.hpp"
#include "bglab/objectives.hpp"
#include "bglab/oracle.hpp"

namespace bglab {

enum class Criterion { TeacherForcedKL, RolloutEB };

Criterion parse_criterion(std::string_view name);
std::string_view criterion_name(Criterion c) noexcept;

// Lambda selection scores Dialogue on teacher-forced KL, Math and Code on
// rollout EB.
Criterion default_criterion(Domain domain) noexcept;

struct TrainConfig {
  int batch_size = 256;
  double learning_rate = 2e-4;
  int warmup_epochs = 6;
  int max_epochs = 24;
  int patience = 6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::uint64_t seed = 1;
  Criterion criterion = Criterion::TeacherForcedKL;       // lambda selection
  Criterion stop_criterion = Criterion::TeacherForcedKL;  // early stopping and best epoch
  int val_repeats = 5;
  int probe_size = 256;  // fixed train subset scored after every epoch

  void validate() const;
};

// Linear warm-up to lr_max, then cosine decay to zero at total_steps.
double learning_rate_at(long step, long warmup_steps, long total_steps, double lr_max);

// Bias-corrected Adam moments with decoupled weight decay.
template <class T>
class AdamW {
 public:
  AdamW(std::size_t size, double beta1, double beta2, double eps, double weight_decay);

  // decay[i] selects which entries receive weight decay.
  void step(std::span<T> params, std::span<const T> grad, std::span<const std::uint8_t> decay, double lr);
  long steps() const noexcept { return t_; }

 private:
  double beta1_, beta2_, eps_, wd_;
  long t_ = 0;
  std::vector<double> m_, v_;
};

// Per-element weight-decay mask from the tensor layout.
std::vector<std::uint8_t> decay_mask(const ParameterLayout& layout);

struct EpochRecord {
  int epoch = 0;            // 1-based
  double train_loss = 0.0;  // mean objective over the epoch's batches (dropout on)
  double probe_loss = 0.0;  // objective on the fixed probe subset, eval mode
  double val_metric = 0.0;
  double learning_rate = 0.0;  // at the end of the epoch
  bool improved = false;
  double seconds = 0.0;
};

struct TrainHistory {
  Criterion criterion = Criterion::TeacherForcedKL;
  double init_probe_loss = 0.0;
  std::vector<EpochRecord> epochs;
  std::vector<double> lr_trace;  // per optimizer step
  int best_epoch = 0;
  double best_metric = 0.0;
  int stop_epoch = 0;
  bool early_stopped = false;
};

// Lower is better for both criteria.
double validation_metric(const Model<float>& model, const OracleSpec& spec, std::span<const Example> val,
                         Criterion criterion, int repeats, std::uint64_t seed);

struct TrainResult {
  Model<float> model;  // best-validation parameters
  TrainHistory history;
};

using Validator = std::function<double(const Model<float>& model, int epoch)>;
using EpochCallback = std::function<void(const EpochRecord&)>;

// Mean objective over a batch. A non-empty grad receives the gradient with
// respect to the parameters (accumulated).
template <class T>
double batch_objective(const Model<T>& model, const OracleSpec& spec, const ObjectiveConfig& objective,
                       std::span<const Example* const> batch, long step, Mode mode, std::mt19937_64* rng,
                       std::span<T> grad = {});

// Mean objective over a set of examples in eval mode.
double objective_loss(const Model<float>& model, const OracleSpec& spec, const ObjectiveConfig& objective,
                      std::span<const Example> examples, long step);

TrainResult train(const ModelConfig& model_config, const Dataset& data, const OracleSpec& spec,
                  ObjectiveConfig objective, const TrainConfig& config, const Validator& validator = {},
                  const EpochCallback& on_epoch = {});

// Lambda selection.
enum class LambdaRule { Argmin, WithinOneStandardError };

LambdaRule default_lambda_rule(Domain domain) noexcept;

struct LambdaStat {
  double lambda = 0.0;
  double mean = 0.0;
  double se = 0.0;
  std::vector<double> values;  // one per seed
};

std::vector<double> lambda_grid();  // 0.1, 0.2, ..., 0.9

// Argmin: lowest mean, ties to the smaller lambda. WithinOneStandardError:
// smallest lambda whose mean is <= best mean + best SE.
double select_lambda(std::span<const LambdaStat> stats, LambdaRule rule);

struct LambdaSearch {
  std::vector<LambdaStat> stats;
  double selected = 0.0;
  LambdaRule rule = LambdaRule::Argmin;
};

// Trains one hybrid student per (lambda, seed) and scores its best checkpoint
// with config.criterion on the validation split. Code uses the per-state rule.
LambdaSearch search_lambda(const ModelConfig& model_config, const Dataset& data, const OracleSpec& spec,
                           Divergence divergence, const TrainConfig& config, std::span<const double> grid,
                           std::span<const std::uint64_t> seeds,
                           const std::function<void(double lambda, std::uint64_t seed, double metric)>& progress = {});

}  // namespace bglab
