// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#include "bglab/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "bglab/analysis.hpp"
#include "bglab/policy.hpp"

namespace bglab {

Criterion parse_criterion(std::string_view name) {
  if (name == "tf-kl") return Criterion::TeacherForcedKL;
  if (name == "rollout-eb") return Criterion::RolloutEB;
  throw UsageError("unknown validation criterion '" + std::string(name) + "' (expected tf-kl or rollout-eb)");
}

std::string_view criterion_name(Criterion c) noexcept {
  return c == Criterion::TeacherForcedKL ? "tf-kl" : "rollout-eb";
}

Criterion default_criterion(Domain domain) noexcept {
  return domain == Domain::Dialogue ? Criterion::TeacherForcedKL : Criterion::RolloutEB;
}

void TrainConfig::validate() const {
  if (batch_size <= 0) throw UsageError("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw UsageError("learning_rate must be positive");
  if (max_epochs <= 0) throw UsageError("max_epochs must be positive");
  if (warmup_epochs < 0 || warmup_epochs >= max_epochs) throw UsageError("warmup_epochs must be in [0, max_epochs)");
  if (patience <= 0) throw UsageError("patience must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw UsageError("betas must be in [0, 1)");
  if (!(eps > 0.0)) throw UsageError("eps must be positive");
  if (!(weight_decay >= 0.0)) throw UsageError("weight_decay must be nonnegative");
  if (val_repeats <= 0) throw UsageError("val_repeats must be positive");
  if (probe_size <= 0) throw UsageError("probe_size must be positive");
}

double learning_rate_at(long step, long warmup_steps, long total_steps, double lr_max) {
  if (step <= 0) return 0.0;
  if (step < warmup_steps) return lr_max * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return lr_max;
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps));
  return lr_max * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <class T>
AdamW<T>::AdamW(std::size_t size, double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay), m_(size, 0.0), v_(size, 0.0) {}

template <class T>
void AdamW<T>::step(std::span<T> params, std::span<const T> grad, std::span<const std::uint8_t> decay, double lr) {
  if (params.size() != m_.size() || grad.size() != m_.size() || decay.size() != m_.size()) {
    throw UsageError("optimizer state does not match the parameter vector");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < m_.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
    double p = static_cast<double>(params[i]);
    if (decay[i]) p -= lr * wd_ * p;
    p -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    params[i] = static_cast<T>(p);
  }
}

template class AdamW<float>;
template class AdamW<double>;

std::vector<std::uint8_t> decay_mask(const ParameterLayout& layout) {
  std::vector<std::uint8_t> mask(layout.size(), 0);
  for (const auto& t : layout.tensors()) {
    if (t.decay) std::fill(mask.begin() + t.offset, mask.begin() + t.offset + t.size(), 1);
  }
  return mask;
}

double validation_metric(const Model<float>& model, const OracleSpec& spec, std::span<const Example> val,
                         Criterion criterion, int repeats, std::uint64_t seed) {
  ModelPolicy<float> policy(model);
  if (criterion == Criterion::TeacherForcedKL) return teacher_forced_loss(policy, spec, val);
  return exposure_bias(policy, spec, val, repeats, seed).eb;
}

namespace {

int sequence_rows(const OracleSpec& spec, const ObjectiveConfig& objective) {
  return spec.template_length() + (needs_lookahead_row(objective) ? 1 : 0);
}

// [BOS, y_0, ..., y_{S-2}] for each example, laid out contiguously.
std::vector<Token> batch_inputs(std::span<const Example* const> batch, int rows) {
  std::vector<Token> inputs;
  inputs.reserve(batch.size() * rows);
  for (const Example* ex : batch) {
    inputs.push_back(kBos);
    for (int i = 0; i + 1 < rows; ++i) inputs.push_back(ex->tokens[i]);
  }
  return inputs;
}

}  // namespace

template <class T>
double batch_objective(const Model<T>& model, const OracleSpec& spec, const ObjectiveConfig& objective,
                       std::span<const Example* const> batch, long step, Mode mode, std::mt19937_64* rng,
                       std::span<T> grad) {
  if (batch.empty()) throw DataError("empty batch");
  const int S = sequence_rows(spec, objective);
  const int B = static_cast<int>(batch.size());
  const auto inputs = batch_inputs(batch, S);
  const bool want_grad = !grad.empty();
  Activations<T> tape;
  const RowMat<T> logits = forward(model, inputs, B, S, mode, rng, want_grad ? &tape : nullptr);
  RowMat<T> dlogits;
  if (want_grad) dlogits.resize(logits.rows(), logits.cols());
  Eigen::MatrixXd dblock;
  double total = 0.0;
  for (int b = 0; b < B; ++b) {
    const Eigen::MatrixXd block = logits.middleRows(static_cast<Eigen::Index>(b) * S, S).template cast<double>();
    total += sequence_loss(objective, spec, batch[b]->tokens, block, step, want_grad ? &dblock : nullptr);
    if (want_grad) {
      dlogits.middleRows(static_cast<Eigen::Index>(b) * S, S) = (dblock / static_cast<double>(B)).cast<T>();
    }
  }
  if (want_grad) backward(model, tape, dlogits, grad);
  return total / static_cast<double>(B);
}

template double batch_objective<float>(const Model<float>&, const OracleSpec&, const ObjectiveConfig&,
                                       std::span<const Example* const>, long, Mode, std::mt19937_64*,
                                       std::span<float>);
template double batch_objective<double>(const Model<double>&, const OracleSpec&, const ObjectiveConfig&,
                                        std::span<const Example* const>, long, Mode, std::mt19937_64*,
                                        std::span<double>);

double objective_loss(const Model<float>& model, const OracleSpec& spec, const ObjectiveConfig& objective,
                      std::span<const Example> examples, long step) {
  if (examples.empty()) throw DataError("no examples to score");
  const int S = sequence_rows(spec, objective);
  double total = 0.0;
  const std::size_t chunk = 256;
  for (std::size_t start = 0; start < examples.size(); start += chunk) {
    std::vector<const Example*> batch;
    for (std::size_t i = start; i < std::min(examples.size(), start + chunk); ++i) batch.push_back(&examples[i]);
    const auto inputs = batch_inputs(batch, S);
    const RowMat<float> logits =
        forward(model, inputs, static_cast<int>(batch.size()), S, Mode::Eval, nullptr, nullptr);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const Eigen::MatrixXd block = logits.middleRows(static_cast<Eigen::Index>(b) * S, S).cast<double>();
      total += sequence_loss(objective, spec, batch[b]->tokens, block, step, nullptr);
    }
  }
  return total / static_cast<double>(examples.size());
}

TrainResult train(const ModelConfig& model_config, const Dataset& data, const OracleSpec& spec,
                  ObjectiveConfig objective, const TrainConfig& config, const Validator& validator,
                  const EpochCallback& on_epoch) {
  config.validate();
  objective.validate();
  model_config.validate();
  if (data.train.empty()) throw DataError("training split is empty");
  if (data.val.empty() && !validator) throw DataError("validation split is empty");
  if (data.domain != spec.domain) throw DataError("dataset domain does not match the oracle");
  for (const auto* split : {&data.train, &data.val}) {
    for (const auto& ex : *split) validate_example(spec, ex);
  }
  const int S = sequence_rows(spec, objective);
  if (S > model_config.max_positions) throw UsageError("template does not fit in max_positions");

  const long N = static_cast<long>(data.train.size());
  const long steps_per_epoch = (N + config.batch_size - 1) / config.batch_size;
  const long total_steps = steps_per_epoch * config.max_epochs;
  const long warmup_steps = steps_per_epoch * config.warmup_epochs;
  objective.warmup_steps = std::max(1L, std::lround(objective.warmup_fraction * static_cast<double>(total_steps)));

  TrainResult result;
  Model<float> model = init_model<float>(model_config, config.seed);
  result.model = model;
  TrainHistory& hist = result.history;
  hist.criterion = config.stop_criterion;

  const auto probe = std::span<const Example>(data.train).first(std::min<std::size_t>(config.probe_size, N));
  hist.init_probe_loss = objective_loss(model, spec, objective, probe, 0);

  const auto mask = decay_mask(model.layout);
  AdamW<float> opt(model.params.size(), config.beta1, config.beta2, config.eps, config.weight_decay);
  std::vector<float> grad(model.params.size());
  std::mt19937_64 dropout_rng(stream_seed(config.seed, 0x64726F70ULL));
  const std::uint64_t val_seed = stream_seed(config.seed, 0x76616CULL);
  Validator validate = validator ? validator : [&](const Model<float>& m, int) {
    return validation_metric(m, spec, data.val, config.stop_criterion, config.val_repeats, val_seed);
  };

  std::vector<long> order(N);
  long step = 0;
  int bad = 0;
  bool have_best = false;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0L);
    std::mt19937_64 shuffle_rng(stream_seed(config.seed, 0x73687566ULL, epoch));
    for (long i = N - 1; i > 0; --i) {
      const long j = static_cast<long>(shuffle_rng() % static_cast<std::uint64_t>(i + 1));
      std::swap(order[i], order[j]);
    }
    double epoch_loss = 0.0;
    for (long start = 0; start < N; start += config.batch_size) {
      std::vector<const Example*> batch;
      for (long i = start; i < std::min(N, start + config.batch_size); ++i) batch.push_back(&data.train[order[i]]);
      std::fill(grad.begin(), grad.end(), 0.0f);
      const double batch_loss =
          batch_objective(model, spec, objective, batch, step, Mode::Train, &dropout_rng, std::span<float>(grad));
      if (!std::isfinite(batch_loss)) {
        throw DataError("non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                        std::to_string(step));
      }
      ++step;
      const double lr = learning_rate_at(step, warmup_steps, total_steps, config.learning_rate);
      hist.lr_trace.push_back(lr);
      opt.step(model.params, grad, mask, lr);
      epoch_loss += batch_loss * static_cast<double>(batch.size());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / static_cast<double>(N);
    rec.probe_loss = objective_loss(model, spec, objective, probe, step);
    rec.val_metric = validate(model, epoch);
    rec.learning_rate = hist.lr_trace.back();
    if (!std::isfinite(rec.val_metric)) throw DataError("non-finite validation metric at epoch " + std::to_string(epoch));
    if (!have_best || rec.val_metric < hist.best_metric) {
      have_best = true;
      hist.best_metric = rec.val_metric;
      hist.best_epoch = epoch;
      result.model = model;
      rec.improved = true;
      bad = 0;
    } else {
      ++bad;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    hist.epochs.push_back(rec);
    hist.stop_epoch = epoch;
    if (on_epoch) on_epoch(rec);
    if (bad >= config.patience) {
      hist.early_stopped = epoch < config.max_epochs;
      break;
    }
  }
  return result;
}

LambdaRule default_lambda_rule(Domain domain) noexcept {
  return domain == Domain::Code ? LambdaRule::WithinOneStandardError : LambdaRule::Argmin;
}

std::vector<double> lambda_grid() {
  std::vector<double> g;
  for (int i = 1; i <= 9; ++i) g.push_back(i / 10.0);
  return g;
}

double select_lambda(std::span<const LambdaStat> stats, LambdaRule rule) {
  if (stats.empty()) throw UsageError("lambda grid is empty");
  std::vector<const LambdaStat*> sorted;
  for (const auto& s : stats) {
    if (!std::isfinite(s.mean) || !(s.se >= 0.0)) throw DataError("lambda statistics must be finite");
    sorted.push_back(&s);
  }
  std::stable_sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->lambda < b->lambda; });
  const LambdaStat* best = sorted.front();
  for (const auto* s : sorted) {
    if (s->mean < best->mean) best = s;
  }
  if (rule == LambdaRule::Argmin) return best->lambda;
  const double cutoff = best->mean + best->se;
  for (const auto* s : sorted) {
    if (s->mean <= cutoff) return s->lambda;
  }
  return best->lambda;
}

LambdaSearch search_lambda(const ModelConfig& model_config, const Dataset& data, const OracleSpec& spec,
                           Divergence divergence, const TrainConfig& config, std::span<const double> grid,
                           std::span<const std::uint64_t> seeds,
                           const std::function<void(double, std::uint64_t, double)>& progress) {
  if (grid.empty()) throw UsageError("lambda grid is empty");
  if (seeds.empty()) throw UsageError("lambda search needs at least one seed");
  LambdaSearch out;
  out.rule = default_lambda_rule(spec.domain);
  for (double lambda : grid) {
    ObjectiveConfig obj;
    obj.mode = spec.domain == Domain::Code ? ObjectiveMode::CodePerState : ObjectiveMode::HybridStatic;
    obj.divergence = divergence;
    obj.lambda = lambda;
    LambdaStat stat;
    stat.lambda = lambda;
    for (std::uint64_t seed : seeds) {
      TrainConfig c = config;
      c.seed = seed;
      const TrainResult r = train(model_config, data, spec, obj, c);
      const double metric = c.criterion == c.stop_criterion
                                ? r.history.best_metric
                                : validation_metric(r.model, spec, data.val, c.criterion, c.val_repeats,
                                                    stream_seed(seed, 0x76616CULL));
      stat.values.push_back(metric);
      if (progress) progress(lambda, seed, metric);
    }
    const double n = static_cast<double>(stat.values.size());
    stat.mean = std::accumulate(stat.values.begin(), stat.values.end(), 0.0) / n;
    if (stat.values.size() > 1) {
      double ss = 0.0;
      for (double v : stat.values) ss += (v - stat.mean) * (v - stat.mean);
      stat.se = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
    }
    out.stats.push_back(std::move(stat));
  }
  out.selected = select_lambda(out.stats, out.rule);
  return out;
}

}  // namespace bglab
