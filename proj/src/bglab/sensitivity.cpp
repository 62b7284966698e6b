// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#include "bglab/sensitivity.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <mutex>
#include <limits>
#include <numeric>
#include <optional>
#include <thread>

namespace bglab {

std::string_view step_loss_name(StepLossKind kind) noexcept {
  switch (kind) {
    case StepLossKind::ForwardKL: return "fkl";
    case StepLossKind::CrossEntropy: return "ce";
  }
  return "?";
}

StepLossKind parse_step_loss(std::string_view name) {
  if (name == "fkl") return StepLossKind::ForwardKL;
  if (name == "ce") return StepLossKind::CrossEntropy;
  throw UsageError("unknown step loss '" + std::string(name) + "' (expected fkl or ce)");
}

namespace {

double lse(std::span<const double> z) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : z) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  return mx + std::log(s);
}

}  // namespace

StepLoss make_step_loss(StepLossKind kind) {
  // Both losses only touch the teacher's support, which is tiny.
  if (kind == StepLossKind::ForwardKL) {
    return [](const StateSpec& st, std::span<const double> z) {
      const double norm = lse(z);
      double out = 0.0;
      for (std::size_t i = 0; i < st.candidates.size(); ++i) {
        const double p = st.probs[i];
        if (p > 0.0) out += p * (std::log(p) - (z[st.candidates[i]] - norm));
      }
      return out;
    };
  }
  return [](const StateSpec& st, std::span<const double> z) {
    const double norm = lse(z);
    double out = 0.0;
    for (std::size_t i = 0; i < st.candidates.size(); ++i) out -= st.probs[i] * (z[st.candidates[i]] - norm);
    return out;
  };
}

void KappaSettings::validate() const {
  if (!(prune_eps >= 0.0 && prune_eps < 1.0)) throw UsageError("prune_eps must be in [0, 1)");
  if (max_rows < kEvalActions) throw UsageError("max_rows must be at least 62");
}

template <class T>
double logit_magnitude_bound(const Model<T>& model) {
  // LayerNorm output is gamma * xhat + beta with ||xhat||_2 = sqrt(d) at most,
  // so |logit_a| <= ||gamma . w_a||_2 sqrt(d) + |beta . w_a| + |b_a|.
  const ModelConfig& c = model.config;
  const auto& lay = model.layout;
  auto W = model.mat(lay.head_weight, c.width, c.vocab);
  auto gain = model.vec(lay.final_gain, c.width);
  auto bias = model.vec(lay.final_bias, c.width);
  auto hb = model.vec(lay.head_bias, c.vocab);
  double best = 0.0;
  for (int a = 0; a < c.vocab; ++a) {
    double g2 = 0.0, bw = 0.0;
    for (int i = 0; i < c.width; ++i) {
      const double w = static_cast<double>(W(i, a));
      g2 += std::pow(static_cast<double>(gain(i)) * w, 2);
      bw += static_cast<double>(bias(i)) * w;
    }
    best = std::max(best, std::sqrt(g2) * std::sqrt(static_cast<double>(c.width)) + std::abs(bw) +
                              std::abs(static_cast<double>(hb(a))));
  }
  return best;
}

template <class T>
double step_loss_bound(const Model<T>& model) {
  // CE = sum_a p_a (lse - z_a) <= log V + 2M, and FKL <= CE.
  return std::log(static_cast<double>(model.config.vocab)) + 2.0 * logit_magnitude_bound(model);
}

namespace {

template <class T>
struct TreeWalk {
  const OracleSpec& spec;
  const KappaSettings& settings;
  const StepLoss& loss;
  double loss_bound;
  int t;
  int last;
  BatchDecoder<T>& decoder;
  DownstreamResult& out;
  std::vector<double> row;
  std::vector<Token> feed;

  void account(const RowMat<T>& logits, const StateSpec& st, double weight) {
    const int R = decoder.rows();
    const int V = static_cast<int>(logits.cols());
    row.resize(V);
    for (int r = 0; r < R; ++r) {
      for (int v = 0; v < V; ++v) row[v] = static_cast<double>(logits(r, v));
      out.q[r] += weight * loss(st, row);
    }
    out.row_steps += static_cast<std::uint64_t>(R);
    if (settings.node_budget != 0 && out.row_steps > settings.node_budget) {
      throw BudgetError("kappa node budget exceeded (" + std::to_string(settings.node_budget) + " row-steps)");
    }
  }

  // logits currently hold the student's prediction for position u.
  void visit(int u, double weight, const RowMat<T>& logits) {
    const StateSpec& st = spec.schedule[u];
    account(logits, st, weight);
    if (u == last) return;
    const int depth = u - t;
    for (std::size_t i = 0; i < st.candidates.size(); ++i) {
      const double p = weight * st.probs[i];
      if (p == 0.0) continue;
      if (p < settings.prune_eps) {
        out.dropped_mass += p;
        out.error_bound += p * static_cast<double>(last - u) * loss_bound;
        continue;
      }
      decoder.rewind(depth);
      std::fill(feed.begin(), feed.end(), st.candidates[i]);
      const RowMat<T>& next = decoder.step(feed);
      visit(u + 1, p, next);
    }
  }
};

}  // namespace

template <class T>
DownstreamResult expected_downstream(const Model<T>& model, const OracleSpec& spec, int t,
                                     std::span<const InferenceCache<T>* const> bases, std::span<const int> row_base,
                                     std::span<const Token> forced, const KappaSettings& settings,
                                     const StepLoss& loss, double loss_bound) {
  const int L = spec.template_length();
  if (t < 0 || t >= L) throw UsageError("position " + std::to_string(t) + " outside template");
  if (row_base.size() != forced.size()) throw UsageError("one forced token per row required");
  for (Token a : forced) {
    if (!in_eval_set(a)) throw UsageError("forced token " + std::to_string(a) + " is not an evaluation action");
  }
  for (const auto* b : bases) {
    if (b->length != t + 1) throw UsageError("base cache must hold BOS plus the prefix before position t");
  }
  DownstreamResult out;
  out.q.assign(forced.size(), 0.0);
  if (t == L - 1 || forced.empty()) return out;

  BatchDecoder<T> decoder(model, std::vector<const InferenceCache<T>*>(bases.begin(), bases.end()),
                          std::vector<int>(row_base.begin(), row_base.end()), L - 1 - t);
  TreeWalk<T> walk{spec, settings, loss, loss_bound, t, L - 1, decoder, out, {}, std::vector<Token>(forced.size())};
  const RowMat<T>& first = decoder.step(forced);
  walk.visit(t + 1, 1.0, first);
  return out;
}

namespace {

const StepLoss& resolve_loss(const StepLoss& loss, const KappaSettings& settings, StepLoss& storage) {
  if (loss) return loss;
  storage = make_step_loss(settings.loss);
  return storage;
}

template <class T>
InferenceCache<T> prefix_cache(const Model<T>& model, std::span<const Token> tokens, int t) {
  auto cache = InferenceCache<T>::empty(model.config);
  extend_cache(model, cache, kBos);
  for (int i = 0; i < t; ++i) extend_cache(model, cache, tokens[i]);
  return cache;
}

void check_query(const OracleSpec& spec, const Example& example, int t) {
  if (static_cast<int>(example.tokens.size()) != spec.template_length()) {
    throw UsageError("example length does not match the oracle template");
  }
  if (t < 0 || t >= spec.template_length()) throw UsageError("position " + std::to_string(t) + " outside template");
}

}  // namespace

template <class T>
double q_value(const Model<T>& model, const OracleSpec& spec, const Example& example, int t, Token forced,
               const KappaSettings& settings, const StepLoss& loss) {
  check_query(spec, example, t);
  if (!in_eval_set(forced)) throw UsageError("forced token " + std::to_string(forced) + " is not an evaluation action");
  StepLoss storage;
  const StepLoss& fn = resolve_loss(loss, settings, storage);
  const auto cache = prefix_cache(model, example.tokens, t);
  const InferenceCache<T>* bases[1] = {&cache};
  const int row_base[1] = {0};
  const Token tok[1] = {forced};
  return expected_downstream<T>(model, spec, t, bases, row_base, tok, settings, fn, step_loss_bound(model)).q[0];
}

template <class T>
BruteForceResult brute_force_q(const Model<T>& model, const OracleSpec& spec, const Example& example, int t,
                               Token forced, const StepLoss& loss) {
  check_query(spec, example, t);
  if (!in_eval_set(forced)) throw UsageError("forced token " + std::to_string(forced) + " is not an evaluation action");
  const StepLoss fn = loss ? loss : make_step_loss(StepLossKind::ForwardKL);
  const int L = spec.template_length();
  BruteForceResult res;
  if (t == L - 1) {
    res.total_path_probability = 1.0;
    res.paths = 1;
    return res;
  }
  // Free positions are t+1 .. L-2; the token at L-1 is never fed back.
  std::vector<int> free;
  std::uint64_t count = 1;
  for (int u = t + 1; u <= L - 2; ++u) {
    free.push_back(u);
    count *= spec.schedule[u].candidates.size();
    if (count > kBruteForcePathLimit) {
      throw BudgetError("brute-force path count exceeds " + std::to_string(kBruteForcePathLimit));
    }
  }
  std::vector<std::size_t> pick(free.size(), 0);
  std::vector<Token> inputs(L);
  inputs[0] = kBos;
  for (int i = 0; i < t; ++i) inputs[i + 1] = example.tokens[i];
  inputs[t + 1] = forced;
  std::vector<double> row;
  for (std::uint64_t n = 0; n < count; ++n) {
    double prob = 1.0;
    for (std::size_t k = 0; k < free.size(); ++k) {
      const auto& st = spec.schedule[free[k]];
      inputs[free[k] + 1] = st.candidates[pick[k]];
      prob *= st.probs[pick[k]];
    }
    const RowMat<T> logits = forward_logits(model, inputs);
    double path_loss = 0.0;
    for (int u = t + 1; u < L; ++u) {
      row.assign(logits.cols(), 0.0);
      for (Eigen::Index v = 0; v < logits.cols(); ++v) row[v] = static_cast<double>(logits(u, v));
      path_loss += fn(spec.schedule[u], row);
    }
    res.q += prob * path_loss;
    res.total_path_probability += prob;
    ++res.paths;
    for (std::size_t k = free.size(); k-- > 0;) {
      if (++pick[k] < spec.schedule[free[k]].candidates.size()) break;
      pick[k] = 0;
    }
  }
  return res;
}

StateKappa make_state_kappa(const OracleSpec& spec, int example, int position, Token token, std::vector<double> q,
                            double error_bound) {
  if (q.size() != static_cast<std::size_t>(kEvalActions)) throw UsageError("expected 62 Q values");
  const StateSpec& st = spec.schedule.at(position);
  StateKappa s;
  s.example = example;
  s.position = position;
  s.kind = st.kind;
  s.token = token;
  s.error_bound = error_bound;
  for (std::size_t i = 0; i < st.candidates.size(); ++i) s.baseline += st.probs[i] * q[eval_index(st.candidates[i])];
  s.kappa.resize(kEvalActions);
  for (int a = 0; a < kEvalActions; ++a) {
    s.kappa[a] = q[a] - s.baseline;
    s.kappa_state += s.kappa[a];
    s.kappa_state_abs += std::abs(s.kappa[a]);
  }
  s.q = std::move(q);
  return s;
}

template <class T>
StateKappa kappa_for_state(const Model<T>& model, const OracleSpec& spec, const Example& example, int example_index,
                           int t, const KappaSettings& settings, const StepLoss& loss) {
  check_query(spec, example, t);
  settings.validate();
  StepLoss storage;
  const StepLoss& fn = resolve_loss(loss, settings, storage);
  const auto cache = prefix_cache(model, example.tokens, t);
  const InferenceCache<T>* bases[1] = {&cache};
  std::vector<int> row_base(kEvalActions, 0);
  std::vector<Token> forced(kEvalActions);
  for (int a = 0; a < kEvalActions; ++a) forced[a] = eval_token(a);
  auto res = expected_downstream<T>(model, spec, t, bases, row_base, forced, settings, fn, step_loss_bound(model));
  return make_state_kappa(spec, example_index, t, example.tokens[t], std::move(res.q), res.error_bound);
}

const StateKappa& KappaTable::at(int example, int position) const {
  if (example < 0 || example >= examples || position < 0 || position >= template_length) {
    throw UsageError("kappa table has no state (" + std::to_string(example) + ", " + std::to_string(position) + ")");
  }
  const auto& s = states.at(static_cast<std::size_t>(example) * template_length + position);
  if (s.example != example || s.position != position) throw DataError("kappa table is not in (example, position) order");
  return s;
}

template <class T>
KappaTable build_kappa_table(const Model<T>& model, const OracleSpec& spec, std::span<const Example> examples,
                             const KappaSettings& settings, const TableCallbacks& callbacks,
                             std::vector<StateKappa> completed) {
  settings.validate();
  const int L = spec.template_length();
  const int N = static_cast<int>(examples.size());
  if (N == 0) throw UsageError("kappa table needs at least one example");
  for (const auto& ex : examples) check_query(spec, ex, 0);

  KappaTable table;
  table.domain = spec.domain;
  table.template_length = L;
  table.examples = N;
  table.model_id = model_id(model);
  table.settings = settings;
  table.step_loss_bound = step_loss_bound(model);

  std::vector<std::optional<StateKappa>> slots(static_cast<std::size_t>(N) * L);
  for (auto& s : completed) {
    if (s.example < 0 || s.example >= N || s.position < 0 || s.position >= L) {
      throw DataError("completed state outside the table");
    }
    const std::size_t idx = static_cast<std::size_t>(s.example) * L + s.position;
    slots[idx] = std::move(s);
  }

  const StepLoss fn = make_step_loss(settings.loss);
  std::atomic<std::uint64_t> used{0};
  const int threads = worker_threads();
  const int max_prefixes = std::max(1, settings.max_rows / kEvalActions);
  std::mutex emit;

  for (int t = 0; t < L; ++t) {
    // Group pending examples by their prefix before t.
    std::map<std::vector<Token>, std::vector<int>> groups;
    for (int e = 0; e < N; ++e) {
      const std::size_t idx = static_cast<std::size_t>(e) * L + t;
      if (slots[idx]) continue;
      if (callbacks.skip && callbacks.skip(e, t)) continue;
      groups[std::vector<Token>(examples[e].tokens.begin(), examples[e].tokens.begin() + t)].push_back(e);
    }
    if (groups.empty()) continue;
    std::vector<std::pair<const std::vector<Token>*, const std::vector<int>*>> order;
    for (const auto& [prefix, members] : groups) order.emplace_back(&prefix, &members);
    // Batch composition is fixed so results do not depend on the thread count.
    const int per_batch = max_prefixes;
    const std::size_t batches = (order.size() + per_batch - 1) / per_batch;

    auto run_batch = [&](std::size_t b) {
      const std::size_t start = b * per_batch;
      const std::size_t stop = std::min(order.size(), start + per_batch);
      std::vector<InferenceCache<T>> caches;
      caches.reserve(stop - start);
      for (std::size_t g = start; g < stop; ++g) caches.push_back(prefix_cache(model, *order[g].first, t));
      std::vector<const InferenceCache<T>*> bases;
      std::vector<int> row_base;
      std::vector<Token> forced;
      for (std::size_t g = 0; g < caches.size(); ++g) {
        bases.push_back(&caches[g]);
        for (int a = 0; a < kEvalActions; ++a) {
          row_base.push_back(static_cast<int>(g));
          forced.push_back(eval_token(a));
        }
      }
      KappaSettings local = settings;
      if (settings.node_budget != 0) {
        const std::uint64_t so_far = used.load();
        local.node_budget = settings.node_budget > so_far ? settings.node_budget - so_far : 1;
      }
      const std::string exhausted = "kappa node budget of " + std::to_string(settings.node_budget) +
                                    " row-steps exhausted at position " + std::to_string(t);
      DownstreamResult res;
      try {
        res = expected_downstream<T>(model, spec, t, bases, row_base, forced, local, fn, table.step_loss_bound);
      } catch (const BudgetError&) {
        throw BudgetError(exhausted);
      }
      if (settings.node_budget != 0 && used.fetch_add(res.row_steps) + res.row_steps > settings.node_budget) {
        throw BudgetError(exhausted);
      }
      std::lock_guard lock(emit);
      for (std::size_t g = 0; g < caches.size(); ++g) {
        std::vector<double> q(res.q.begin() + g * kEvalActions, res.q.begin() + (g + 1) * kEvalActions);
        for (int e : *order[start + g].second) {
          StateKappa s = make_state_kappa(spec, e, t, examples[e].tokens[t], q, res.error_bound);
          if (callbacks.on_state) callbacks.on_state(s);
          slots[static_cast<std::size_t>(e) * L + t] = std::move(s);
        }
      }
    };

    const int workers = static_cast<int>(std::min<std::size_t>(threads, batches));
    if (workers <= 1) {
      for (std::size_t b = 0; b < batches; ++b) run_batch(b);
      continue;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        try {
          for (std::size_t b; (b = next.fetch_add(1)) < batches;) run_batch(b);
        } catch (...) {
          std::lock_guard lock(emit);
          if (!failure) failure = std::current_exception();
          next.store(batches);
        }
      });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
  }

  table.states.reserve(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (!slots[i]) {
      throw DataError("kappa table incomplete: state (" + std::to_string(i / L) + ", " + std::to_string(i % L) +
                      ") was skipped without a completed record");
    }
    table.states.push_back(std::move(*slots[i]));
  }
  return table;
}

Partition partition_by_scores(const KappaTable& layout, std::span<const double> scores, double fraction,
                              bool exclude_terminal) {
  if (scores.size() != layout.states.size()) throw UsageError("one score per table state required");
  if (!(fraction > 0.0 && fraction <= 0.5)) throw UsageError("partition fraction must be in (0, 0.5]");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < layout.states.size(); ++i) {
    if (!exclude_terminal || layout.states[i].position != layout.template_length - 1) eligible.push_back(i);
  }
  if (eligible.size() < kMinPartitionStates) {
    throw DataError("partition needs at least " + std::to_string(kMinPartitionStates) + " eligible states");
  }
  auto key = [&](std::size_t i) { return std::pair(layout.states[i].example, layout.states[i].position); };
  std::stable_sort(eligible.begin(), eligible.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return key(a) < key(b);
  });
  const auto n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(eligible.size())));
  Partition p;
  p.fraction = fraction;
  p.eligible = eligible.size();
  p.exclude_terminal = exclude_terminal;
  p.bridge.assign(eligible.begin(), eligible.begin() + n);
  p.garden.assign(eligible.end() - n, eligible.end());
  return p;
}

Partition partition_bridge_garden(const KappaTable& table, double fraction, bool use_abs, bool exclude_terminal) {
  std::vector<double> scores;
  scores.reserve(table.states.size());
  for (const auto& s : table.states) scores.push_back(use_abs ? s.kappa_state_abs : s.kappa_state);
  Partition p = partition_by_scores(table, scores, fraction, exclude_terminal);
  p.use_abs = use_abs;
  return p;
}

Partition common_partition(std::span<const KappaTable* const> tables, double fraction, bool use_abs,
                           bool exclude_terminal) {
  if (tables.empty()) throw UsageError("common partition needs at least one table");
  const KappaTable& first = *tables.front();
  std::vector<double> scores(first.states.size(), 0.0);
  for (const KappaTable* tab : tables) {
    if (tab->domain != first.domain || tab->states.size() != first.states.size()) {
      throw DataError("kappa tables cover different state sets");
    }
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const auto& s = tab->states[i];
      if (s.example != first.states[i].example || s.position != first.states[i].position) {
        throw DataError("kappa tables cover different state sets");
      }
      scores[i] += (use_abs ? s.kappa_state_abs : s.kappa_state) / static_cast<double>(tables.size());
    }
  }
  Partition p = partition_by_scores(first, scores, fraction, exclude_terminal);
  p.use_abs = use_abs;
  return p;
}

#define BGLAB_INSTANTIATE(T)                                                                                     \
  template double logit_magnitude_bound<T>(const Model<T>&);                                                     \
  template double step_loss_bound<T>(const Model<T>&);                                                           \
  template DownstreamResult expected_downstream<T>(const Model<T>&, const OracleSpec&, int,                      \
                                                   std::span<const InferenceCache<T>* const>, std::span<const int>, \
                                                   std::span<const Token>, const KappaSettings&, const StepLoss&, \
                                                   double);                                                      \
  template double q_value<T>(const Model<T>&, const OracleSpec&, const Example&, int, Token, const KappaSettings&, \
                             const StepLoss&);                                                                   \
  template BruteForceResult brute_force_q<T>(const Model<T>&, const OracleSpec&, const Example&, int, Token,     \
                                             const StepLoss&);                                                   \
  template StateKappa kappa_for_state<T>(const Model<T>&, const OracleSpec&, const Example&, int, int,           \
                                         const KappaSettings&, const StepLoss&);                                 \
  template KappaTable build_kappa_table<T>(const Model<T>&, const OracleSpec&, std::span<const Example>,         \
                                           const KappaSettings&, const TableCallbacks&, std::vector<StateKappa>);

BGLAB_INSTANTIATE(float)
BGLAB_INSTANTIATE(double)

#undef BGLAB_INSTANTIATE

}  // namespace bglab
