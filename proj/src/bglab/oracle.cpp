// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#include "bglab/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace bglab {

Domain parse_domain(std::string_view name) {
  if (name == "dialogue") return Domain::Dialogue;
  if (name == "math") return Domain::Math;
  if (name == "code") return Domain::Code;
  throw UsageError("unknown domain '" + std::string(name) + "' (expected dialogue, math or code)");
}

std::string_view domain_name(Domain domain) noexcept {
  switch (domain) {
    case Domain::Dialogue: return "dialogue";
    case Domain::Math: return "math";
    case Domain::Code: return "code";
  }
  return "?";
}

std::string_view state_kind_name(StateKind kind) noexcept {
  switch (kind) {
    case StateKind::HighRisk: return "high_risk";
    case StateKind::Flexible: return "flexible";
    case StateKind::Deterministic: return "deterministic";
  }
  return "?";
}

StateKind parse_state_kind(std::string_view name) {
  if (name == "high_risk") return StateKind::HighRisk;
  if (name == "flexible") return StateKind::Flexible;
  if (name == "deterministic") return StateKind::Deterministic;
  throw DataError("unknown state kind '" + std::string(name) + "'");
}

std::string_view split_name(Split split) noexcept {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Eval: return "eval";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "eval") return Split::Eval;
  throw DataError("unknown split '" + std::string(name) + "'");
}

std::vector<double> flexible_probs() {
  std::vector<double> logits(kFlexibleChoices);
  for (int i = 0; i < kFlexibleChoices; ++i) {
    logits[i] = -kFlexibleLogitSpan * i / (kFlexibleChoices - 1);
  }
  double z = 0.0;
  for (double l : logits) z += std::exp(l);
  std::vector<double> probs(kFlexibleChoices);
  for (int i = 0; i < kFlexibleChoices; ++i) probs[i] = std::exp(logits[i]) / z;
  return probs;
}

std::vector<double> high_risk_probs(double main_prob) {
  const double rest = (1.0 - main_prob) / (kHighRiskChoices - 1);
  std::vector<double> probs(kHighRiskChoices, rest);
  probs[0] = main_prob;
  return probs;
}

namespace {

// One template entry: a literal layout word, or a typed decision slot.
struct Slot {
  StateKind kind;
  std::string role;
  std::vector<std::string> words;  // one word for layout, candidates otherwise
};

Slot lit(std::string word) { return {StateKind::Deterministic, "layout", {std::move(word)}}; }
Slot risk(std::string role, std::vector<std::string> words) {
  return {StateKind::HighRisk, std::move(role), std::move(words)};
}
Slot flex(std::string role, std::vector<std::string> words) {
  return {StateKind::Flexible, std::move(role), std::move(words)};
}

std::vector<Slot> words(std::initializer_list<const char*> list) {
  std::vector<Slot> out;
  for (const char* w : list) out.push_back(lit(w));
  return out;
}

void append(std::vector<Slot>& dst, std::vector<Slot> src) {
  dst.insert(dst.end(), std::make_move_iterator(src.begin()), std::make_move_iterator(src.end()));
}

// Dialogue: tone, recipient, required fact, tone, date/time, forbidden constraint.
std::vector<Slot> dialogue_template() {
  std::vector<Slot> t;
  append(t, words({"Hi", "team", ","}));
  t.push_back(flex("tone", {"glad", "happy", "pleased", "keen", "eager", "excited", "thrilled", "delighted"}));
  append(t, words({"to", "confirm", ":", "please", "send", "the", "report", "to"}));
  t.push_back(risk("recipient", {"Alice", "Bob", "Carol", "Dave"}));
  append(t, words({"and", "include"}));
  t.push_back(risk("required_fact", {"budget", "totals", "forecast", "invoice"}));
  append(t, words({"."}));
  t.push_back(flex("tone", {"Also", "Additionally", "Moreover", "Besides", "Furthermore", "Plus", "Likewise",
                            "Similarly"}));
  append(t, words({",", "the", "review", "happens", "on"}));
  t.push_back(risk("date_time", {"Monday", "Tuesday", "Friday", "Sunday"}));
  append(t, words({";", "remember"}));
  t.push_back(risk("forbidden_constraint", {"no-cc", "no-attachments", "no-drafts", "no-links"}));
  append(t, words({"before", "then", ".", "Thanks", ",", "see", "you"}));
  return t;
}

// Math: substitution, equivalent form, operator, computed value, final answer, equivalent form.
std::vector<Slot> math_template() {
  std::vector<Slot> t;
  append(t, words({"Let", "x", "="}));
  t.push_back(risk("substitution", {"3", "5", "7", "11"}));
  append(t, words({".", "Rewrite", "y", "as"}));
  t.push_back(flex("equivalent_form", {"2k", "k+k", "2*k", "k*2", "k<<1", "4k/2", "k+k+0", "1k+k"}));
  append(t, words({".", "Now", "z", "=", "x"}));
  t.push_back(risk("operator", {"+", "-", "*", "/"}));
  append(t, words({"y", ",", "so", "z", "="}));
  t.push_back(risk("computed_value", {"13", "17", "19", "23"}));
  append(t, words({".", "Check", ":", "z", "is", "positive", ".", "Answer", ":"}));
  t.push_back(risk("final_answer", {"z=13", "z=17", "z=19", "z=23"}));
  append(t, words({".", "Equivalently", ",", "z", "="}));
  t.push_back(flex("equivalent_form", {"26/2", "39/3", "52/4", "65/5", "13/1", "78/6", "91/7", "104/8"}));
  append(t, words({"in", "lowest", "terms", ".", "Done"}));
  return t;
}

// Code: three equivalent implementations, then operator, branch guard,
// operator and return semantics inside a Python-like function.
std::vector<Slot> code_template() {
  std::vector<Slot> t;
  append(t, words({"def", "f", "(", "xs", ")", ":", "NL", "\"\"\"", "sum", "items", "\"\"\"", "NL"}));
  t.push_back(flex("equivalent_implementation",
                   {"total=0", "total=0.0", "total=int()", "total=0*1", "total=False+0", "total=len([])",
                    "total=sum([])", "total=abs(0)"}));
  append(t, words({"NL", "for", "x", "in"}));
  t.push_back(flex("equivalent_implementation",
                   {"xs", "list(xs)", "tuple(xs)", "iter(xs)", "xs[:]", "[*xs]", "sorted(xs)", "reversed(xs)"}));
  append(t, words({":", "NL"}));
  t.push_back(flex("equivalent_implementation",
                   {"pass", "...", "0", "None", "True", "()", "[]", "''"}));
  append(t, words({"NL", "total", "=", "total"}));
  t.push_back(risk("operator", {"+", "-", "*", "//"}));
  append(t, words({"x", "NL", "if"}));
  t.push_back(risk("branch_guard", {"total>0", "total<0", "total==0", "total!=0"}));
  append(t, words({":", "NL", "total", "=", "total"}));
  t.push_back(risk("operator", {"+=", "-=", "*=", "%="}));
  append(t, words({"1", "NL", "return"}));
  t.push_back(risk("return_semantics", {"total", "-total", "None", "x"}));
  append(t, words({"NL", "print", "(", "f", ")", "NL"}));
  return t;
}

OracleSpec assemble(Domain domain, const std::vector<Slot>& slots) {
  OracleSpec spec;
  spec.domain = domain;
  spec.token_names.assign(kVocabSize, "");
  spec.token_names[kPad] = "<pad>";
  spec.token_names[kBos] = "<bos>";
  spec.token_names[kEos] = "<eos>";

  Token next = kEos + 1;
  auto fresh = [&](const std::string& name) {
    if (next >= kVocabSize) throw std::logic_error("template needs more than 64 tokens");
    spec.token_names[next] = name;
    return next++;
  };

  // Decision candidates first: every decision slot gets its own tokens.
  std::vector<std::vector<Token>> slot_tokens(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].kind == StateKind::Deterministic) continue;
    for (const auto& w : slots[i].words) slot_tokens[i].push_back(fresh(w));
  }
  // Layout words share one token per distinct word.
  std::map<std::string, Token> layout;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].kind != StateKind::Deterministic) continue;
    const auto& w = slots[i].words.front();
    auto it = layout.find(w);
    if (it == layout.end()) it = layout.emplace(w, fresh(w)).first;
    slot_tokens[i].push_back(it->second);
  }
  for (int i = 0; next < kVocabSize; ++i) fresh("<unused-" + std::to_string(i) + ">");

  double main_prob = kHighRiskStart;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    StateSpec state;
    state.kind = slots[i].kind;
    state.role = slots[i].role;
    state.candidates = slot_tokens[i];
    switch (state.kind) {
      case StateKind::HighRisk:
        state.probs = high_risk_probs(main_prob);
        main_prob = std::max(kHighRiskFloor, main_prob - kHighRiskDecay);
        break;
      case StateKind::Flexible: state.probs = flexible_probs(); break;
      case StateKind::Deterministic: state.probs = {1.0}; break;
    }
    if (state.kind != StateKind::Deterministic) spec.decision_positions.push_back(static_cast<int>(i));
    spec.schedule.push_back(std::move(state));
  }
  spec.schedule.push_back({StateKind::Deterministic, "end", {kEos}, {1.0}});
  return spec;
}

}  // namespace

OracleSpec build_oracle(Domain domain) {
  switch (domain) {
    case Domain::Dialogue: return assemble(domain, dialogue_template());
    case Domain::Math: return assemble(domain, math_template());
    case Domain::Code: return assemble(domain, code_template());
  }
  throw UsageError("unknown domain");
}

void validate_oracle(const OracleSpec& spec) {
  auto fail = [](const std::string& msg) { throw DataError("invalid oracle spec: " + msg); };
  if (spec.token_names.size() != static_cast<std::size_t>(kVocabSize)) fail("token table must have 64 entries");
  if (spec.schedule.empty()) fail("empty schedule");
  std::set<Token> used;
  std::vector<int> decisions;
  for (int pos = 0; pos < spec.template_length(); ++pos) {
    const auto& st = spec.schedule[pos];
    const std::string where = "position " + std::to_string(pos) + ": ";
    if (st.candidates.size() != st.probs.size()) fail(where + "candidates/probs length mismatch");
    const std::size_t expected = st.kind == StateKind::HighRisk   ? kHighRiskChoices
                                 : st.kind == StateKind::Flexible ? kFlexibleChoices
                                                                  : 1;
    if (st.candidates.size() != expected) fail(where + "wrong candidate count");
    double sum = 0.0;
    for (double p : st.probs) {
      if (!(p >= 0.0)) fail(where + "negative probability");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-12) fail(where + "probabilities do not sum to 1");
    for (Token tok : st.candidates) {
      if (!in_eval_set(tok)) fail(where + "candidate outside the evaluation action set");
    }
    if (st.kind != StateKind::Deterministic) {
      decisions.push_back(pos);
      for (Token tok : st.candidates) {
        if (!used.insert(tok).second) fail(where + "candidate sets of decision states overlap");
      }
    }
  }
  if (decisions != spec.decision_positions) fail("decision_positions do not match the schedule");
  const auto& last = spec.schedule.back();
  if (last.kind != StateKind::Deterministic || last.candidates.front() != kEos) fail("final token must be EOS");
}

Distribution teacher_distribution(const OracleSpec& spec, int position) {
  if (position < 0 || position >= spec.template_length()) {
    throw UsageError("position " + std::to_string(position) + " outside template of length " +
                     std::to_string(spec.template_length()));
  }
  Distribution dist{};
  const auto& st = spec.schedule[position];
  for (std::size_t i = 0; i < st.candidates.size(); ++i) dist[st.candidates[i]] += st.probs[i];
  return dist;
}

Example sample_example(const OracleSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Example ex;
  ex.domain = spec.domain;
  ex.seed = seed;
  ex.tokens.reserve(spec.schedule.size());
  for (const auto& st : spec.schedule) {
    // One draw per position, deterministic ones included, so the stream
    // layout does not depend on the schedule.
    const double u = uniform01(rng);
    std::size_t pick = st.candidates.size() - 1;
    double acc = 0.0;
    for (std::size_t i = 0; i < st.candidates.size(); ++i) {
      acc += st.probs[i];
      if (u < acc) {
        pick = i;
        break;
      }
    }
    ex.tokens.push_back(st.candidates[pick]);
  }
  return ex;
}

void validate_example(const OracleSpec& spec, const Example& example) {
  if (example.domain != spec.domain) throw DataError("example domain does not match oracle");
  if (example.tokens.size() != spec.schedule.size()) {
    throw DataError("example length " + std::to_string(example.tokens.size()) + " != template length " +
                    std::to_string(spec.schedule.size()));
  }
  for (std::size_t t = 0; t < example.tokens.size(); ++t) {
    const auto& c = spec.schedule[t].candidates;
    if (std::find(c.begin(), c.end(), example.tokens[t]) == c.end()) {
      throw DataError("token " + std::to_string(example.tokens[t]) + " at position " + std::to_string(t) +
                      " is not a scheduled candidate");
    }
  }
}

const std::vector<Example>& Dataset::split(Split which) const {
  switch (which) {
    case Split::Train: return train;
    case Split::Val: return val;
    case Split::Eval: return eval;
  }
  return train;
}

Dataset generate_dataset(const OracleSpec& spec, std::uint64_t seed, DatasetSizes sizes) {
  Dataset ds;
  ds.domain = spec.domain;
  ds.seed = seed;
  auto fill = [&](std::vector<Example>& out, Split split, int count) {
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
      out.push_back(sample_example(spec, stream_seed(seed, static_cast<std::uint64_t>(split) + 1, i)));
    }
  };
  fill(ds.train, Split::Train, sizes.train);
  fill(ds.val, Split::Val, sizes.val);
  fill(ds.eval, Split::Eval, sizes.eval);
  return ds;
}

}  // namespace bglab
