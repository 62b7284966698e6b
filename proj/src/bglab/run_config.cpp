// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#include "bglab/run_config.hpp"

#include "bglab/formats.hpp"

namespace bglab {

using json = nlohmann::json;

TrainConfig RunConfig::resolved_train() const {
  TrainConfig t = train;
  t.seed = seeds.empty() ? train.seed : seeds.front();
  t.criterion = criterion.value_or(default_criterion(domain));
  return t;
}

void RunConfig::validate() const {
  if (seeds.empty()) throw UsageError("at least one seed is required");
  model.validate();
  resolved_train().validate();
  objective.validate();
  kappa.validate();
  if (lambda_grid.empty()) throw UsageError("lambda grid is empty");
  for (double l : lambda_grid) {
    if (!(l >= 0.0 && l <= 1.0)) throw UsageError("lambda grid values must lie in [0, 1]");
  }
  if (repeats <= 0) throw UsageError("repeats must be positive");
  if (!(partition_fraction > 0.0 && partition_fraction <= 0.5)) throw UsageError("partition fraction must be in (0, 0.5]");
}

json RunConfig::to_json() const {
  const TrainConfig t = resolved_train();
  return {
      {"domain", domain_name(domain)},
      {"data_seed", data_seed},
      {"seeds", seeds},
      {"model",
       {{"layers", model.layers},
        {"width", model.width},
        {"heads", model.heads},
        {"ffn_width", model.ffn_width},
        {"dropout", model.dropout},
        {"vocab", model.vocab},
        {"max_positions", model.max_positions}}},
      {"train",
       {{"batch_size", t.batch_size},
        {"learning_rate", t.learning_rate},
        {"warmup_epochs", t.warmup_epochs},
        {"max_epochs", t.max_epochs},
        {"patience", t.patience},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"eps", t.eps},
        {"weight_decay", t.weight_decay},
        {"criterion", criterion_name(t.criterion)},
        {"stop_criterion", criterion_name(t.stop_criterion)},
        {"val_repeats", t.val_repeats},
        {"probe_size", t.probe_size}}},
      {"objective",
       {{"mode", objective_mode_name(objective.mode)},
        {"divergence", divergence_name(objective.divergence)},
        {"lambda", objective.lambda},
        {"warmup_fraction", objective.warmup_fraction},
        {"alpha", objective.alpha}}},
      {"lambda_grid", lambda_grid},
      {"kappa",
       {{"prune_eps", kappa.prune_eps},
        {"node_budget", kappa.node_budget},
        {"step_loss", step_loss_name(kappa.loss)},
        {"max_rows", kappa.max_rows},
        {"use_abs", kappa_use_abs}}},
      {"analysis", {{"repeats", repeats}, {"partition_fraction", partition_fraction}, {"rollout_seed", rollout_seed}}},
      {"output_dir", output_dir},
  };
}

namespace {

// Rejects keys that the canonical document does not have, so a misspelled
// field cannot be silently ignored. A stored run_hash is accepted.
void check_keys(const json& j, const json& schema, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (where.empty() && it.key() == "run_hash") continue;
    if (!schema.contains(it.key())) throw DataError("unknown run config key '" + where + it.key() + "'");
    const json& expected = schema[it.key()];
    if (expected.is_object()) {
      if (!it.value().is_object()) throw DataError("run config key '" + where + it.key() + "' must be an object");
      check_keys(it.value(), expected, where + it.key() + ".");
    }
  }
}

}  // namespace

RunConfig RunConfig::from_json(const json& j, const RunConfig& base) {
  RunConfig c = base;
  try {
    if (!j.is_object()) throw DataError("run config must be a JSON object");
    check_keys(j, base.to_json(), "");
    if (j.contains("domain")) c.domain = parse_domain(j["domain"].get<std::string>());
    if (j.contains("data_seed")) c.data_seed = j["data_seed"].get<std::uint64_t>();
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("model")) {
      const auto& m = j["model"];
      c.model.layers = m.value("layers", c.model.layers);
      c.model.width = m.value("width", c.model.width);
      c.model.heads = m.value("heads", c.model.heads);
      c.model.ffn_width = m.value("ffn_width", c.model.ffn_width);
      c.model.dropout = m.value("dropout", c.model.dropout);
      c.model.vocab = m.value("vocab", c.model.vocab);
      c.model.max_positions = m.value("max_positions", c.model.max_positions);
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      c.train.batch_size = t.value("batch_size", c.train.batch_size);
      c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
      c.train.warmup_epochs = t.value("warmup_epochs", c.train.warmup_epochs);
      c.train.max_epochs = t.value("max_epochs", c.train.max_epochs);
      c.train.patience = t.value("patience", c.train.patience);
      c.train.beta1 = t.value("beta1", c.train.beta1);
      c.train.beta2 = t.value("beta2", c.train.beta2);
      c.train.eps = t.value("eps", c.train.eps);
      c.train.weight_decay = t.value("weight_decay", c.train.weight_decay);
      c.train.val_repeats = t.value("val_repeats", c.train.val_repeats);
      c.train.probe_size = t.value("probe_size", c.train.probe_size);
      if (t.contains("stop_criterion")) {
        c.train.stop_criterion = parse_criterion(t["stop_criterion"].get<std::string>());
      }
      if (t.contains("criterion")) {
        const auto name = t["criterion"].get<std::string>();
        c.criterion = name == "auto" ? std::nullopt : std::optional(parse_criterion(name));
      }
    }
    if (j.contains("objective")) {
      const auto& o = j["objective"];
      if (o.contains("mode")) c.objective.mode = parse_objective_mode(o["mode"].get<std::string>());
      if (o.contains("divergence")) c.objective.divergence = parse_divergence(o["divergence"].get<std::string>());
      c.objective.lambda = o.value("lambda", c.objective.lambda);
      c.objective.warmup_fraction = o.value("warmup_fraction", c.objective.warmup_fraction);
      c.objective.alpha = o.value("alpha", c.objective.alpha);
    }
    if (j.contains("lambda_grid")) c.lambda_grid = j["lambda_grid"].get<std::vector<double>>();
    if (j.contains("kappa")) {
      const auto& k = j["kappa"];
      c.kappa.prune_eps = k.value("prune_eps", c.kappa.prune_eps);
      c.kappa.node_budget = k.value("node_budget", c.kappa.node_budget);
      if (k.contains("step_loss")) c.kappa.loss = parse_step_loss(k["step_loss"].get<std::string>());
      c.kappa.max_rows = k.value("max_rows", c.kappa.max_rows);
      c.kappa_use_abs = k.value("use_abs", c.kappa_use_abs);
    }
    if (j.contains("analysis")) {
      const auto& a = j["analysis"];
      c.repeats = a.value("repeats", c.repeats);
      c.partition_fraction = a.value("partition_fraction", c.partition_fraction);
      c.rollout_seed = a.value("rollout_seed", c.rollout_seed);
    }
    if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>();
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed run config: ") + e.what());
  }
  return c;
}

std::string RunConfig::hash() const {
  json j = to_json();
  j.erase("output_dir");
  Fnv1a h;
  h.update(j.dump());
  return h.hex();
}

RunConfig load_run_config(const std::string& path, const RunConfig& base) {
  const std::string text = read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError("malformed run config " + path + ": " + e.what());
  }
  return RunConfig::from_json(j, base);
}

}  // namespace bglab
