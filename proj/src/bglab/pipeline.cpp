// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#include "bglab/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "bglab/analysis.hpp"
#include "bglab/formats.hpp"
#include "bglab/policy.hpp"

namespace bglab {

using json = nlohmann::json;

namespace {

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

Dataset load_dataset(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("dataset not found: " + path.string());
  return dataset_from_jsonl(read_file(path));
}

RunConfig with_domain(const RunConfig& config, Domain domain) {
  if (config.domain != domain) {
    throw DataError("config domain " + std::string(domain_name(config.domain)) + " does not match the dataset (" +
                    std::string(domain_name(domain)) + ")");
  }
  config.validate();
  return config;
}

void write_config(const fs::path& dir, const RunConfig& c) {
  json j = c.to_json();
  j["run_hash"] = c.hash();
  write_file_atomic(dir / "config.json", j.dump(2) + "\n");
}

std::string objective_label(const ObjectiveConfig& o) {
  std::string s(objective_mode_name(o.mode));
  if (o.mode != ObjectiveMode::Hard) s += "/" + std::string(divergence_name(o.divergence));
  if (o.mode == ObjectiveMode::HybridStatic || o.mode == ObjectiveMode::HybridCurriculum ||
      o.mode == ObjectiveMode::RiskGuided || o.mode == ObjectiveMode::CodePerState) {
    s += "/lambda=" + format_double(o.lambda);
  }
  return s;
}

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

fs::path resolve_output_dir(const fs::path& dir) {
  if (dir.is_absolute()) return dir;
  if (const char* root = std::getenv("BGLAB_OUTPUT_ROOT"); root && *root) return fs::path(root) / dir;
  return dir;
}

GenOutput cmd_gen(const RunConfig& config, const fs::path& out_dir, bool force, const Logger& log) {
  config.validate();
  const fs::path dir = resolve_output_dir(out_dir);
  const OracleSpec spec = build_oracle(config.domain);
  validate_oracle(spec);
  const Dataset data = generate_dataset(spec, config.data_seed);
  GenOutput out;
  out.run_hash = config.hash();
  out.dataset = dir / "dataset.jsonl";
  out.oracle = dir / "oracle.json";
  const std::vector<std::pair<fs::path, std::string>> files = {
      {out.dataset, dataset_to_jsonl(data, out.run_hash)}, {out.oracle, oracle_to_json(spec, out.run_hash)}};
  bool all_same = true;
  for (const auto& [path, text] : files) {
    if (!fs::exists(path)) {
      all_same = false;
      continue;
    }
    if (read_file(path) == text) continue;
    all_same = false;
    if (!force) throw UsageError(path.string() + " exists with different content (use --force to overwrite)");
  }
  out.unchanged = all_same;
  if (!all_same) {
    for (const auto& [path, text] : files) write_file_atomic(path, text);
  }
  say(log, "gen " + std::string(domain_name(config.domain)) + " seed " + std::to_string(config.data_seed) + ": " +
               std::to_string(data.train.size()) + "/" + std::to_string(data.val.size()) + "/" +
               std::to_string(data.eval.size()) + " examples -> " + dir.string() +
               (all_same ? " (unchanged)" : ""));
  return out;
}

TrainOutput cmd_train(const RunConfig& config, const fs::path& dataset, const fs::path& out_dir, const Logger& log) {
  const Dataset data = load_dataset(dataset);
  const RunConfig c = with_domain(config, data.domain);
  const OracleSpec spec = build_oracle(c.domain);
  const fs::path dir = resolve_output_dir(out_dir);
  fs::create_directories(dir);
  TrainOutput out;
  out.run_hash = c.hash();
  const TrainConfig tc = c.resolved_train();
  say(log, "train " + std::string(domain_name(c.domain)) + " " + objective_label(c.objective) + " seed " +
               std::to_string(tc.seed) + " stop criterion " + std::string(criterion_name(tc.stop_criterion)));
  const TrainResult r = train(c.model, data, spec, c.objective, tc, {}, [&](const EpochRecord& e) {
    say(log, "  epoch " + std::to_string(e.epoch) + " train " + fixed(e.train_loss) + " probe " + fixed(e.probe_loss) +
                 " val " + fixed(e.val_metric, 5) + (e.improved ? " *" : "") + " (" + fixed(e.seconds, 1) + "s)");
  });
  out.checkpoint = dir / "model.ckpt";
  out.history = dir / "history.jsonl";
  out.config = dir / "config.json";
  out.model_id = model_id(r.model);
  out.best_metric = r.history.best_metric;
  out.best_epoch = r.history.best_epoch;
  write_file_atomic(out.checkpoint, checkpoint_to_bytes(r.model, {out.model_id, out.run_hash, objective_label(c.objective)}));
  write_file_atomic(out.history, history_to_jsonl(r.history, out.run_hash));
  write_config(dir, c);
  say(log, "  best epoch " + std::to_string(out.best_epoch) + " metric " + fixed(out.best_metric, 5) + " model " +
               out.model_id);
  return out;
}

LambdaOutput cmd_select_lambda(const RunConfig& config, const fs::path& dataset, const fs::path& out_dir,
                               const Logger& log) {
  const Dataset data = load_dataset(dataset);
  const RunConfig c = with_domain(config, data.domain);
  const OracleSpec spec = build_oracle(c.domain);
  const fs::path dir = resolve_output_dir(out_dir);
  LambdaOutput out;
  out.run_hash = c.hash();
  std::vector<std::uint64_t> seeds = c.seeds;
  if (default_lambda_rule(c.domain) == LambdaRule::WithinOneStandardError && seeds.size() < 2) {
    // The standard error needs replicates.
    seeds = {seeds.front(), seeds.front() + 1, seeds.front() + 2};
  }
  const LambdaSearch s = search_lambda(c.model, data, spec, c.objective.divergence, c.resolved_train(), c.lambda_grid,
                                       seeds, [&](double lambda, std::uint64_t seed, double metric) {
                                         say(log, "  lambda " + format_double(lambda) + " seed " +
                                                      std::to_string(seed) + " metric " + fixed(metric, 5));
                                       });
  out.selected = s.selected;
  out.rule = s.rule;
  out.stats = s.stats;
  std::string text = json{{"format", "bglab-lambda"},
                          {"version", 1},
                          {"run_hash", out.run_hash},
                          {"domain", domain_name(c.domain)},
                          {"criterion", criterion_name(c.resolved_train().criterion)},
                          {"rule", s.rule == LambdaRule::Argmin ? "argmin" : "one-standard-error"},
                          {"seeds", seeds}}
                         .dump() +
                     "\n";
  for (const auto& st : s.stats) {
    text += json{{"lambda", st.lambda}, {"mean", st.mean}, {"se", st.se}, {"values", st.values}}.dump() + "\n";
  }
  text += json{{"selected", s.selected}}.dump() + "\n";
  out.report = dir / "lambda.jsonl";
  write_file_atomic(out.report, text);
  write_config(dir, c);
  say(log, "selected lambda " + format_double(s.selected));
  return out;
}

KappaOutput cmd_kappa(const RunConfig& config, const fs::path& checkpoint, const fs::path& dataset,
                      const fs::path& out_dir, bool exact, bool resume, const Logger& log) {
  if (exact && config.kappa.prune_eps > 0.0) throw UsageError("--exact forbids a positive pruning threshold");
  const Dataset data = load_dataset(dataset);
  const RunConfig c = with_domain(config, data.domain);
  const OracleSpec spec = build_oracle(c.domain);
  if (!fs::exists(checkpoint)) throw DataError("checkpoint not found: " + checkpoint.string());
  const Model<float> model = checkpoint_from_bytes(read_file(checkpoint));
  const fs::path dir = resolve_output_dir(out_dir);
  fs::create_directories(dir);

  KappaOutput out;
  out.run_hash = c.hash();
  KappaTable shell;
  shell.domain = c.domain;
  shell.template_length = spec.template_length();
  shell.examples = static_cast<int>(data.eval.size());
  shell.model_id = model_id(model);
  shell.run_hash = out.run_hash;
  shell.settings = c.kappa;
  shell.step_loss_bound = step_loss_bound(model);
  const std::string meta = kappa_csv_metadata(shell);

  const fs::path partial = dir / "kappa.partial.csv";
  std::vector<StateKappa> done;
  if (resume && fs::exists(partial)) {
    KappaCsv prev = parse_kappa_csv(read_file(partial));
    for (const char* key : {"model_id", "step_loss", "prune_eps", "template_length", "examples"}) {
      const auto it = prev.meta.find(key);
      const std::string want = key == std::string("model_id")          ? shell.model_id
                               : key == std::string("step_loss")       ? std::string(step_loss_name(c.kappa.loss))
                               : key == std::string("prune_eps")       ? format_double(c.kappa.prune_eps)
                               : key == std::string("template_length") ? std::to_string(shell.template_length)
                                                                       : std::to_string(shell.examples);
      if (it == prev.meta.end() || it->second != want) {
        throw DataError(std::string("cannot resume: partial table differs in ") + key);
      }
    }
    done = std::move(prev.states);
  }
  out.resumed = done.size();
  {
    std::string text = meta + kappa_csv_header();
    for (const auto& s : done) text += kappa_csv_row(spec, s);
    write_file_atomic(partial, text);
  }
  if (out.resumed) say(log, "resuming with " + std::to_string(out.resumed) + " completed states");

  std::ofstream append(partial, std::ios::app | std::ios::binary);
  if (!append) throw DataError("cannot append to " + partial.string());
  const auto t0 = std::chrono::steady_clock::now();
  int last_pos = -1;
  std::size_t count = out.resumed;
  const std::size_t total = static_cast<std::size_t>(shell.examples) * shell.template_length;
  TableCallbacks cb;
  cb.on_state = [&](const StateKappa& s) {
    append << kappa_csv_row(spec, s);
    append.flush();
    ++count;
    if (s.position != last_pos) {
      last_pos = s.position;
      say(log, "  position " + std::to_string(s.position) + "/" + std::to_string(shell.template_length) + "  " +
                   std::to_string(count) + "/" + std::to_string(total) + " states  " + fixed(elapsed(t0), 1) + "s");
    }
  };
  say(log, "kappa " + std::string(domain_name(c.domain)) + " model " + shell.model_id + " eps " +
               format_double(c.kappa.prune_eps) + " loss " + std::string(step_loss_name(c.kappa.loss)));
  KappaTable table = build_kappa_table(model, spec, std::span<const Example>(data.eval), c.kappa, cb, std::move(done));
  append.close();
  table.run_hash = out.run_hash;
  out.table = dir / "kappa.csv";
  out.summary = dir / "kappa_summary.csv";
  write_file_atomic(out.table, kappa_table_to_csv(spec, table));
  write_file_atomic(out.summary, kappa_summary_csv(spec, table));
  write_config(dir, c);
  fs::remove(partial);
  out.states = table.states.size();
  for (const auto& s : table.states) out.max_error_bound = std::max(out.max_error_bound, s.error_bound);
  say(log, "kappa done: " + std::to_string(out.states) + " states in " + fixed(elapsed(t0), 1) +
               "s, max error bound " + format_double(out.max_error_bound));
  return out;
}

AnalyzeOutput cmd_analyze(const RunConfig& config, const fs::path& dataset, const std::vector<ModelArtifacts>& models,
                          const fs::path& out_dir, const Logger& log) {
  if (models.empty()) throw UsageError("analyze needs at least one model");
  const Dataset data = load_dataset(dataset);
  const RunConfig c = with_domain(config, data.domain);
  const OracleSpec spec = build_oracle(c.domain);
  const fs::path dir = resolve_output_dir(out_dir);
  fs::create_directories(dir);
  AnalyzeOutput out;
  out.run_hash = c.hash();
  const std::span<const Example> eval(data.eval);

  struct Loaded {
    ModelArtifacts art;
    Model<float> model;
    CheckpointInfo info;
    KappaTable table;
  };
  std::vector<Loaded> loaded;
  for (const auto& m : models) {
    if (!fs::exists(m.checkpoint)) throw DataError("checkpoint not found: " + m.checkpoint.string());
    if (!fs::exists(m.table)) throw DataError("kappa table not found: " + m.table.string());
    Loaded l{m, {}, {}, {}};
    l.model = checkpoint_from_bytes(read_file(m.checkpoint), &l.info);
    l.table = kappa_table_from_csv(read_file(m.table));
    if (l.table.model_id != l.info.model_id) {
      throw DataError("kappa table " + m.table.string() + " belongs to model " + l.table.model_id + ", not " +
                      l.info.model_id + " (" + m.name + ")");
    }
    if (l.table.domain != c.domain || l.table.examples != static_cast<int>(eval.size())) {
      throw DataError("kappa table " + m.table.string() + " does not match the dataset");
    }
    loaded.push_back(std::move(l));
  }

  std::vector<const KappaTable*> tables;
  for (const auto& l : loaded) tables.push_back(&l.table);
  const Partition common = common_partition(tables, c.partition_fraction, c.kappa_use_abs);
  std::size_t bridge_choice = 0, bridge_hr = 0;
  for (std::size_t i : common.bridge) {
    const auto kind = loaded.front().table.states[i].kind;
    if (kind != StateKind::Deterministic) ++bridge_choice;
    if (kind == StateKind::HighRisk) ++bridge_hr;
  }
  const double hr_fraction = bridge_choice ? static_cast<double>(bridge_hr) / bridge_choice : 0.0;

  json header = {{"type", "header"}, {"format", "bglab-report"}, {"version", 1},
                 {"run_hash", out.run_hash}, {"domain", domain_name(c.domain)}, {"config", c.to_json()}};
  json names = json::array();
  for (const auto& l : loaded) names.push_back(l.art.name);
  header["models"] = names;
  std::string report = header.dump() + "\n";
  report += json{{"type", "partition"},
                 {"basis", tables.size() > 1 ? "mean-kappa-across-models" : "model-kappa"},
                 {"score", c.kappa_use_abs ? "sum-abs-kappa" : "sum-kappa"},
                 {"fraction", common.fraction},
                 {"eligible", common.eligible},
                 {"bridge", common.bridge.size()},
                 {"garden", common.garden.size()},
                 {"bridge_choice_states", bridge_choice},
                 {"bridge_highrisk_fraction", hr_fraction}}
                .dump() +
            "\n";

  std::string flat =
      "domain,model,objective,seed,model_id,eb,eb_se,rollout_loss,tf_loss,bridge,garden,rho,mean_ct_bridge,"
      "mean_ct_garden,run_hash\n";
  const Eigen::MatrixXd teacher = teacher_state_distributions(spec, static_cast<int>(eval.size()));
  json comparison = json::array();
  out.heatmap_dir = dir / "heatmaps";
  for (auto& l : loaded) {
    const std::string kappa_run = l.table.run_hash;
    l.table.run_hash = out.run_hash;
    ModelPolicy<float> policy(l.model);
    const auto t0 = std::chrono::steady_clock::now();
    const ExposureBias eb = exposure_bias(policy, spec, eval, c.repeats, c.rollout_seed);
    const Eigen::MatrixXd student = state_distributions(policy, spec, eval);
    const RegionalContribution rc = regional_contributions(l.table, common, student, teacher);
    const Partition own = partition_bridge_garden(l.table, c.partition_fraction, c.kappa_use_abs);
    const RegionalContribution rc_own = regional_contributions(l.table, own, student, teacher);
    const ConfidenceKappa ck = confidence_kappa_correlation(spec, l.table, common, c.kappa_use_abs);
    const double f_lin = f_bound(l.table, student, teacher, 0.0);
    double max_bound = 0.0;
    for (const auto& s : l.table.states) max_bound = std::max(max_bound, s.error_bound);
    json rec = {{"type", "model"},
                {"name", l.art.name},
                {"objective", l.info.objective},
                {"model_id", l.info.model_id},
                {"seed", l.model.seed},
                {"eb", eb.eb},
                {"eb_se", eb.se},
                {"rollout_loss", eb.rollout_loss},
                {"tf_loss", eb.tf_loss},
                {"repeats", eb.repeats},
                {"bridge", rc.bridge},
                {"garden", rc.garden},
                {"bridge_own_partition", rc_own.bridge},
                {"garden_own_partition", rc_own.garden},
                {"f_bound_linear", f_lin},
                {"rho", ck.rho},
                {"mean_ct_bridge", ck.mean_ct_bridge},
                {"mean_ct_garden", ck.mean_ct_garden},
                {"choice_states", ck.choice_states},
                {"kappa_run_hash", kappa_run},
                {"kappa_prune_eps", l.table.settings.prune_eps},
                {"kappa_max_error_bound", max_bound}};
    report += rec.dump() + "\n";
    comparison.push_back({l.art.name, rc.bridge, rc.garden, eb.eb});
    flat += std::string(domain_name(c.domain)) + "," + l.art.name + "," + l.info.objective + "," +
            std::to_string(l.model.seed) + "," + l.info.model_id + "," + format_double(eb.eb) + "," +
            format_double(eb.se) + "," + format_double(eb.rollout_loss) + "," + format_double(eb.tf_loss) + "," +
            format_double(rc.bridge) + "," + format_double(rc.garden) + "," + format_double(ck.rho) + "," +
            format_double(ck.mean_ct_bridge) + "," + format_double(ck.mean_ct_garden) + "," + out.run_hash + "\n";
    const fs::path hdir = out.heatmap_dir / l.art.name;
    for (int e = 0; e < l.table.examples; ++e) {
      char name[32];
      std::snprintf(name, sizeof name, "example_%02d.csv", e);
      write_file_atomic(hdir / name, heatmap_csv(l.table, e));
    }
    write_file_atomic(dir / ("states_" + l.art.name + ".csv"), kappa_summary_csv(spec, l.table, &common));
    say(log, "  " + l.art.name + ": EB " + fixed(eb.eb) + " +- " + fixed(eb.se) + "  bridge " + fixed(rc.bridge) +
                 "  garden " + fixed(rc.garden) + "  rho " + fixed(ck.rho, 3) + " (" + fixed(elapsed(t0), 1) + "s)");
  }
  report += json{{"type", "comparison"}, {"columns", {"model", "bridge", "garden", "eb"}}, {"rows", comparison}}.dump() +
            "\n";
  out.report = dir / "report.jsonl";
  out.flat_csv = dir / "report.csv";
  out.states_csv = dir / ("states_" + loaded.front().art.name + ".csv");
  write_file_atomic(out.report, report);
  write_file_atomic(out.flat_csv, flat);
  write_config(dir, c);
  return out;
}

std::string cmd_report(const std::vector<fs::path>& reports, const fs::path& out_csv) {
  if (reports.empty()) throw UsageError("report needs at least one report.csv");
  std::string header, body;
  for (const auto& p : reports) {
    if (!fs::exists(p)) throw DataError("report not found: " + p.string());
    std::istringstream in(read_file(p));
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (first) {
        if (header.empty()) header = line;
        else if (line != header) throw DataError("report " + p.string() + " has a different column layout");
        first = false;
        continue;
      }
      body += line + "\n";
    }
  }
  if (!out_csv.empty()) write_file_atomic(resolve_output_dir(out_csv), header + "\n" + body);

  // Text table: domain, model, bridge, garden, eb.
  std::string table = "domain     model        bridge     garden     EB         rho\n";
  std::istringstream in(body);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 15) throw DataError("malformed report row");
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-10s %-12s %-10.4f %-10.4f %-10.4f %-6.3f\n", cells[0].c_str(), cells[1].c_str(),
                  std::stod(cells[9]), std::stod(cells[10]), std::stod(cells[5]), std::stod(cells[11]));
    table += buf;
  }
  return table;
}

}  // namespace bglab
