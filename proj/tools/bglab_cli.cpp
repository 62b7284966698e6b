// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end. Talks to the library only through the C API.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "bglab/bglab.h"

namespace {

using json = nlohmann::json;

struct Failure {
  int code;
};

// Holds a char* returned by the C API.
class CString {
 public:
  CString() = default;
  CString(const CString&) = delete;
  CString& operator=(const CString&) = delete;
  ~CString() { bglab_string_free(ptr_); }
  char** out() { return &ptr_; }
  std::string str() const { return ptr_ ? ptr_ : ""; }

 private:
  char* ptr_ = nullptr;
};

void check(bglab_status status) {
  if (status == BGLAB_OK) return;
  std::cerr << "bglab: error: " << bglab_last_error() << "\n";
  throw Failure{static_cast<int>(status)};
}

void log_to_stderr(const char* message, void*) {
  std::fputs(message, stderr);
  std::fputc('\n', stderr);
  std::fflush(stderr);
}

// Values given on the command line. Only options that were actually passed
// end up in the override document.
struct Overrides {
  std::string config_path;
  std::string out_dir;
  json doc = json::object();
};

template <class T>
void set_if(const CLI::Option* opt, const T& value, json& target, const char* key) {
  if (opt->count() > 0) target[key] = value;
}

// Resolved config: defaults, then the config file, then explicit flags.
json resolve(const Overrides& o) {
  CString text;
  const std::string overrides = o.doc.dump();
  if (o.config_path.empty()) {
    check(bglab_config_resolve(nullptr, overrides.c_str(), text.out()));
  } else {
    check(bglab_config_load(o.config_path.c_str(), overrides.c_str(), text.out()));
  }
  return json::parse(text.str());
}

// Commands that read a dataset take their domain from it.
void domain_from_dataset(Overrides& o, const std::string& dataset) {
  CString domain;
  check(bglab_dataset_domain(dataset.c_str(), domain.out()));
  o.doc["domain"] = domain.str();
}

std::string output_dir(const Overrides& o, const json& config) {
  if (!o.out_dir.empty()) return o.out_dir;
  const std::string dir = config.value("output_dir", "");
  if (dir.empty()) {
    std::cerr << "bglab: error: no output directory (use --out or set output_dir in the config)\n";
    throw Failure{BGLAB_ERR_USAGE};
  }
  return dir;
}

void print_result(const CString& result) { std::cout << json::parse(result.str()).dump(2) << "\n"; }

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config_path, "Run config JSON file (flags given explicitly take precedence)");
  cmd->add_option("-o,--out", o.out_dir, "Output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bglab: hard/soft distillation and exposure-bias sensitivity experiments"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string(bglab_version()));
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress messages");

  Overrides o;
  const std::vector<std::string> domains{"dialogue", "math", "code"};

  // gen
  auto* gen = app.add_subcommand("gen", "Generate the dataset and oracle files for one domain");
  add_common(gen, o);
  std::string domain;
  std::uint64_t data_seed = 1;
  bool force = false;
  auto* gen_domain = gen->add_option("-d,--domain", domain, "dialogue, math or code")->check(CLI::IsMember(domains));
  auto* gen_seed = gen->add_option("-s,--seed", data_seed, "Dataset seed");
  gen->add_flag("-f,--force", force, "Overwrite files with different content");

  // Options shared by the training commands.
  std::string dataset;
  std::string objective, divergence, criterion, stop_criterion;
  double lambda = 0.0, warmup_fraction = 0.0, alpha = 0.0, lr = 0.0;
  int epochs = 0, patience = 0, batch = 0, warmup_epochs = 0;
  std::vector<std::uint64_t> seeds;
  auto add_training = [&](CLI::App* cmd) {
    std::vector<CLI::Option*> opts;
    cmd->add_option("--dataset", dataset, "dataset.jsonl from gen")->required();
    opts.push_back(cmd->add_option("--divergence", divergence, "fkl, rkl, js or tv"));
    opts.push_back(cmd->add_option("--criterion", criterion, "Lambda-selection criterion: tf-kl, rollout-eb or auto"));
    opts.push_back(cmd->add_option("--seed,--seeds", seeds, "Training seed(s)"));
    opts.push_back(cmd->add_option("--epochs", epochs, "Maximum epochs"));
    opts.push_back(cmd->add_option("--patience", patience, "Early-stopping patience"));
    opts.push_back(cmd->add_option("--batch-size", batch, "Batch size"));
    opts.push_back(cmd->add_option("--lr", lr, "Peak learning rate"));
    opts.push_back(cmd->add_option("--warmup-epochs", warmup_epochs, "Linear warmup epochs"));
    opts.push_back(cmd->add_option("--stop-criterion", stop_criterion, "Early-stopping criterion: tf-kl or rollout-eb"));
    return opts;
  };

  auto* train = app.add_subcommand("train", "Train one student");
  add_common(train, o);
  const auto train_opts = add_training(train);
  auto* train_objective = train->add_option("--objective", objective,
                                            "hard, soft, hybrid-static, hybrid-confidence, hybrid-entropy, "
                                            "hybrid-curriculum, risk-guided or code-per-state");
  auto* train_lambda = train->add_option("--lambda", lambda, "Mixing weight");
  auto* train_warmup = train->add_option("--warmup-fraction", warmup_fraction, "Curriculum warmup fraction");
  auto* train_alpha = train->add_option("--alpha", alpha, "Risk-guided penalty weight");

  auto* sel = app.add_subcommand("select-lambda", "Grid-search the hybrid mixing weight");
  add_common(sel, o);
  const auto sel_opts = add_training(sel);
  std::vector<double> grid;
  auto* sel_grid = sel->add_option("--grid", grid, "Lambda grid");

  // kappa
  auto* kappa = app.add_subcommand("kappa", "Compute the sensitivity table for a checkpoint");
  add_common(kappa, o);
  std::string checkpoint, step_loss;
  double prune_eps = 0.0;
  std::uint64_t node_budget = 0;
  int max_rows = 0;
  bool exact = false, resume = false;
  kappa->add_option("--checkpoint", checkpoint, "model.ckpt from train")->required();
  kappa->add_option("--dataset", dataset, "dataset.jsonl from gen")->required();
  auto* k_eps = kappa->add_option("--prune-eps", prune_eps, "Drop branches below this probability (0 = exact)");
  auto* k_budget = kappa->add_option("--node-budget", node_budget, "Row-step budget (0 = unlimited)");
  auto* k_loss = kappa->add_option("--step-loss", step_loss, "fkl or ce");
  auto* k_rows = kappa->add_option("--max-rows", max_rows, "Rows per decoder batch");
  kappa->add_flag("--exact", exact, "Require exact enumeration");
  kappa->add_flag("--resume", resume, "Continue from kappa.partial.csv");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "Exposure bias, regional contributions and heatmap data");
  add_common(analyze, o);
  std::vector<std::string> model_args;
  int repeats = 0;
  std::uint64_t rollout_seed = 0;
  double fraction = 0.0;
  bool use_abs = false;
  analyze->add_option("--dataset", dataset, "dataset.jsonl from gen")->required();
  analyze->add_option("--model", model_args, "NAME CHECKPOINT TABLE (repeatable)")
      ->expected(3)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll)
      ->required();
  auto* a_repeats = analyze->add_option("--repeats", repeats, "Rollout repeats");
  auto* a_seed = analyze->add_option("--rollout-seed", rollout_seed, "Rollout seed");
  auto* a_fraction = analyze->add_option("--partition-fraction", fraction, "Bridge/Garden fraction");
  auto* a_abs = analyze->add_flag("--use-abs", use_abs, "Rank states by summed |kappa|");

  // report
  auto* report = app.add_subcommand("report", "Combine report.csv files into one table");
  std::vector<std::string> reports;
  std::string report_out;
  report->add_option("reports", reports, "report.csv files from analyze")->required();
  report->add_option("-o,--out", report_out, "Combined CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return BGLAB_ERR_USAGE;
  }
  if (!quiet) bglab_set_log_callback(log_to_stderr, nullptr);

  auto training_overrides = [&](const std::vector<CLI::Option*>& opts) {
    json& t = o.doc["train"];
    t = json::object();
    set_if(opts[0], divergence, o.doc["objective"], "divergence");
    set_if(opts[1], criterion, t, "criterion");
    set_if(opts[2], seeds, o.doc, "seeds");
    set_if(opts[3], epochs, t, "max_epochs");
    set_if(opts[4], patience, t, "patience");
    set_if(opts[5], batch, t, "batch_size");
    set_if(opts[6], lr, t, "learning_rate");
    set_if(opts[7], warmup_epochs, t, "warmup_epochs");
    set_if(opts[8], stop_criterion, t, "stop_criterion");
  };

  try {
    CString result;
    if (gen->parsed()) {
      set_if(gen_domain, domain, o.doc, "domain");
      set_if(gen_seed, data_seed, o.doc, "data_seed");
      const json c = resolve(o);
      const std::string dir = output_dir(o, c);
      check(bglab_run_gen(c.dump().c_str(), dir.c_str(), force ? 1 : 0, result.out()));
    } else if (train->parsed()) {
      o.doc["objective"] = json::object();
      training_overrides(train_opts);
      domain_from_dataset(o, dataset);
      set_if(train_objective, objective, o.doc["objective"], "mode");
      set_if(train_lambda, lambda, o.doc["objective"], "lambda");
      set_if(train_warmup, warmup_fraction, o.doc["objective"], "warmup_fraction");
      set_if(train_alpha, alpha, o.doc["objective"], "alpha");
      const json c = resolve(o);
      const std::string dir = output_dir(o, c);
      check(bglab_run_train(c.dump().c_str(), dataset.c_str(), dir.c_str(), result.out()));
    } else if (sel->parsed()) {
      o.doc["objective"] = json::object();
      training_overrides(sel_opts);
      domain_from_dataset(o, dataset);
      set_if(sel_grid, grid, o.doc, "lambda_grid");
      const json c = resolve(o);
      const std::string dir = output_dir(o, c);
      check(bglab_run_select_lambda(c.dump().c_str(), dataset.c_str(), dir.c_str(), result.out()));
    } else if (kappa->parsed()) {
      json& k = o.doc["kappa"];
      k = json::object();
      set_if(k_eps, prune_eps, k, "prune_eps");
      set_if(k_budget, node_budget, k, "node_budget");
      set_if(k_loss, step_loss, k, "step_loss");
      set_if(k_rows, max_rows, k, "max_rows");
      domain_from_dataset(o, dataset);
      const json c = resolve(o);
      const std::string dir = output_dir(o, c);
      check(bglab_run_kappa(c.dump().c_str(), checkpoint.c_str(), dataset.c_str(), dir.c_str(), exact ? 1 : 0,
                            resume ? 1 : 0, result.out()));
    } else if (analyze->parsed()) {
      json& a = o.doc["analysis"];
      a = json::object();
      set_if(a_repeats, repeats, a, "repeats");
      set_if(a_seed, rollout_seed, a, "rollout_seed");
      set_if(a_fraction, fraction, a, "partition_fraction");
      if (a_abs->count() > 0) o.doc["kappa"] = {{"use_abs", use_abs}};
      domain_from_dataset(o, dataset);
      json models = json::array();
      for (std::size_t i = 0; i + 2 < model_args.size(); i += 3) {
        models.push_back({{"name", model_args[i]}, {"checkpoint", model_args[i + 1]}, {"table", model_args[i + 2]}});
      }
      const json c = resolve(o);
      const std::string dir = output_dir(o, c);
      check(bglab_run_analyze(c.dump().c_str(), dataset.c_str(), models.dump().c_str(), dir.c_str(), result.out()));
    } else if (report->parsed()) {
      std::vector<const char*> paths;
      for (const auto& r : reports) paths.push_back(r.c_str());
      check(bglab_run_report(paths.data(), paths.size(), report_out.empty() ? nullptr : report_out.c_str(),
                             result.out()));
      std::cout << result.str();
      return 0;
    }
    print_result(result);
  } catch (const Failure& f) {
    return f.code;
  } catch (const std::exception& e) {
    std::cerr << "bglab: error: " << e.what() << "\n";
    return BGLAB_ERR_INTERNAL;
  }
  return 0;
}
