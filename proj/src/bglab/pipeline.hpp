// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "bglab/run_config.hpp"

namespace bglab {

using Logger = std::function<void(std::string_view)>;
namespace fs = std::filesystem;

// BGLAB_OUTPUT_ROOT prefixes relative output directories.
fs::path resolve_output_dir(const fs::path& dir);

struct GenOutput {
  fs::path dataset;
  fs::path oracle;
  std::string run_hash;
  bool unchanged = false;  // files already existed with identical content
};

// Writes dataset.jsonl and oracle.json. Existing files with different
// content are left alone unless force is set.
GenOutput cmd_gen(const RunConfig& config, const fs::path& out_dir, bool force, const Logger& log = {});

struct TrainOutput {
  fs::path checkpoint;
  fs::path history;
  fs::path config;
  std::string run_hash;
  std::string model_id;
  double best_metric = 0.0;
  int best_epoch = 0;
};

TrainOutput cmd_train(const RunConfig& config, const fs::path& dataset, const fs::path& out_dir,
                      const Logger& log = {});

struct LambdaOutput {
  fs::path report;
  double selected = 0.0;
  LambdaRule rule = LambdaRule::Argmin;
  std::vector<LambdaStat> stats;
  std::string run_hash;
};

LambdaOutput cmd_select_lambda(const RunConfig& config, const fs::path& dataset, const fs::path& out_dir,
                               const Logger& log = {});

struct KappaOutput {
  fs::path table;
  fs::path summary;
  std::string run_hash;
  std::size_t states = 0;
  std::size_t resumed = 0;  // states taken from an interrupted run
  double max_error_bound = 0.0;
};

// exact forbids prune_eps > 0. resume picks up kappa.partial.csv.
KappaOutput cmd_kappa(const RunConfig& config, const fs::path& checkpoint, const fs::path& dataset,
                      const fs::path& out_dir, bool exact, bool resume, const Logger& log = {});

struct ModelArtifacts {
  std::string name;  // e.g. hard, soft, hybrid
  fs::path checkpoint;
  fs::path table;
};

struct AnalyzeOutput {
  fs::path report;      // JSON lines
  fs::path flat_csv;    // one row per model
  fs::path states_csv;  // per-state summary with regions
  fs::path heatmap_dir;
  std::string run_hash;
};

AnalyzeOutput cmd_analyze(const RunConfig& config, const fs::path& dataset, const std::vector<ModelArtifacts>& models,
                          const fs::path& out_dir, const Logger& log = {});

// Concatenates the flat CSVs of several analyze runs and renders a text
// table of Bridge/Garden/EB per domain and model.
std::string cmd_report(const std::vector<fs::path>& reports, const fs::path& out_csv);

}  // namespace bglab
