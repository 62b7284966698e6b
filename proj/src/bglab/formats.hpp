// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "bglab/analysis.hpp"
#include "bglab/model.hpp"
#include "bglab/oracle.hpp"
#include "bglab/sensitivity.hpp"
#include "bglab/trainer.hpp"

namespace bglab {

// Writes to a temp file in the same directory and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

// Shortest decimal form that reads back to the same double.
std::string format_double(double v);

// Datasets: JSON lines. The first line is a header; each following line is
// {"domain", "split", "seed", "tokens"}.
std::string dataset_to_jsonl(const Dataset& data, const std::string& run_hash);
Dataset dataset_from_jsonl(std::string_view text, std::string* run_hash = nullptr);

// Oracle spec as a self-describing JSON document.
std::string oracle_to_json(const OracleSpec& spec, const std::string& run_hash = "");
OracleSpec oracle_from_json(std::string_view text);

// Checkpoints: "BGLABCK1", u64 header length, JSON header, float32 tensors in
// layout order (little endian).
struct CheckpointInfo {
  std::string model_id;
  std::string run_hash;
  std::string objective;  // free-form label echoed into reports
};
std::string checkpoint_to_bytes(const Model<float>& model, const CheckpointInfo& info);
Model<float> checkpoint_from_bytes(std::string_view bytes, CheckpointInfo* info = nullptr);

std::string history_to_jsonl(const TrainHistory& history, const std::string& run_hash);

// Kappa tables: "# key=value" metadata lines, a header row, then one row per
// state with 62 kappa and 62 Q columns.
std::string kappa_csv_header();
std::string kappa_csv_metadata(const KappaTable& table);
std::string kappa_csv_row(const OracleSpec& spec, const StateKappa& state);
std::string kappa_table_to_csv(const OracleSpec& spec, const KappaTable& table);

struct KappaCsv {
  std::map<std::string, std::string> meta;
  std::vector<StateKappa> states;
};
// Tolerates a truncated final line (interrupted run).
KappaCsv parse_kappa_csv(std::string_view text);
KappaTable kappa_table_from_csv(std::string_view text);

// Compact per-state summary for plotting. Starts with a "# run_hash=" line.
std::string kappa_summary_csv(const OracleSpec& spec, const KappaTable& table, const Partition* partition = nullptr);

// One example after a "# run_hash=" line: rows = positions, columns = eval actions, values = |kappa|.
std::string heatmap_csv(const KappaTable& table, int example);

}  // namespace bglab
