// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "bglab/analysis.hpp"
#include "bglab/model.hpp"
#include "bglab/objectives.hpp"
#include "bglab/oracle.hpp"
#include "bglab/sensitivity.hpp"
#include "bglab/trainer.hpp"

namespace bglab {

// Everything that affects results. Unset optionals resolve from the domain.
struct RunConfig {
  Domain domain = Domain::Dialogue;
  std::uint64_t data_seed = 1;
  std::vector<std::uint64_t> seeds{1};  // train uses the first; lambda search uses all
  ModelConfig model;
  TrainConfig train;
  std::optional<Criterion> criterion;   // default: tf-kl for Dialogue, rollout-eb otherwise
  ObjectiveConfig objective;
  std::vector<double> lambda_grid = bglab::lambda_grid();
  KappaSettings kappa;
  bool kappa_use_abs = false;
  int repeats = kReportRepeats;
  double partition_fraction = kPartitionFraction;
  std::uint64_t rollout_seed = 7;
  std::string output_dir;               // not part of the hash

  // TrainConfig with the seed and criterion filled in.
  TrainConfig resolved_train() const;
  void validate() const;

  nlohmann::json to_json() const;
  // Fields missing from `j` keep the values of `base`.
  static RunConfig from_json(const nlohmann::json& j, const RunConfig& base);

  // FNV-1a over the canonical JSON, output_dir excluded.
  std::string hash() const;
};

RunConfig load_run_config(const std::string& path, const RunConfig& base = {});

}  // namespace bglab
