// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#include "bglab/bglab.h"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <mutex>
#include <new>
#include <string>

#include "bglab/analysis.hpp"
#include "bglab/formats.hpp"
#include "bglab/pipeline.hpp"
#include "bglab/policy.hpp"

struct bglab_oracle {
  bglab::OracleSpec spec;
};
struct bglab_dataset {
  bglab::Dataset data;
  bglab::OracleSpec spec;
};
struct bglab_model {
  bglab::Model<float> model;
};
struct bglab_kappa_table {
  bglab::KappaTable table;
  bglab::OracleSpec spec;
};

namespace {

using json = nlohmann::json;

thread_local std::string g_last_error;

std::mutex g_log_mutex;
bglab_log_fn g_log_fn = nullptr;
void* g_log_user = nullptr;

void log_message(std::string_view msg) {
  std::lock_guard lock(g_log_mutex);
  if (g_log_fn) g_log_fn(std::string(msg).c_str(), g_log_user);
}

bglab::Logger logger() { return log_message; }

template <class F>
bglab_status guard(F&& f) {
  try {
    g_last_error.clear();
    f();
    return BGLAB_OK;
  } catch (const bglab::UsageError& e) {
    g_last_error = e.what();
    return BGLAB_ERR_USAGE;
  } catch (const bglab::DataError& e) {
    g_last_error = e.what();
    return BGLAB_ERR_DATA;
  } catch (const bglab::BudgetError& e) {
    g_last_error = e.what();
    return BGLAB_ERR_BUDGET;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return BGLAB_ERR_BUDGET;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return BGLAB_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return BGLAB_ERR_INTERNAL;
  }
}

void require(bool ok, const char* what) {
  if (!ok) throw bglab::UsageError(what);
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

json parse_object(const char* text, const char* what) {
  if (!text || !*text) return json::object();
  try {
    json j = json::parse(text);
    if (!j.is_object()) throw bglab::UsageError(std::string(what) + " must be a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw bglab::UsageError(std::string("malformed ") + what + ": " + e.what());
  }
}

bglab::RunConfig config_from(const char* config_json) {
  bglab::RunConfig c = bglab::RunConfig::from_json(parse_object(config_json, "config"), bglab::RunConfig{});
  c.validate();
  return c;
}

std::string resolved_text(const bglab::RunConfig& c) {
  json j = c.to_json();
  j["run_hash"] = c.hash();
  return j.dump(2);
}

bglab::Split split_from(const char* name) {
  require(name != nullptr, "split name is required");
  try {
    return bglab::parse_split(name);
  } catch (const bglab::DataError& e) {
    throw bglab::UsageError(e.what());
  }
}

void set_out(char** out, const std::string& s) {
  require(out != nullptr, "output pointer is required");
  *out = dup_string(s);
}

}  // namespace

extern "C" {

const char* bglab_version(void) { return "0.1.0"; }

const char* bglab_last_error(void) { return g_last_error.c_str(); }

void bglab_string_free(char* s) { std::free(s); }

void bglab_set_log_callback(bglab_log_fn fn, void* user) {
  std::lock_guard lock(g_log_mutex);
  g_log_fn = fn;
  g_log_user = user;
}

bglab_status bglab_config_resolve(const char* base_json, const char* override_json, char** resolved_json) {
  return guard([&] {
    bglab::RunConfig c = bglab::RunConfig::from_json(parse_object(base_json, "config"), bglab::RunConfig{});
    c = bglab::RunConfig::from_json(parse_object(override_json, "config overrides"), c);
    c.validate();
    set_out(resolved_json, resolved_text(c));
  });
}

bglab_status bglab_config_load(const char* path, const char* override_json, char** resolved_json) {
  return guard([&] {
    require(path != nullptr, "config path is required");
    if (!bglab::fs::exists(path)) throw bglab::DataError(std::string("config file not found: ") + path);
    bglab::RunConfig c = bglab::load_run_config(path);
    c = bglab::RunConfig::from_json(parse_object(override_json, "config overrides"), c);
    c.validate();
    set_out(resolved_json, resolved_text(c));
  });
}

bglab_status bglab_run_gen(const char* config_json, const char* out_dir, int force, char** result_json) {
  return guard([&] {
    require(out_dir != nullptr, "output directory is required");
    const auto r = bglab::cmd_gen(config_from(config_json), out_dir, force != 0, logger());
    set_out(result_json, json{{"dataset", r.dataset.string()},
                              {"oracle", r.oracle.string()},
                              {"run_hash", r.run_hash},
                              {"unchanged", r.unchanged}}
                             .dump());
  });
}

bglab_status bglab_run_train(const char* config_json, const char* dataset_path, const char* out_dir,
                             char** result_json) {
  return guard([&] {
    require(dataset_path && out_dir, "dataset path and output directory are required");
    const auto r = bglab::cmd_train(config_from(config_json), dataset_path, out_dir, logger());
    set_out(result_json, json{{"checkpoint", r.checkpoint.string()},
                              {"history", r.history.string()},
                              {"config", r.config.string()},
                              {"run_hash", r.run_hash},
                              {"model_id", r.model_id},
                              {"best_metric", r.best_metric},
                              {"best_epoch", r.best_epoch}}
                             .dump());
  });
}

bglab_status bglab_run_select_lambda(const char* config_json, const char* dataset_path, const char* out_dir,
                                     char** result_json) {
  return guard([&] {
    require(dataset_path && out_dir, "dataset path and output directory are required");
    const auto r = bglab::cmd_select_lambda(config_from(config_json), dataset_path, out_dir, logger());
    set_out(result_json,
            json{{"report", r.report.string()}, {"selected", r.selected}, {"run_hash", r.run_hash}}.dump());
  });
}

bglab_status bglab_run_kappa(const char* config_json, const char* checkpoint_path, const char* dataset_path,
                             const char* out_dir, int exact, int resume, char** result_json) {
  return guard([&] {
    require(checkpoint_path && dataset_path && out_dir, "checkpoint, dataset and output directory are required");
    const auto r = bglab::cmd_kappa(config_from(config_json), checkpoint_path, dataset_path, out_dir, exact != 0,
                                    resume != 0, logger());
    set_out(result_json, json{{"table", r.table.string()},
                              {"summary", r.summary.string()},
                              {"run_hash", r.run_hash},
                              {"states", r.states},
                              {"resumed", r.resumed},
                              {"max_error_bound", r.max_error_bound}}
                             .dump());
  });
}

bglab_status bglab_run_analyze(const char* config_json, const char* dataset_path, const char* models_json,
                               const char* out_dir, char** result_json) {
  return guard([&] {
    require(dataset_path && out_dir && models_json, "dataset, models and output directory are required");
    std::vector<bglab::ModelArtifacts> models;
    try {
      const json list = json::parse(models_json);
      require(list.is_array(), "models must be a JSON array");
      for (const auto& m : list) {
        models.push_back({m.at("name").get<std::string>(), m.at("checkpoint").get<std::string>(),
                          m.at("table").get<std::string>()});
      }
    } catch (const json::exception& e) {
      throw bglab::UsageError(std::string("malformed model list: ") + e.what());
    }
    const auto r = bglab::cmd_analyze(config_from(config_json), dataset_path, models, out_dir, logger());
    set_out(result_json, json{{"report", r.report.string()},
                              {"flat_csv", r.flat_csv.string()},
                              {"states_csv", r.states_csv.string()},
                              {"heatmap_dir", r.heatmap_dir.string()},
                              {"run_hash", r.run_hash}}
                             .dump());
  });
}

bglab_status bglab_run_report(const char* const* report_paths, size_t count, const char* out_csv, char** table_text) {
  return guard([&] {
    require(report_paths != nullptr || count == 0, "report paths are required");
    std::vector<bglab::fs::path> paths;
    for (size_t i = 0; i < count; ++i) {
      require(report_paths[i] != nullptr, "report path is null");
      paths.emplace_back(report_paths[i]);
    }
    set_out(table_text, bglab::cmd_report(paths, out_csv ? out_csv : ""));
  });
}

bglab_status bglab_oracle_create(const char* domain, bglab_oracle** out) {
  return guard([&] {
    require(domain && out, "domain and output pointer are required");
    bglab::Domain d;
    try {
      d = bglab::parse_domain(domain);
    } catch (const bglab::DataError& e) {
      throw bglab::UsageError(e.what());
    }
    *out = new bglab_oracle{bglab::build_oracle(d)};
  });
}

bglab_status bglab_oracle_load(const char* path, bglab_oracle** out) {
  return guard([&] {
    require(path && out, "path and output pointer are required");
    *out = new bglab_oracle{bglab::oracle_from_json(bglab::read_file(path))};
  });
}

void bglab_oracle_free(bglab_oracle* oracle) { delete oracle; }

int bglab_oracle_length(const bglab_oracle* oracle) { return oracle ? oracle->spec.template_length() : 0; }

namespace {
void check_position(const bglab::OracleSpec& spec, int position) {
  if (position < 0 || position >= spec.template_length()) throw bglab::UsageError("position out of range");
}
}  // namespace

bglab_status bglab_oracle_state_kind(const bglab_oracle* oracle, int position, int* kind) {
  return guard([&] {
    require(oracle && kind, "oracle and output pointer are required");
    check_position(oracle->spec, position);
    switch (oracle->spec.schedule[position].kind) {
      case bglab::StateKind::Deterministic: *kind = 0; break;
      case bglab::StateKind::Flexible: *kind = 1; break;
      case bglab::StateKind::HighRisk: *kind = 2; break;
    }
  });
}

bglab_status bglab_oracle_teacher_probs(const bglab_oracle* oracle, int position, double* probs) {
  return guard([&] {
    require(oracle && probs, "oracle and output buffer are required");
    check_position(oracle->spec, position);
    const auto d = bglab::teacher_distribution(oracle->spec, position);
    for (int v = 0; v < bglab::kVocabSize; ++v) probs[v] = d[v];
  });
}

bglab_status bglab_oracle_confidence(const bglab_oracle* oracle, int position, double* out) {
  return guard([&] {
    require(oracle && out, "oracle and output pointer are required");
    check_position(oracle->spec, position);
    *out = bglab::confidence(oracle->spec, position);
  });
}

bglab_status bglab_oracle_sample(const bglab_oracle* oracle, uint64_t seed, int32_t* tokens) {
  return guard([&] {
    require(oracle && tokens, "oracle and output buffer are required");
    const auto ex = bglab::sample_example(oracle->spec, seed);
    std::copy(ex.tokens.begin(), ex.tokens.end(), tokens);
  });
}

bglab_status bglab_dataset_generate(const bglab_oracle* oracle, uint64_t seed, bglab_dataset** out) {
  return guard([&] {
    require(oracle && out, "oracle and output pointer are required");
    *out = new bglab_dataset{bglab::generate_dataset(oracle->spec, seed), oracle->spec};
  });
}

bglab_status bglab_dataset_load(const char* path, bglab_dataset** out) {
  return guard([&] {
    require(path && out, "path and output pointer are required");
    if (!bglab::fs::exists(path)) throw bglab::DataError(std::string("dataset not found: ") + path);
    auto data = bglab::dataset_from_jsonl(bglab::read_file(path));
    auto spec = bglab::build_oracle(data.domain);
    *out = new bglab_dataset{std::move(data), std::move(spec)};
  });
}

void bglab_dataset_free(bglab_dataset* dataset) { delete dataset; }

bglab_status bglab_dataset_domain(const char* path, char** domain) {
  return guard([&] {
    require(path != nullptr, "path is required");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw bglab::DataError(std::string("dataset not found: ") + path);
    std::string line;
    std::getline(in, line);
    json header;
    try {
      header = json::parse(line);
    } catch (const json::exception& e) {
      throw bglab::DataError(std::string("malformed dataset header: ") + e.what());
    }
    if (!header.is_object() || header.value("format", "") != "bglab-dataset") {
      throw bglab::DataError(std::string("not a bglab dataset: ") + path);
    }
    set_out(domain, std::string(bglab::domain_name(bglab::parse_domain(header.value("domain", "")))));
  });
}

bglab_status bglab_dataset_count(const bglab_dataset* dataset, const char* split, size_t* count) {
  return guard([&] {
    require(dataset && count, "dataset and output pointer are required");
    *count = dataset->data.split(split_from(split)).size();
  });
}

bglab_status bglab_dataset_example(const bglab_dataset* dataset, const char* split, size_t index, int32_t* tokens) {
  return guard([&] {
    require(dataset && tokens, "dataset and output buffer are required");
    const auto& examples = dataset->data.split(split_from(split));
    if (index >= examples.size()) throw bglab::UsageError("example index out of range");
    std::copy(examples[index].tokens.begin(), examples[index].tokens.end(), tokens);
  });
}

bglab_status bglab_model_init(const char* model_json, uint64_t seed, bglab_model** out) {
  return guard([&] {
    require(out != nullptr, "output pointer is required");
    json wrapper = json::object();
    const json m = parse_object(model_json, "model config");
    if (!m.empty()) wrapper["model"] = m;
    const bglab::RunConfig c = bglab::RunConfig::from_json(wrapper, bglab::RunConfig{});
    c.model.validate();
    *out = new bglab_model{bglab::init_model<float>(c.model, seed)};
  });
}

bglab_status bglab_model_load(const char* checkpoint_path, bglab_model** out) {
  return guard([&] {
    require(checkpoint_path && out, "path and output pointer are required");
    if (!bglab::fs::exists(checkpoint_path)) {
      throw bglab::DataError(std::string("checkpoint not found: ") + checkpoint_path);
    }
    *out = new bglab_model{bglab::checkpoint_from_bytes(bglab::read_file(checkpoint_path))};
  });
}

void bglab_model_free(bglab_model* model) { delete model; }

bglab_status bglab_model_id(const bglab_model* model, char** id) {
  return guard([&] {
    require(model != nullptr, "model is required");
    set_out(id, bglab::model_id(model->model));
  });
}

bglab_status bglab_model_parameter_count(const bglab_model* model, size_t* count) {
  return guard([&] {
    require(model && count, "model and output pointer are required");
    *count = bglab::parameter_count(model->model.config);
  });
}

bglab_status bglab_model_next_probs(const bglab_model* model, const int32_t* prefix, size_t length, double* probs) {
  return guard([&] {
    require(model && probs && (prefix || length == 0), "model, prefix and output buffer are required");
    std::vector<bglab::Token> inputs{bglab::kBos};
    inputs.insert(inputs.end(), prefix, prefix + length);
    if (static_cast<int>(inputs.size()) > model->model.config.max_positions) {
      throw bglab::UsageError("prefix longer than the model context");
    }
    for (bglab::Token t : inputs) {
      if (t < 0 || t >= bglab::kVocabSize) throw bglab::UsageError("token out of range");
    }
    const Eigen::VectorXd p = bglab::student_distribution(model->model, inputs);
    for (int v = 0; v < bglab::kVocabSize; ++v) probs[v] = p[v];
  });
}

bglab_status bglab_kappa_compute(const bglab_model* model, const bglab_dataset* dataset, double prune_eps,
                                 bglab_kappa_table** out) {
  return guard([&] {
    require(model && dataset && out, "model, dataset and output pointer are required");
    bglab::KappaSettings s;
    s.prune_eps = prune_eps;
    auto table = bglab::build_kappa_table(model->model, dataset->spec,
                                          std::span<const bglab::Example>(dataset->data.eval), s);
    *out = new bglab_kappa_table{std::move(table), dataset->spec};
  });
}

bglab_status bglab_kappa_load(const char* path, bglab_kappa_table** out) {
  return guard([&] {
    require(path && out, "path and output pointer are required");
    if (!bglab::fs::exists(path)) throw bglab::DataError(std::string("kappa table not found: ") + path);
    auto table = bglab::kappa_table_from_csv(bglab::read_file(path));
    auto spec = bglab::build_oracle(table.domain);
    *out = new bglab_kappa_table{std::move(table), std::move(spec)};
  });
}

void bglab_kappa_free(bglab_kappa_table* table) { delete table; }

bglab_status bglab_kappa_shape(const bglab_kappa_table* table, int* examples, int* template_length) {
  return guard([&] {
    require(table != nullptr, "table is required");
    if (examples) *examples = table->table.examples;
    if (template_length) *template_length = table->table.template_length;
  });
}

bglab_status bglab_kappa_state(const bglab_kappa_table* table, int example, int position, double* kappa,
                               double* kappa_state, double* error_bound) {
  return guard([&] {
    require(table != nullptr, "table is required");
    const auto& t = table->table;
    if (example < 0 || example >= t.examples || position < 0 || position >= t.template_length) {
      throw bglab::UsageError("state out of range");
    }
    const auto& s = t.at(example, position);
    if (kappa) std::copy(s.kappa.begin(), s.kappa.end(), kappa);
    if (kappa_state) *kappa_state = s.kappa_state;
    if (error_bound) *error_bound = s.error_bound;
  });
}

bglab_status bglab_kappa_save(const bglab_kappa_table* table, const char* path) {
  return guard([&] {
    require(table && path, "table and path are required");
    bglab::write_file_atomic(path, bglab::kappa_table_to_csv(table->spec, table->table));
  });
}

bglab_status bglab_exposure_bias(const bglab_model* model, const bglab_dataset* dataset, int repeats, uint64_t seed,
                                 double* eb, double* se) {
  return guard([&] {
    require(dataset != nullptr, "dataset is required");
    const std::span<const bglab::Example> eval(dataset->data.eval);
    bglab::ExposureBias r;
    if (model) {
      r = bglab::exposure_bias(bglab::ModelPolicy<float>(model->model), dataset->spec, eval, repeats, seed);
    } else {
      r = bglab::exposure_bias(bglab::TeacherPolicy(dataset->spec), dataset->spec, eval, repeats, seed);
    }
    if (eb) *eb = r.eb;
    if (se) *se = r.se;
  });
}

bglab_status bglab_spearman(const double* x, const double* y, size_t n, double* rho) {
  return guard([&] {
    require(x && y && rho, "inputs and output pointer are required");
    *rho = bglab::spearman(std::span<const double>(x, n), std::span<const double>(y, n));
  });
}

}  // extern "C"
