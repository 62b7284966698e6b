// Copyright (c) 2026, The bglab Authors
// SPDX-License-Identifier: Apache-2.0

#include "bglab/formats.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <random>
#include <sstream>

namespace bglab {

using json = nlohmann::json;

void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::random_device rd;
  const fs::path tmp = path.string() + ".tmp" + to_hex((static_cast<std::uint64_t>(rd()) << 32) ^ rd()).substr(0, 8);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + tmp.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw DataError("cannot rename into " + path.string() + ": " + ec.message());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

double parse_double(std::string_view s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw DataError("malformed number '" + std::string(s) + "'");
  }
  return v;
}

long long parse_int(std::string_view s) {
  long long v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw DataError("malformed integer '" + std::string(s) + "'");
  }
  return v;
}

std::vector<std::string_view> split_view(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

std::vector<std::string_view> lines_of(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t pos = text.find('\n', start);
    if (pos == std::string_view::npos) pos = text.size();
    out.push_back(text.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

json parse_json(std::string_view text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed ") + what + ": " + e.what());
  }
}

template <class F>
auto guarded(const char* what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed ") + what + ": " + e.what());
  }
}

json model_config_json(const ModelConfig& c) {
  return {{"layers", c.layers},     {"width", c.width},   {"heads", c.heads},
          {"ffn_width", c.ffn_width}, {"dropout", c.dropout}, {"vocab", c.vocab},
          {"max_positions", c.max_positions}};
}

ModelConfig model_config_from(const json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<int>();
  c.width = j.at("width").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ffn_width = j.at("ffn_width").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.vocab = j.at("vocab").get<int>();
  c.max_positions = j.at("max_positions").get<int>();
  return c;
}

}  // namespace

std::string dataset_to_jsonl(const Dataset& data, const std::string& run_hash) {
  std::string out;
  json header = {{"format", "bglab-dataset"},
                 {"version", 1},
                 {"domain", domain_name(data.domain)},
                 {"seed", data.seed},
                 {"run_hash", run_hash},
                 {"counts", {{"train", data.train.size()}, {"val", data.val.size()}, {"eval", data.eval.size()}}}};
  out += header.dump() + "\n";
  for (Split s : {Split::Train, Split::Val, Split::Eval}) {
    for (const auto& ex : data.split(s)) {
      json rec = {{"domain", domain_name(ex.domain)}, {"split", split_name(s)}, {"seed", ex.seed}, {"tokens", ex.tokens}};
      out += rec.dump() + "\n";
    }
  }
  return out;
}

Dataset dataset_from_jsonl(std::string_view text, std::string* run_hash) {
  return guarded("dataset", [&] {
    const auto lines = lines_of(text);
    if (lines.empty()) throw DataError("dataset file is empty");
    const json header = parse_json(lines[0], "dataset header");
    if (header.value("format", "") != "bglab-dataset") throw DataError("not a bglab dataset file");
    Dataset ds;
    ds.domain = parse_domain(header.at("domain").get<std::string>());
    ds.seed = header.at("seed").get<std::uint64_t>();
    if (run_hash) *run_hash = header.value("run_hash", "");
    for (std::size_t i = 1; i < lines.size(); ++i) {
      if (lines[i].empty()) continue;
      const json rec = parse_json(lines[i], "dataset record");
      Example ex;
      ex.domain = parse_domain(rec.at("domain").get<std::string>());
      if (ex.domain != ds.domain) throw DataError("dataset mixes domains");
      ex.seed = rec.at("seed").get<std::uint64_t>();
      ex.tokens = rec.at("tokens").get<std::vector<Token>>();
      switch (parse_split(rec.at("split").get<std::string>())) {
        case Split::Train: ds.train.push_back(std::move(ex)); break;
        case Split::Val: ds.val.push_back(std::move(ex)); break;
        case Split::Eval: ds.eval.push_back(std::move(ex)); break;
      }
    }
    const auto& counts = header.at("counts");
    if (counts.at("train").get<std::size_t>() != ds.train.size() ||
        counts.at("val").get<std::size_t>() != ds.val.size() || counts.at("eval").get<std::size_t>() != ds.eval.size()) {
      throw DataError("dataset record counts do not match the header");
    }
    const OracleSpec spec = build_oracle(ds.domain);
    for (const auto* split : {&ds.train, &ds.val, &ds.eval}) {
      for (const auto& ex : *split) validate_example(spec, ex);
    }
    return ds;
  });
}

std::string oracle_to_json(const OracleSpec& spec, const std::string& run_hash) {
  json schedule = json::array();
  for (int pos = 0; pos < spec.template_length(); ++pos) {
    const auto& st = spec.schedule[pos];
    schedule.push_back({{"position", pos},
                        {"kind", state_kind_name(st.kind)},
                        {"role", st.role},
                        {"candidates", st.candidates},
                        {"probs", st.probs}});
  }
  json doc = {{"format", "bglab-oracle"},
              {"version", 1},
              {"domain", domain_name(spec.domain)},
              {"template_length", spec.template_length()},
              {"vocab_size", kVocabSize},
              {"special_tokens", {{"pad", kPad}, {"bos", kBos}, {"eos", kEos}}},
              {"decision_positions", spec.decision_positions},
              {"token_names", spec.token_names},
              {"schedule", schedule}};
  if (!run_hash.empty()) doc["run_hash"] = run_hash;
  return doc.dump(1) + "\n";
}

OracleSpec oracle_from_json(std::string_view text) {
  return guarded("oracle", [&] {
    const json doc = parse_json(text, "oracle");
    if (doc.value("format", "") != "bglab-oracle") throw DataError("not a bglab oracle file");
    OracleSpec spec;
    spec.domain = parse_domain(doc.at("domain").get<std::string>());
    spec.decision_positions = doc.at("decision_positions").get<std::vector<int>>();
    spec.token_names = doc.at("token_names").get<std::vector<std::string>>();
    for (const auto& st : doc.at("schedule")) {
      StateSpec s;
      s.kind = parse_state_kind(st.at("kind").get<std::string>());
      s.role = st.at("role").get<std::string>();
      s.candidates = st.at("candidates").get<std::vector<Token>>();
      s.probs = st.at("probs").get<std::vector<double>>();
      spec.schedule.push_back(std::move(s));
    }
    if (doc.at("template_length").get<int>() != spec.template_length()) {
      throw DataError("oracle template_length does not match its schedule");
    }
    validate_oracle(spec);
    return spec;
  });
}

namespace {
constexpr char kCheckpointMagic[8] = {'B', 'G', 'L', 'A', 'B', 'C', 'K', '1'};
static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
}  // namespace

std::string checkpoint_to_bytes(const Model<float>& model, const CheckpointInfo& info) {
  json tensors = json::array();
  for (const auto& t : model.layout.tensors()) tensors.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
  const json header = {{"format", "bglab-checkpoint"},
                       {"version", 1},
                       {"dtype", "float32"},
                       {"config", model_config_json(model.config)},
                       {"seed", model.seed},
                       {"model_id", model_id(model)},
                       {"run_hash", info.run_hash},
                       {"objective", info.objective},
                       {"tensors", tensors}};
  const std::string h = header.dump();
  const std::uint64_t hlen = h.size();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  out.append(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  out += h;
  out.append(reinterpret_cast<const char*>(model.params.data()), model.params.size() * sizeof(float));
  return out;
}

Model<float> checkpoint_from_bytes(std::string_view bytes, CheckpointInfo* info) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw DataError("not a bglab checkpoint");
  }
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + 8, sizeof hlen);
  if (hlen > bytes.size() - 16) throw DataError("truncated checkpoint header");
  return guarded("checkpoint", [&] {
    const json header = parse_json(bytes.substr(16, hlen), "checkpoint header");
    if (header.at("dtype").get<std::string>() != "float32") throw DataError("unsupported checkpoint dtype");
    Model<float> model;
    model.config = model_config_from(header.at("config"));
    model.config.validate();
    model.seed = header.at("seed").get<std::uint64_t>();
    model.layout = ParameterLayout(model.config);
    const auto& tensors = header.at("tensors");
    const auto& expect = model.layout.tensors();
    if (tensors.size() != expect.size()) throw DataError("checkpoint tensor list does not match the config");
    for (std::size_t i = 0; i < expect.size(); ++i) {
      if (tensors[i].at("name").get<std::string>() != expect[i].name ||
          tensors[i].at("rows").get<int>() != expect[i].rows || tensors[i].at("cols").get<int>() != expect[i].cols) {
        throw DataError("checkpoint tensor '" + expect[i].name + "' does not match the config");
      }
    }
    const std::size_t n = model.layout.size();
    if (bytes.size() != 16 + hlen + n * sizeof(float)) throw DataError("checkpoint payload has the wrong size");
    model.params.resize(n);
    std::memcpy(model.params.data(), bytes.data() + 16 + hlen, n * sizeof(float));
    for (float v : model.params) {
      if (!std::isfinite(v)) throw DataError("checkpoint contains non-finite parameters");
    }
    const std::string id = model_id(model);
    if (header.at("model_id").get<std::string>() != id) throw DataError("checkpoint model id does not match its data");
    if (info) {
      info->model_id = id;
      info->run_hash = header.value("run_hash", "");
      info->objective = header.value("objective", "");
    }
    return model;
  });
}

std::string history_to_jsonl(const TrainHistory& h, const std::string& run_hash) {
  std::string out;
  const json header = {{"format", "bglab-history"},   {"version", 1},
                       {"run_hash", run_hash},        {"stop_criterion", criterion_name(h.criterion)},
                       {"init_probe_loss", h.init_probe_loss}, {"best_epoch", h.best_epoch},
                       {"best_metric", h.best_metric}, {"stop_epoch", h.stop_epoch},
                       {"early_stopped", h.early_stopped}, {"steps", h.lr_trace.size()}};
  out += header.dump() + "\n";
  for (const auto& e : h.epochs) {
    const json rec = {{"epoch", e.epoch},           {"train_loss", e.train_loss}, {"probe_loss", e.probe_loss},
                      {"val_metric", e.val_metric}, {"lr", e.learning_rate},     {"improved", e.improved},
                      {"seconds", e.seconds}};
    out += rec.dump() + "\n";
  }
  return out;
}

std::string kappa_csv_header() {
  std::string h = "example,position,kind,token,baseline,kappa_state,kappa_state_abs,error_bound";
  for (int a = 0; a < kEvalActions; ++a) h += ",k" + std::to_string(eval_token(a));
  for (int a = 0; a < kEvalActions; ++a) h += ",q" + std::to_string(eval_token(a));
  return h + "\n";
}

std::string kappa_csv_metadata(const KappaTable& t) {
  std::string out;
  auto kv = [&](const std::string& k, const std::string& v) { out += "# " + k + "=" + v + "\n"; };
  kv("format", "bglab-kappa");
  kv("version", "1");
  kv("domain", std::string(domain_name(t.domain)));
  kv("template_length", std::to_string(t.template_length));
  kv("examples", std::to_string(t.examples));
  kv("model_id", t.model_id);
  kv("run_hash", t.run_hash);
  kv("step_loss", std::string(step_loss_name(t.settings.loss)));
  kv("prune_eps", format_double(t.settings.prune_eps));
  kv("node_budget", std::to_string(t.settings.node_budget));
  kv("step_loss_bound", format_double(t.step_loss_bound));
  return out;
}

std::string kappa_csv_row(const OracleSpec& spec, const StateKappa& s) {
  (void)spec;
  std::string row = std::to_string(s.example) + "," + std::to_string(s.position) + "," +
                    std::string(state_kind_name(s.kind)) + "," + std::to_string(s.token) + "," +
                    format_double(s.baseline) + "," + format_double(s.kappa_state) + "," +
                    format_double(s.kappa_state_abs) + "," + format_double(s.error_bound);
  for (double k : s.kappa) row += "," + format_double(k);
  for (double q : s.q) row += "," + format_double(q);
  return row + "\n";
}

std::string kappa_table_to_csv(const OracleSpec& spec, const KappaTable& table) {
  std::string out = kappa_csv_metadata(table) + kappa_csv_header();
  for (const auto& s : table.states) out += kappa_csv_row(spec, s);
  return out;
}

KappaCsv parse_kappa_csv(std::string_view text) {
  KappaCsv out;
  const auto lines = lines_of(text);
  const bool complete_last = !text.empty() && text.back() == '\n';
  bool header_seen = false;
  const std::size_t columns = 8 + 2 * kEvalActions;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto line = lines[i];
    if (line.empty()) continue;
    if (line.starts_with("# ")) {
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) throw DataError("malformed kappa metadata line");
      out.meta[std::string(line.substr(2, eq - 2))] = std::string(line.substr(eq + 1));
      continue;
    }
    if (!header_seen) {
      if (std::string(line) + "\n" != kappa_csv_header()) throw DataError("unexpected kappa CSV header");
      header_seen = true;
      continue;
    }
    const auto cells = split_view(line, ',');
    if (cells.size() != columns) {
      if (i + 1 == lines.size() && !complete_last) break;  // interrupted write
      throw DataError("kappa CSV row " + std::to_string(i + 1) + " has " + std::to_string(cells.size()) + " cells");
    }
    if (i + 1 == lines.size() && !complete_last) break;
    StateKappa s;
    s.example = static_cast<int>(parse_int(cells[0]));
    s.position = static_cast<int>(parse_int(cells[1]));
    s.kind = parse_state_kind(cells[2]);
    s.token = static_cast<Token>(parse_int(cells[3]));
    s.baseline = parse_double(cells[4]);
    s.kappa_state = parse_double(cells[5]);
    s.kappa_state_abs = parse_double(cells[6]);
    s.error_bound = parse_double(cells[7]);
    s.kappa.resize(kEvalActions);
    s.q.resize(kEvalActions);
    for (int a = 0; a < kEvalActions; ++a) {
      s.kappa[a] = parse_double(cells[8 + a]);
      s.q[a] = parse_double(cells[8 + kEvalActions + a]);
    }
    out.states.push_back(std::move(s));
  }
  if (out.meta.count("format") == 0 || out.meta.at("format") != "bglab-kappa") throw DataError("not a bglab kappa table");
  return out;
}

KappaTable kappa_table_from_csv(std::string_view text) {
  KappaCsv csv = parse_kappa_csv(text);
  auto get = [&](const char* key) -> const std::string& {
    auto it = csv.meta.find(key);
    if (it == csv.meta.end()) throw DataError(std::string("kappa table lacks metadata '") + key + "'");
    return it->second;
  };
  KappaTable t;
  t.domain = parse_domain(get("domain"));
  t.template_length = static_cast<int>(parse_int(get("template_length")));
  t.examples = static_cast<int>(parse_int(get("examples")));
  t.model_id = get("model_id");
  t.run_hash = get("run_hash");
  t.settings.loss = parse_step_loss(get("step_loss"));
  t.settings.prune_eps = parse_double(get("prune_eps"));
  t.settings.node_budget = static_cast<std::uint64_t>(parse_int(get("node_budget")));
  t.step_loss_bound = parse_double(get("step_loss_bound"));
  std::sort(csv.states.begin(), csv.states.end(), [](const StateKappa& a, const StateKappa& b) {
    return std::pair(a.example, a.position) < std::pair(b.example, b.position);
  });
  if (csv.states.size() != static_cast<std::size_t>(t.examples) * t.template_length) {
    throw DataError("kappa table has " + std::to_string(csv.states.size()) + " states, expected " +
                    std::to_string(static_cast<std::size_t>(t.examples) * t.template_length));
  }
  for (std::size_t i = 0; i < csv.states.size(); ++i) {
    const auto& s = csv.states[i];
    if (s.example != static_cast<int>(i / t.template_length) || s.position != static_cast<int>(i % t.template_length)) {
      throw DataError("kappa table has duplicate or missing states");
    }
  }
  t.states = std::move(csv.states);
  return t;
}

std::string kappa_summary_csv(const OracleSpec& spec, const KappaTable& table, const Partition* partition) {
  std::vector<std::string> region(table.states.size(), "");
  if (partition) {
    for (std::size_t i : partition->bridge) region.at(i) = "bridge";
    for (std::size_t i : partition->garden) region.at(i) = "garden";
  }
  std::string out = "# run_hash=" + table.run_hash + "\n";
  out += "example,position,kind,token,kappa_state,kappa_state_abs,baseline,error_bound,confidence,region\n";
  for (std::size_t i = 0; i < table.states.size(); ++i) {
    const auto& s = table.states[i];
    const std::string ct = spec.is_choice(s.position) ? format_double(confidence(spec, s.position)) : "";
    out += std::to_string(s.example) + "," + std::to_string(s.position) + "," + std::string(state_kind_name(s.kind)) +
           "," + std::to_string(s.token) + "," + format_double(s.kappa_state) + "," +
           format_double(s.kappa_state_abs) + "," + format_double(s.baseline) + "," + format_double(s.error_bound) +
           "," + ct + "," + region[i] + "\n";
  }
  return out;
}

std::string heatmap_csv(const KappaTable& table, int example) {
  std::string out = "# run_hash=" + table.run_hash + "\nposition";
  for (int a = 0; a < kEvalActions; ++a) out += "," + std::to_string(eval_token(a));
  out += "\n";
  for (int pos = 0; pos < table.template_length; ++pos) {
    const auto& s = table.at(example, pos);
    out += std::to_string(pos);
    for (double k : s.kappa) out += "," + format_double(std::abs(k));
    out += "\n";
  }
  return out;
}

}  // namespace bglab
