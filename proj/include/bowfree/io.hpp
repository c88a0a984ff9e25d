#pragma once

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "bowfree/datagen.hpp"
#include "bowfree/graph.hpp"
#include "bowfree/matrix.hpp"

namespace bowfree {

using json = nlohmann::json;

// 17 significant digits: enough for doubles to survive a decimal round trip
// bit-exactly.
inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline json graph_to_json(const AdmgGraph& g) {
  json j;
  j["num_nodes"] = g.num_nodes;
  json dir = json::array();
  for (int i = 0; i < g.num_nodes; ++i)
    for (int k = 0; k < g.num_nodes; ++k)
      if (g.directed(i, k) != 0.0) dir.push_back({i, k});
  json bid = json::array();
  for (auto [i, k] : all_pairs(g.num_nodes))
    if (g.bidirected(i, k) != 0.0) bid.push_back({i, k});
  j["directed_edges"] = dir;
  j["bidirected_edges"] = bid;
  return j;
}

inline AdmgGraph graph_from_json(const json& j) {
  AdmgGraph g(j.at("num_nodes").get<int>());
  for (const auto& e : j.at("directed_edges"))
    g.directed(e.at(0).get<int>(), e.at(1).get<int>()) = 1.0;
  for (const auto& e : j.at("bidirected_edges")) {
    const int a = e.at(0).get<int>(), b = e.at(1).get<int>();
    g.bidirected(a, b) = g.bidirected(b, a) = 1.0;
  }
  return g;
}

inline json matrix_to_json(const Matrix& m) {
  json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  std::vector<double> data(m.data(), m.data() + m.size());
  j["data"] = data;
  return j;
}

inline Matrix matrix_from_json(const json& j) {
  Matrix m(j.at("rows").get<int>(), j.at("cols").get<int>());
  const auto& data = j.at("data");
  if (data.size() != m.size()) throw error("matrix_from_json: size mismatch");
  for (size_t i = 0; i < m.size(); ++i) m.data()[i] = data[i].get<double>();
  return m;
}

// CSV with a caller-chosen column-name prefix, row-major, '.' decimal.
inline void write_csv(const std::string& path, const Matrix& m,
                      const std::string& col_prefix) {
  std::ofstream out(path);
  if (!out) throw error("write_csv: cannot open " + path);
  for (int j = 0; j < m.cols(); ++j) out << (j ? "," : "") << col_prefix << j;
  out << "\n";
  for (int i = 0; i < m.rows(); ++i) {
    for (int j = 0; j < m.cols(); ++j)
      out << (j ? "," : "") << format_double(m(i, j));
    out << "\n";
  }
  if (!out) throw error("write_csv: write failed for " + path);
}

inline Matrix read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw error("read_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw error("read_csv: " + path + " is empty");
  int cols = 1;
  for (char c : line) cols += c == ',';
  std::vector<double> values;
  int rows = 0, lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell;
    int got = 0;
    while (std::getline(ss, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str() || *end != '\0')
        throw error("read_csv: malformed value at " + path + ":" +
                    std::to_string(lineno));
      values.push_back(v);
      ++got;
    }
    if (got != cols)
      throw error("read_csv: expected " + std::to_string(cols) + " columns at " +
                  path + ":" + std::to_string(lineno));
    ++rows;
  }
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = values[static_cast<size_t>(i) * cols + j];
  return m;
}

inline std::string metadata_path_for(const std::string& csv_path) {
  const std::string suffix = ".csv";
  if (csv_path.size() > suffix.size() &&
      csv_path.compare(csv_path.size() - suffix.size(), suffix.size(), suffix) == 0)
    return csv_path.substr(0, csv_path.size() - suffix.size()) + ".meta.json";
  return csv_path + ".meta.json";
}

inline json dataset_metadata_to_json(const Dataset& ds) {
  json j;
  j["seed"] = ds.seed;
  j["generator"] = ds.generator;
  j["truth_graph"] = ds.truth ? graph_to_json(*ds.truth) : json(nullptr);
  if (ds.normalized())
    j["normalization"] = {{"means", ds.norm_means}, {"stds", ds.norm_stds}};
  else
    j["normalization"] = nullptr;
  json spec;
  spec["n"] = ds.num_samples();
  if (ds.er_spec) {
    spec["d"] = ds.er_spec->d;
    spec["e"] = ds.er_spec->e;
    spec["m"] = ds.er_spec->m;
    spec["bow_avoidance"] = true;  // deviation from independent sampling
  }
  if (ds.ate_defaults) {
    spec["ate"] = {{"treatment", ds.ate_defaults->treatment},
                   {"a", ds.ate_defaults->a},
                   {"b", ds.ate_defaults->b},
                   {"responses", ds.ate_defaults->responses}};
  }
  j["spec"] = spec;
  return j;
}

inline void dataset_metadata_from_json(const json& j, Dataset& ds) {
  ds.seed = j.at("seed").get<uint64_t>();
  ds.generator = j.at("generator").get<std::string>();
  if (!j.at("truth_graph").is_null()) ds.truth = graph_from_json(j.at("truth_graph"));
  if (!j.at("normalization").is_null()) {
    ds.norm_means = j.at("normalization").at("means").get<std::vector<double>>();
    ds.norm_stds = j.at("normalization").at("stds").get<std::vector<double>>();
  }
  const json& spec = j.at("spec");
  if (ds.generator == "er") {
    ErSpec s;
    s.d = spec.at("d").get<int>();
    s.e = spec.at("e").get<int>();
    s.m = spec.at("m").get<int>();
    s.n = spec.at("n").get<int>();
    s.seed = ds.seed;
    ds.er_spec = s;
  }
  if (spec.contains("ate")) {
    AteDefaults q;
    q.treatment = spec.at("ate").at("treatment").get<int>();
    q.a = spec.at("ate").at("a").get<double>();
    q.b = spec.at("ate").at("b").get<double>();
    q.responses = spec.at("ate").at("responses").get<std::vector<int>>();
    ds.ate_defaults = q;
  }
}

inline void save_dataset(const Dataset& ds, const std::string& csv_path) {
  write_csv(csv_path, ds.x, "x_");
  std::ofstream meta(metadata_path_for(csv_path));
  if (!meta) throw error("save_dataset: cannot open metadata for " + csv_path);
  meta << dataset_metadata_to_json(ds).dump(2) << "\n";
}

// Generators are deterministic per seed, so the ground-truth mechanism can
// be rebuilt from the metadata alone.
inline void rebuild_sem_handle(Dataset& ds) {
  if (ds.generator == "fork-collider") {
    ds.sem = fork_collider_sem();
  } else if (ds.generator == "er" && ds.er_spec) {
    Dataset regen = gen_er_admg(*ds.er_spec);
    ds.sem = regen.sem;
  }
}

inline Dataset load_dataset(const std::string& csv_path) {
  Dataset ds;
  ds.x = read_csv(csv_path);
  std::ifstream meta(metadata_path_for(csv_path));
  if (meta) {
    json j = json::parse(meta);
    dataset_metadata_from_json(j, ds);
    rebuild_sem_handle(ds);
  }
  return ds;
}

// Edge-probability export: row-major CSV with `to_*` headers.
inline void write_edge_probabilities_csv(const std::string& path, const Matrix& m) {
  write_csv(path, m, "to_");
}

}  // namespace bowfree
