#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "sfi/graph.hpp"
#include "sfi/io.hpp"

namespace sfi {

/// Graph file schema: {"n":.., "edges":[[u,v],..], "x_csv": "<matrix csv>"
/// or "x_path": "file.csv", "labels":[..]}.
inline std::string graph_to_json(const Graph& g) {
  nlohmann::json j;
  j["n"] = g.n;
  j["edges"] = nlohmann::json::array();
  for (auto [u, v] : g.edges) j["edges"].push_back({u, v});
  j["x_csv"] = mat_to_csv(g.x);
  j["labels"] = g.labels;
  return j.dump(2);
}

inline Graph graph_from_json(const std::string& text,
                             const std::filesystem::path& base_dir = {}) {
  const nlohmann::json j = nlohmann::json::parse(text);
  Graph g;
  g.n = j.at("n").get<std::size_t>();
  for (const auto& e : j.at("edges"))
    g.edges.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
  if (j.contains("x_csv"))
    g.x = mat_from_csv(j.at("x_csv").get<std::string>());
  else if (j.contains("x_path"))
    g.x = load_mat_csv(base_dir / j.at("x_path").get<std::string>());
  else
    g.x = Mat(g.n, 0);
  if (j.contains("labels")) g.labels = j.at("labels").get<std::vector<int>>();
  g.validate();
  if (g.x.rows() != g.n) throw std::runtime_error("graph_from_json: feature row count != n");
  return g;
}

inline void save_graph_json(const std::filesystem::path& path, const Graph& g) {
  write_file_atomic(path, graph_to_json(g));
}

inline Graph load_graph_json(const std::filesystem::path& path) {
  return graph_from_json(read_file(path), path.parent_path());
}

}  // namespace sfi
