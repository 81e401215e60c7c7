#include "handrec/hierarchy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "handrec/errors.hpp"
#include "handrec/ops.hpp"
#include "json.hpp"

namespace handrec::hier {

using ad::Tensor;

Tensor scaled_laplacian(int count, const std::vector<std::pair<int, int>>& edges) {
  std::vector<double> degree(size_t(count), 0.0);
  for (const auto& [a, b] : edges) {
    degree[size_t(a)] += 1.0;
    degree[size_t(b)] += 1.0;
  }
  Tensor l = Tensor::zeros({count, count});
  for (const auto& [a, b] : edges) {
    const double v = -1.0 / std::sqrt(degree[size_t(a)] * degree[size_t(b)]);
    l.at(a, b) = v;
    l.at(b, a) = v;
  }
  return l;
}

namespace {

// One coarsening stage: contracts the (count, edges) graph down to `target`
// vertices and emits the coarse graph plus the coarse -> fine upsampler.
struct StageResult {
  std::vector<std::pair<int, int>> coarse_edges;
  ad::SparseMatrix upsampler;  // fine_count x target
};

StageResult contract_to(int fine_count, const std::vector<std::pair<int, int>>& fine_edges,
                        int target) {
  std::vector<std::set<int>> adj(static_cast<size_t>(fine_count));
  for (const auto& [a, b] : fine_edges) {
    adj[size_t(a)].insert(b);
    adj[size_t(b)].insert(a);
  }
  std::vector<char> alive(size_t(fine_count), 1);
  std::vector<int> cluster_size(size_t(fine_count), 1);
  std::vector<int> absorbed_into(size_t(fine_count), -1);
  std::vector<int> partner_of(size_t(fine_count), -1);
  std::vector<int> second_hint(size_t(fine_count), -1);

  for (int live = fine_count; live > target; --live) {
    // Smallest merged cluster wins; ties break on the lower, then higher id.
    int best_a = -1, best_b = -1, best_size = 1 << 30;
    for (int a = 0; a < fine_count; ++a) {
      if (!alive[size_t(a)]) continue;
      for (int b : adj[size_t(a)]) {
        if (b <= a) continue;
        const int s = cluster_size[size_t(a)] + cluster_size[size_t(b)];
        if (s < best_size) {
          best_size = s;
          best_a = a;
          best_b = b;
        }
      }
    }
    if (best_a < 0)
      throw ValidationError("mesh hierarchy: graph ran out of edges at " +
                            std::to_string(live) + " vertices (target " +
                            std::to_string(target) + ")");
    // The removed vertex remembers its partner and one other neighbour; both
    // resolve to surviving clusters once the stage finishes.
    int hint = -1;
    for (int nb : adj[size_t(best_b)])
      if (nb != best_a) {
        hint = nb;
        break;
      }
    partner_of[size_t(best_b)] = best_a;
    second_hint[size_t(best_b)] = hint;
    absorbed_into[size_t(best_b)] = best_a;
    alive[size_t(best_b)] = 0;
    cluster_size[size_t(best_a)] += cluster_size[size_t(best_b)];
    for (int nb : adj[size_t(best_b)]) {
      adj[size_t(nb)].erase(best_b);
      if (nb != best_a) {
        adj[size_t(nb)].insert(best_a);
        adj[size_t(best_a)].insert(nb);
      }
    }
    adj[size_t(best_b)].clear();
  }

  std::vector<int> coarse_id(size_t(fine_count), -1);
  int next = 0;
  for (int v = 0; v < fine_count; ++v)
    if (alive[size_t(v)]) coarse_id[size_t(v)] = next++;

  auto resolve = [&](int v) {
    while (!alive[size_t(v)]) v = absorbed_into[size_t(v)];
    return coarse_id[size_t(v)];
  };

  StageResult out;
  out.upsampler.rows = fine_count;
  out.upsampler.cols = target;
  for (int v = 0; v < fine_count; ++v) {
    if (alive[size_t(v)]) {
      out.upsampler.entries.push_back({v, coarse_id[size_t(v)], 1.0});
      continue;
    }
    const int p = resolve(partner_of[size_t(v)]);
    const int hint = second_hint[size_t(v)];
    const int q = hint >= 0 ? resolve(hint) : p;
    if (q == p)
      out.upsampler.entries.push_back({v, p, 1.0});
    else {
      out.upsampler.entries.push_back({v, std::min(p, q), 0.5});
      out.upsampler.entries.push_back({v, std::max(p, q), 0.5});
    }
  }
  std::sort(out.upsampler.entries.begin(), out.upsampler.entries.end(),
            [](const ad::SparseMatrix::Entry& a, const ad::SparseMatrix::Entry& b) {
              return a.row != b.row ? a.row < b.row : a.col < b.col;
            });

  std::set<std::pair<int, int>> coarse;
  for (const auto& [a, b] : fine_edges) {
    int ca = resolve(a), cb = resolve(b);
    if (ca == cb) continue;
    if (ca > cb) std::swap(ca, cb);
    coarse.emplace(ca, cb);
  }
  out.coarse_edges.assign(coarse.begin(), coarse.end());
  return out;
}

}  // namespace

MeshHierarchy build_hierarchy(const hand::HandModel& model,
                              const std::vector<int>& level_counts) {
  return build_hierarchy(model.vertex_count(), hand::unique_edges(model.faces), level_counts);
}

MeshHierarchy build_hierarchy(int count, const std::vector<std::pair<int, int>>& edges,
                              const std::vector<int>& level_counts) {
  const int n = count;
  if (level_counts.empty()) throw ValidationError("mesh hierarchy: level_counts is empty");
  for (size_t i = 0; i + 1 < level_counts.size(); ++i)
    if (level_counts[i] >= level_counts[i + 1])
      throw ValidationError("mesh hierarchy: level_counts must be strictly increasing");
  if (level_counts.back() != n)
    throw ValidationError("mesh hierarchy: last level count " +
                          std::to_string(level_counts.back()) +
                          " must equal the mesh vertex count " + std::to_string(n));
  if (level_counts.front() < 1)
    throw ValidationError("mesh hierarchy: level counts must be positive");

  MeshHierarchy h;
  h.levels.resize(level_counts.size());
  h.upsamplers.resize(level_counts.size() - 1);

  HierarchyLevel fine;
  fine.count = n;
  fine.edges = edges;
  std::sort(fine.edges.begin(), fine.edges.end());
  fine.laplacian = scaled_laplacian(fine.count, fine.edges);
  h.levels.back() = fine;

  for (int i = int(level_counts.size()) - 2; i >= 0; --i) {
    const HierarchyLevel& prev = h.levels[size_t(i + 1)];
    StageResult stage = contract_to(prev.count, prev.edges, level_counts[size_t(i)]);
    HierarchyLevel lvl;
    lvl.count = level_counts[size_t(i)];
    lvl.edges = std::move(stage.coarse_edges);
    lvl.laplacian = scaled_laplacian(lvl.count, lvl.edges);
    h.levels[size_t(i)] = std::move(lvl);
    h.upsamplers[size_t(i)] = std::move(stage.upsampler);
  }
  return h;
}

Tensor upsample_vertices(const ad::SparseMatrix& u, const Tensor& tokens) {
  return ad::sparse_matmul(u, tokens);
}

void save_hierarchy(const MeshHierarchy& h, const std::string& path) {
  nlohmann::json doc;
  doc["levels"] = nlohmann::json::array();
  for (const auto& lvl : h.levels) {
    nlohmann::json edges = nlohmann::json::array();
    for (const auto& [a, b] : lvl.edges) edges.push_back({a, b});
    doc["levels"].push_back({{"count", lvl.count}, {"edges", std::move(edges)}});
  }
  doc["upsamplers"] = nlohmann::json::array();
  for (const auto& u : h.upsamplers) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : u.entries)
      entries.push_back({{"row", e.row}, {"col", e.col}, {"value", e.value}});
    doc["upsamplers"].push_back(
        {{"rows", u.rows}, {"cols", u.cols}, {"entries", std::move(entries)}});
  }
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write hierarchy cache: " + path);
  out << doc.dump(1, '\t') << "\n";
}

MeshHierarchy load_hierarchy(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read hierarchy cache: " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("hierarchy cache " + path + " is not valid JSON: " + e.what());
  }
  MeshHierarchy h;
  for (const auto& jl : doc.at("levels")) {
    HierarchyLevel lvl;
    lvl.count = jl.at("count").get<int>();
    for (const auto& je : jl.at("edges"))
      lvl.edges.emplace_back(je[0].get<int>(), je[1].get<int>());
    lvl.laplacian = scaled_laplacian(lvl.count, lvl.edges);
    h.levels.push_back(std::move(lvl));
  }
  for (const auto& ju : doc.at("upsamplers")) {
    ad::SparseMatrix u;
    u.rows = ju.at("rows").get<int>();
    u.cols = ju.at("cols").get<int>();
    for (const auto& je : ju.at("entries"))
      u.entries.push_back({je.at("row").get<int>(), je.at("col").get<int>(),
                           je.at("value").get<double>()});
    h.upsamplers.push_back(std::move(u));
  }
  return h;
}

}  // namespace handrec::hier
