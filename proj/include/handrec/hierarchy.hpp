#pragma once

#include <string>
#include <utility>
#include <vector>

#include "handrec/hand_model.hpp"
#include "handrec/tensor.hpp"

namespace handrec::hier {

// One resolution of the coarse-to-fine mesh pyramid. The Laplacian is the
// rescaled symmetric-normalized form L - I = -D^(-1/2) A D^(-1/2) (using the
// upper bound lambda_max = 2), so its eigenvalues lie in [-1, 1]; rows of
// isolated vertices are zero.
struct HierarchyLevel {
  int count = 0;
  std::vector<std::pair<int, int>> edges;  // sorted unique undirected pairs
  ad::Tensor laplacian;                    // count x count, symmetric
};

struct MeshHierarchy {
  std::vector<HierarchyLevel> levels;       // coarsest first, finest (full mesh) last
  std::vector<ad::SparseMatrix> upsamplers;  // levels[i] -> levels[i+1]
};

// Greedy edge-contraction coarsening of the model mesh down to each requested
// count. Ties break toward the lowest vertex index; the lower index of a
// contracted pair survives. contract: level_counts strictly increasing, last
// equals the model vertex count. Unreachable counts raise ValidationError.
MeshHierarchy build_hierarchy(const hand::HandModel& model,
                              const std::vector<int>& level_counts);

// Same coarsening over a bare graph (used by tests and tools).
MeshHierarchy build_hierarchy(int count, const std::vector<std::pair<int, int>>& edges,
                              const std::vector<int>& level_counts);

// Sparse interpolation to the next finer level. Differentiable in tokens.
ad::Tensor upsample_vertices(const ad::SparseMatrix& u, const ad::Tensor& tokens);

// Laplacian for an arbitrary edge list (used by tests and the builder).
ad::Tensor scaled_laplacian(int count, const std::vector<std::pair<int, int>>& edges);

// Cache round-trip. Laplacians are rebuilt from the stored edge lists.
void save_hierarchy(const MeshHierarchy& h, const std::string& path);
MeshHierarchy load_hierarchy(const std::string& path);

}  // namespace handrec::hier
