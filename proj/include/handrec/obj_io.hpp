#pragma once

#include <array>
#include <string>
#include <vector>

#include "handrec/tensor.hpp"

namespace handrec::io {

struct ObjMesh {
  ad::Tensor vertices;                    // N x 3
  std::vector<std::array<int, 3>> faces;  // 0-based triangles
};

// ASCII Wavefront subset: one "v x y z" line per vertex (full double
// precision) and one "f a b c" line per triangle, 1-indexed.
void write_obj(const std::string& path, const ad::Tensor& vertices,
               const std::vector<std::array<int, 3>>& faces);

// Reads the same subset back; comments and blank lines are skipped. Malformed
// lines or out-of-range indices raise ValidationError naming the line.
ObjMesh read_obj(const std::string& path);

}  // namespace handrec::io
