#include "handrec/obj_io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "handrec/errors.hpp"

namespace handrec::io {

void write_obj(const std::string& path, const ad::Tensor& vertices,
               const std::vector<std::array<int, 3>>& faces) {
  if (vertices.rank() != 2 || vertices.shape[1] != 3)
    throw ContractError("write_obj expects vertices of shape [n, 3]");
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open " + path + " for writing");
  char line[128];
  for (int v = 0; v < vertices.shape[0]; ++v) {
    std::snprintf(line, sizeof line, "v %.17g %.17g %.17g\n", vertices.at(v, 0),
                  vertices.at(v, 1), vertices.at(v, 2));
    out << line;
  }
  for (const auto& f : faces) {
    for (int c : f)
      if (c < 0 || c >= vertices.shape[0])
        throw ContractError("face index out of range in write_obj");
    out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
  }
  if (!out) throw ValidationError("failed while writing " + path);
}

ObjMesh read_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  std::vector<double> coords;
  std::vector<std::array<int, 3>> faces;
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& why) {
    throw ValidationError(path + ":" + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      double x, y, z;
      if (!(ss >> x >> y >> z)) fail("malformed vertex line");
      coords.insert(coords.end(), {x, y, z});
    } else if (tag == "f") {
      long a, b, c;
      if (!(ss >> a >> b >> c)) fail("malformed face line");
      const long n = long(coords.size() / 3);
      for (long idx : {a, b, c})
        if (idx < 1 || idx > n) fail("face index out of range");
      faces.push_back({int(a - 1), int(b - 1), int(c - 1)});
    }
    // other tags (vn, vt, o, ...) are ignored
  }
  ObjMesh mesh;
  mesh.vertices = ad::Tensor::zeros({int(coords.size() / 3), 3});
  mesh.vertices.data = coords;
  mesh.faces = std::move(faces);
  return mesh;
}

}  // namespace handrec::io
