#include "handrec/mmib.hpp"

#include <cmath>
#include <vector>

#include "handrec/errors.hpp"

namespace handrec::mmib {

using ad::AttentionMask;
using ad::Tensor;

namespace {

constexpr int kHeads = 4;

enum class Group { kVertexL, kVertexR, kManoL, kManoR, kGrid };

// Group of a token index in the fixed core-plus-grid order.
Group group_of(int idx, int n_vertex, int n_grid) {
  if (idx < n_vertex) return Group::kVertexL;
  if (idx < 2 * n_vertex) return Group::kVertexR;
  if (idx < 2 * n_vertex + 2) return Group::kManoL;
  if (idx < 2 * n_vertex + 4) return Group::kManoR;
  if (idx < 2 * n_vertex + 4 + n_grid) return Group::kGrid;
  throw ContractError("token index out of range");
}

bool intra_allows(Group q, Group k) {
  switch (q) {
    case Group::kVertexL:
      return k == Group::kVertexL || k == Group::kGrid;
    case Group::kVertexR:
      return k == Group::kVertexR || k == Group::kGrid;
    case Group::kManoL:
      return k == Group::kVertexL || k == Group::kManoL || k == Group::kGrid;
    case Group::kManoR:
      return k == Group::kVertexR || k == Group::kManoR || k == Group::kGrid;
    case Group::kGrid:
      return k != Group::kManoL && k != Group::kManoR;
  }
  throw ContractError("unreachable");
}

bool inter_allows(Group q, Group k) {
  bool k_vertex = k == Group::kVertexL || k == Group::kVertexR;
  switch (q) {
    case Group::kVertexL:
    case Group::kVertexR:
      return k_vertex;
    case Group::kManoL:
    case Group::kManoR:
      return true;
    case Group::kGrid:
      break;
  }
  throw ContractError("inter mask has no grid tokens");
}

}  // namespace

AttentionMask build_intra_mask(int n_vertex, int n_grid) {
  if (n_vertex < 1) throw ContractError("build_intra_mask: need at least one vertex token");
  if (n_grid < 0) throw ContractError("build_intra_mask: negative grid token count");
  const int s = 2 * n_vertex + 4 + n_grid;
  AttentionMask mask;
  mask.q = s;
  mask.k = s;
  mask.allow.assign(size_t(s) * size_t(s), 0);
  for (int q = 0; q < s; ++q)
    for (int k = 0; k < s; ++k)
      mask.set(q, k, intra_allows(group_of(q, n_vertex, n_grid), group_of(k, n_vertex, n_grid)));
  return mask;
}

AttentionMask build_inter_mask(int n_vertex) {
  if (n_vertex < 1) throw ContractError("build_inter_mask: need at least one vertex token");
  const int s = 2 * n_vertex + 4;
  AttentionMask mask;
  mask.q = s;
  mask.k = s;
  mask.allow.assign(size_t(s) * size_t(s), 0);
  for (int q = 0; q < s; ++q)
    for (int k = 0; k < s; ++k)
      mask.set(q, k, inter_allows(group_of(q, n_vertex, 0), group_of(k, n_vertex, 0)));
  return mask;
}

namespace {

// Chebyshev mix for one hand; shared weights arrive pre-bound.
Tensor chebyshev_path(const Tensor& x, const Tensor& laplacian, const Tensor& w0,
                      const Tensor& w1, const Tensor& w2, const Tensor& b,
                      const Tensor& w_out) {
  Tensor t1 = ad::matmul(laplacian, x);
  Tensor t2 = ad::sub(ad::scale(ad::matmul(laplacian, t1), 2.0), x);
  Tensor mixed = ad::add(ad::add(ad::matmul(x, w0), ad::matmul(t1, w1)),
                         ad::matmul(t2, w2));
  return ad::add(x, ad::matmul(ad::gelu(ad::add_rowvec(mixed, b)), w_out));
}

}  // namespace

Tensor graph_residual_block(nn::ParamBinder& params, const std::string& prefix,
                            const Tensor& vertex_left, const Tensor& vertex_right,
                            const Tensor& laplacian) {
  if (vertex_left.shape != vertex_right.shape)
    throw ContractError("graph_residual_block: hands disagree: " +
                        ad::shape_str(vertex_left.shape) + " vs " +
                        ad::shape_str(vertex_right.shape));
  const int n = vertex_left.shape[0];
  if (laplacian.rank() != 2 || laplacian.shape[0] != n || laplacian.shape[1] != n)
    throw ContractError("graph_residual_block: Laplacian " + ad::shape_str(laplacian.shape) +
                        " does not match " + std::to_string(n) + " vertex tokens");
  const Tensor& w0 = params.get(prefix + "w0");
  const Tensor& w1 = params.get(prefix + "w1");
  const Tensor& w2 = params.get(prefix + "w2");
  const Tensor& b = params.get(prefix + "b");
  const Tensor& w_out = params.get(prefix + "out.w");
  Tensor left = chebyshev_path(vertex_left, laplacian, w0, w1, w2, b, w_out);
  Tensor right = chebyshev_path(vertex_right, laplacian, w0, w1, w2, b, w_out);
  return ad::concat_rows({left, right});
}

namespace {

Tensor attention(nn::ParamBinder& params, const std::string& prefix, const Tensor& x,
                 const AttentionMask& mask) {
  const int s = x.shape[0];
  const int d = x.cols();
  const int head_dim = d / kHeads;
  Tensor q = ad::matmul(x, params.get(prefix + "wq"));
  Tensor k = ad::matmul(x, params.get(prefix + "wk"));
  Tensor v = ad::matmul(x, params.get(prefix + "wv"));

  std::vector<Tensor> score_blocks;
  score_blocks.reserve(kHeads);
  const double inv_sqrt = 1.0 / std::sqrt(double(head_dim));
  for (int h = 0; h < kHeads; ++h) {
    Tensor qh = ad::slice_cols(q, h * head_dim, (h + 1) * head_dim);
    Tensor kh = ad::slice_cols(k, h * head_dim, (h + 1) * head_dim);
    score_blocks.push_back(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt));
  }
  Tensor scores = ad::reshape(ad::concat_rows(score_blocks), {kHeads, s, s});
  Tensor probs = ad::reshape(ad::masked_softmax(scores, mask), {kHeads * s, s});

  Tensor mixed;
  for (int h = 0; h < kHeads; ++h) {
    Tensor ph = ad::slice_rows(probs, h * s, (h + 1) * s);
    Tensor vh = ad::slice_cols(v, h * head_dim, (h + 1) * head_dim);
    Tensor oh = ad::matmul(ph, vh);
    mixed = h == 0 ? oh : ad::concat_cols(mixed, oh);
  }
  return ad::matmul(mixed, params.get(prefix + "wo"));
}

}  // namespace

Tensor transformer_encoder(nn::ParamBinder& params, const std::string& prefix, int depth,
                           const Tensor& tokens, const AttentionMask& mask) {
  if (tokens.rank() != 2)
    throw ContractError("transformer_encoder: tokens must be rank 2, got " +
                        ad::shape_str(tokens.shape));
  const int s = tokens.shape[0];
  const int d = tokens.cols();
  if (d % kHeads != 0)
    throw ValidationError("transformer_encoder: token dim " + std::to_string(d) +
                          " is not divisible by " + std::to_string(kHeads) + " heads");
  if (mask.q != s || mask.k != s)
    throw ContractError("transformer_encoder: mask is " + std::to_string(mask.q) + "x" +
                        std::to_string(mask.k) + " but there are " + std::to_string(s) +
                        " tokens");
  if (depth < 1) throw ValidationError("transformer_encoder: depth must be >= 1");

  Tensor x = tokens;
  for (int layer = 0; layer < depth; ++layer) {
    std::string lp = prefix + "l" + std::to_string(layer) + ".";
    Tensor normed = ad::layer_norm(x, params.get(lp + "ln1.g"), params.get(lp + "ln1.b"));
    x = ad::add(x, attention(params, lp, normed, mask));
    Tensor normed2 = ad::layer_norm(x, params.get(lp + "ln2.g"), params.get(lp + "ln2.b"));
    Tensor hidden = ad::gelu(ad::add_rowvec(ad::matmul(normed2, params.get(lp + "ffn.w1")),
                                            params.get(lp + "ffn.b1")));
    x = ad::add(x, ad::add_rowvec(ad::matmul(hidden, params.get(lp + "ffn.w2")),
                                  params.get(lp + "ffn.b2")));
  }
  return x;
}

TokenSet mmib_forward(nn::ParamBinder& params, const std::string& prefix, int depth,
                      const TokenSet& tokens, const Tensor& laplacian) {
  const int n = tokens.vertex_count();
  const int d = tokens.dim();
  auto check_rows = [d](const Tensor& t, int rows, const char* what) {
    if (t.rank() != 2 || t.shape[0] != rows || t.cols() != d)
      throw ContractError(std::string("mmib_forward: ") + what + " is " +
                          ad::shape_str(t.shape) + ", expected [" + std::to_string(rows) +
                          ", " + std::to_string(d) + "]");
  };
  check_rows(tokens.vertex_right, n, "vertex_right");
  check_rows(tokens.mano_left, 2, "mano_left");
  check_rows(tokens.mano_right, 2, "mano_right");
  const int n_grid = tokens.grid_count();
  if (n_grid > 0) check_rows(tokens.grid, n_grid, "grid");

  Tensor f_graph =
      graph_residual_block(params, prefix + "gcn.", tokens.vertex_left, tokens.vertex_right,
                           laplacian);

  std::vector<Tensor> parts = {f_graph, tokens.mano_left, tokens.mano_right};
  if (n_grid > 0) parts.push_back(tokens.grid);
  Tensor intra_in = ad::concat_rows(parts);
  Tensor intra_out = transformer_encoder(params, prefix + "intra.", depth, intra_in,
                                         build_intra_mask(n, n_grid));

  const int core = 2 * n + 4;
  Tensor core_tokens = n_grid > 0 ? ad::slice_rows(intra_out, 0, core) : intra_out;
  Tensor inter_out = transformer_encoder(params, prefix + "inter.", depth, core_tokens,
                                         build_inter_mask(n));

  TokenSet out;
  out.level = tokens.level;
  out.vertex_left = ad::slice_rows(inter_out, 0, n);
  out.vertex_right = ad::slice_rows(inter_out, n, 2 * n);
  out.mano_left = ad::slice_rows(inter_out, 2 * n, 2 * n + 2);
  out.mano_right = ad::slice_rows(inter_out, 2 * n + 2, 2 * n + 4);
  out.grid = n_grid > 0 ? ad::slice_rows(intra_out, core, core + n_grid) : tokens.grid;
  return out;
}

namespace {

void register_tfe_params(nn::ParamStore& store, const std::string& prefix, int dim, int depth,
                         std::uint64_t seed) {
  using nn::Init;
  for (int layer = 0; layer < depth; ++layer) {
    std::string lp = prefix + "l" + std::to_string(layer) + ".";
    store.create(lp + "wq", {dim, dim}, Init::kFanIn, seed);
    store.create(lp + "wk", {dim, dim}, Init::kFanIn, seed);
    store.create(lp + "wv", {dim, dim}, Init::kFanIn, seed);
    store.create(lp + "wo", {dim, dim}, Init::kZero, seed);
    store.create(lp + "ln1.g", {dim}, Init::kOne, seed);
    store.create(lp + "ln1.b", {dim}, Init::kZero, seed);
    store.create(lp + "ln2.g", {dim}, Init::kOne, seed);
    store.create(lp + "ln2.b", {dim}, Init::kZero, seed);
    store.create(lp + "ffn.w1", {dim, 4 * dim}, Init::kFanIn, seed);
    store.create(lp + "ffn.b1", {4 * dim}, Init::kZero, seed);
    store.create(lp + "ffn.w2", {4 * dim, dim}, Init::kZero, seed);
    store.create(lp + "ffn.b2", {dim}, Init::kZero, seed);
  }
}

}  // namespace

void register_mmib_params(nn::ParamStore& store, const std::string& prefix, int dim, int depth,
                          std::uint64_t seed) {
  using nn::Init;
  store.create(prefix + "gcn.w0", {dim, dim}, Init::kFanIn, seed);
  store.create(prefix + "gcn.w1", {dim, dim}, Init::kFanIn, seed);
  store.create(prefix + "gcn.w2", {dim, dim}, Init::kFanIn, seed);
  store.create(prefix + "gcn.b", {dim}, Init::kZero, seed);
  store.create(prefix + "gcn.out.w", {dim, dim}, Init::kZero, seed);
  register_tfe_params(store, prefix + "intra.", dim, depth, seed);
  register_tfe_params(store, prefix + "inter.", dim, depth, seed);
}

void register_stack_params(nn::ParamStore& store, const StackConfig& config, int n1,
                           std::uint64_t seed) {
  using nn::Init;
  if (n1 < 1) throw ContractError("register_stack_params: n1 must be >= 1");
  const int d1 = config.level_dims[0];
  const int core1 = 2 * n1 + 4;
  store.create("stack.init.w", {config.d_gap, core1 * d1}, Init::kFanIn, seed);
  store.create("stack.init.b", {core1 * d1}, Init::kZero, seed);
  for (int i = 0; i < 3; ++i) {
    const std::string tag = std::to_string(i + 1);
    const int d_in = config.level_dims[size_t(i)];
    const int d_out = i + 1 < 3 ? config.level_dims[size_t(i) + 1] : config.level_dims[2];
    register_mmib_params(store, "stack.l" + tag + ".", d_in, config.depth, seed);
    store.create("stack.trans" + tag + ".w", {d_in, d_out}, Init::kFanIn, seed);
    store.create("stack.trans" + tag + ".b", {d_out}, Init::kZero, seed);
  }
  const int d_final = config.level_dims[2];
  store.create("head.vertex.w", {d_final, 3}, Init::kZero, seed);
  store.create("head.vertex.b", {3}, Init::kZero, seed);
  store.create("head.pose.w", {d_final, config.pose_dim}, Init::kZero, seed);
  store.create("head.pose.b", {config.pose_dim}, Init::kZero, seed);
  store.create("head.shape.w", {d_final, hand::kShapeDim}, Init::kZero, seed);
  store.create("head.shape.b", {hand::kShapeDim}, Init::kZero, seed);
}

StackOutput stack_forward(nn::ParamBinder& params, const StackConfig& config,
                          const img::FeaturePyramid& pyramid,
                          const hier::MeshHierarchy& hierarchy) {
  if (hierarchy.levels.size() != 4)
    throw ValidationError("stack_forward: hierarchy must have 3 coarse levels plus the full "
                          "mesh, got " + std::to_string(hierarchy.levels.size()));
  if (pyramid.maps.size() != 3)
    throw ValidationError("stack_forward: feature pyramid must have 3 maps");
  if (pyramid.f_gap.rank() != 2 || pyramid.f_gap.shape[0] != 1 ||
      pyramid.f_gap.cols() != config.d_gap)
    throw ValidationError("stack_forward: global feature is " +
                          ad::shape_str(pyramid.f_gap.shape) + ", expected [1, " +
                          std::to_string(config.d_gap) + "]");

  const int n1 = hierarchy.levels[0].count;
  const int d1 = config.level_dims[0];
  const int core1 = 2 * n1 + 4;

  Tensor seq = ad::reshape(
      ad::add_rowvec(ad::matmul(pyramid.f_gap, params.get("stack.init.w")),
                     params.get("stack.init.b")),
      {core1, d1});

  TokenSet tokens;
  tokens.level = 1;
  tokens.vertex_left = ad::slice_rows(seq, 0, n1);
  tokens.vertex_right = ad::slice_rows(seq, n1, 2 * n1);
  tokens.mano_left = ad::slice_rows(seq, 2 * n1, 2 * n1 + 2);
  tokens.mano_right = ad::slice_rows(seq, 2 * n1 + 2, core1);

  for (int i = 0; i < 3; ++i) {
    const std::string level_tag = std::to_string(i + 1);
    tokens.grid = img::grid_tokens(params, "grid.l" + level_tag, pyramid.maps[size_t(i)],
                                   config.level_dims[size_t(i)], config.grid_size);
    if (tokens.vertex_count() != hierarchy.levels[size_t(i)].count)
      throw ContractError("stack_forward: level " + level_tag + " has " +
                          std::to_string(tokens.vertex_count()) + " vertex tokens but the "
                          "hierarchy expects " +
                          std::to_string(hierarchy.levels[size_t(i)].count));
    tokens = mmib_forward(params, "stack.l" + level_tag + ".", config.depth, tokens,
                          hierarchy.levels[size_t(i)].laplacian);

    // Transition: vertices to the next level's count, every core token to the
    // next width. The last transition keeps the width (square map).
    const ad::SparseMatrix& up = hierarchy.upsamplers[size_t(i)];
    const Tensor& tw = params.get("stack.trans" + level_tag + ".w");
    const Tensor& tb = params.get("stack.trans" + level_tag + ".b");
    auto transition = [&](const Tensor& t, bool upsample) {
      Tensor base = upsample ? hier::upsample_vertices(up, t) : t;
      return ad::add_rowvec(ad::matmul(base, tw), tb);
    };
    tokens.vertex_left = transition(tokens.vertex_left, true);
    tokens.vertex_right = transition(tokens.vertex_right, true);
    tokens.mano_left = transition(tokens.mano_left, false);
    tokens.mano_right = transition(tokens.mano_right, false);
    tokens.grid = Tensor();  // each level samples its own grid tokens
    tokens.level = i + 2;
  }

  StackOutput out;
  const Tensor& vw = params.get("head.vertex.w");
  const Tensor& vb = params.get("head.vertex.b");
  out.vertices_left = ad::add_rowvec(ad::matmul(tokens.vertex_left, vw), vb);
  out.vertices_right = ad::add_rowvec(ad::matmul(tokens.vertex_right, vw), vb);

  auto head = [&params](const Tensor& mano, int row, const char* which, int width) {
    Tensor token = ad::slice_rows(mano, row, row + 1);
    Tensor mapped = ad::add_rowvec(
        ad::matmul(token, params.get(std::string("head.") + which + ".w")),
        params.get(std::string("head.") + which + ".b"));
    return ad::reshape(mapped, {width});
  };
  out.theta_left = head(tokens.mano_left, 0, "pose", config.pose_dim);
  out.theta_right = head(tokens.mano_right, 0, "pose", config.pose_dim);
  out.beta_left = head(tokens.mano_left, 1, "shape", hand::kShapeDim);
  out.beta_right = head(tokens.mano_right, 1, "shape", hand::kShapeDim);
  out.tokens = tokens;
  return out;
}

}  // namespace handrec::mmib
