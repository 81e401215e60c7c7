#include "handrec/params.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "handrec/errors.hpp"
#include "handrec/rng.hpp"

namespace handrec::nn {

namespace {

// Inputs feeding one output unit: rows of a [in, out] matrix, receptive field
// of a [out_ch, in_ch, kh, kw] convolution kernel. Rough values are fine; this
// only sets the initial weight scale.
int fan_in_of(const std::vector<int>& shape) {
  if (shape.size() == 2) return shape[0];
  if (shape.size() == 4) return shape[1] * shape[2] * shape[3];
  return shape[0];
}

}  // namespace

void ParamStore::create(const std::string& name, const std::vector<int>& shape,
                        Init init, std::uint64_t seed) {
  if (name.empty()) throw ContractError("ParamStore::create: empty name");
  if (shape.empty()) throw ContractError("ParamStore::create: empty shape for " + name);
  if (values_.count(name) != 0)
    throw ContractError("ParamStore::create: duplicate parameter " + name);
  ad::Tensor t = ad::Tensor::zeros(shape);
  switch (init) {
    case Init::kZero:
      break;
    case Init::kOne:
      for (double& v : t.data) v = 1.0;
      break;
    case Init::kFanIn: {
      // Uniform(-sqrt(3/fan_in), +sqrt(3/fan_in)) has variance 1/fan_in, so a
      // linear layer preserves the variance of its input at initialization.
      double bound = std::sqrt(3.0 / double(fan_in_of(shape)));
      Rng rng = named_rng(seed, name);
      for (double& v : t.data) v = rng.uniform(-bound, bound);
      break;
    }
  }
  values_.emplace(name, std::move(t));
}

ad::Tensor& ParamStore::value(const std::string& name) {
  auto it = values_.find(name);
  if (it == values_.end()) throw ContractError("unknown parameter " + name);
  return it->second;
}

const ad::Tensor& ParamStore::value(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw ContractError("unknown parameter " + name);
  return it->second;
}

const ad::Tensor& ParamBinder::get(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  ad::Tensor watched = tape_->watch(store_->value(name));
  return bound_.emplace(name, std::move(watched)).first->second;
}

std::map<std::string, ad::Tensor> ParamBinder::gradients() const {
  std::map<std::string, ad::Tensor> out;
  for (const auto& [name, tensor] : bound_) out.emplace(name, tape_->grad(tensor));
  return out;
}

namespace {

constexpr char kMagic[4] = {'M', 'M', 'H', 'D'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::string& buf, std::uint16_t v) {
  buf.push_back(char(v & 0xff));
  buf.push_back(char((v >> 8) & 0xff));
}

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(char((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& buf, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(buf, bits);
}

class Reader {
 public:
  Reader(std::string bytes, std::string path)
      : bytes_(std::move(bytes)), path_(std::move(path)) {}

  std::uint16_t u16() { return std::uint16_t(u_bytes(2)); }
  std::uint32_t u32() { return std::uint32_t(u_bytes(4)); }
  std::uint64_t u64() { return u_bytes(8); }

  double f64() {
    std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  std::string str(size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::uint64_t u_bytes(int n) {
    need(size_t(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= std::uint64_t(static_cast<unsigned char>(bytes_[pos_ + size_t(i)])) << (8 * i);
    pos_ += size_t(n);
    return v;
  }

  void need(size_t n) {
    if (pos_ + n > bytes_.size())
      throw ValidationError("checkpoint " + path_ + " is truncated");
  }

  std::string bytes_;
  std::string path_;
  size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& store,
                     const std::string& config_json, std::uint64_t step) {
  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);
  put_u32(buf, std::uint32_t(config_json.size()));
  buf            += config_json;
  put_u64(buf, step);
  put_u32(buf, std::uint32_t(store.all().size()));
  for (const auto& [name, tensor] : store.all()) {
    if (name.size() > 0xffff)
      throw ContractError("checkpoint: parameter name too long: " + name);
    put_u16(buf, std::uint16_t(name.size()));
    buf += name;
    put_u32(buf, std::uint32_t(tensor.rank()));
    for (int d : tensor.shape) put_u32(buf, std::uint32_t(d));
    for (double v : tensor.data) put_f64(buf, v);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot open checkpoint for writing: " + path);
  out.write(buf.data(), std::streamsize(buf.size()));
  if (!out) throw ValidationError("failed writing checkpoint: " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(bytes), path);

  if (r.str(4) != std::string(kMagic, 4))
    throw ValidationError("checkpoint " + path + " has wrong magic (expected MMHD)");
  std::uint32_t version = r.u32();
  if (version != kVersion)
    throw ValidationError("checkpoint " + path + " has unsupported version " +
                          std::to_string(version));

  CheckpointData data;
  data.config_json = r.str(r.u32());
  data.step = r.u64();
  std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u16());
    std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8)
      throw ValidationError("checkpoint " + path + ": tensor " + name +
                            " has invalid rank " + std::to_string(rank));
    std::vector<int> shape;
    int total = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      int dim = int(r.u32());
      if (dim <= 0)
        throw ValidationError("checkpoint " + path + ": tensor " + name +
                              " has invalid dimension " + std::to_string(dim));
      shape.push_back(dim);
      total *= dim;
    }
    std::vector<double> values(static_cast<size_t>(total));
    for (double& v : values) v = r.f64();
    data.tensors.emplace(name, ad::Tensor(shape, std::move(values)));
  }
  if (!r.done()) throw ValidationError("checkpoint " + path + " has trailing bytes");
  return data;
}

void apply_checkpoint(ParamStore& store, const CheckpointData& data) {
  for (const auto& [name, tensor] : data.tensors) {
    if (!store.contains(name))
      throw ValidationError("checkpoint holds unknown parameter " + name);
    ad::Tensor& dst = store.value(name);
    if (dst.shape != tensor.shape)
      throw ValidationError("checkpoint parameter " + name + " has shape " +
                            ad::shape_str(tensor.shape) + " but the model expects " +
                            ad::shape_str(dst.shape));
  }
  for (const auto& [name, tensor] : data.tensors) store.value(name).data = tensor.data;
}

}  // namespace handrec::nn
