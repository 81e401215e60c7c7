#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "handrec/tensor.hpp"

namespace handrec::nn {

enum class Init {
  kZero,
  kOne,
  kFanIn,  // uniform in +-1/sqrt(fan-in), seeded by (seed, name)
};

// Named learnable tensors. std::map keeps iteration order deterministic, so
// optimizer sweeps and checkpoints are reproducible.
class ParamStore {
 public:
  // contract: name unused; shape non-empty.
  void create(const std::string& name, const std::vector<int>& shape, Init init,
              std::uint64_t seed);

  bool contains(const std::string& name) const { return values_.count(name) != 0; }
  ad::Tensor& value(const std::string& name);
  const ad::Tensor& value(const std::string& name) const;
  std::map<std::string, ad::Tensor>& all() { return values_; }
  const std::map<std::string, ad::Tensor>& all() const { return values_; }
  int count() const { return int(values_.size()); }

 private:
  std::map<std::string, ad::Tensor> values_;
};

// Per-pass view of a ParamStore: the first get() of a name watches the stored
// value on this pass's tape, later gets reuse the same node.
class ParamBinder {
 public:
  ParamBinder(ad::Tape& tape, const ParamStore& store) : tape_(&tape), store_(&store) {}

  const ad::Tensor& get(const std::string& name);
  const std::map<std::string, ad::Tensor>& bound() const { return bound_; }

  // Gradients of every bound parameter after tape.backward(). Unreached
  // parameters yield zeros.
  std::map<std::string, ad::Tensor> gradients() const;

 private:
  ad::Tape* tape_;
  const ParamStore* store_;
  std::map<std::string, ad::Tensor> bound_;
};

// Binary checkpoint container: magic "MMHD", version u32, config JSON
// (u32 length + bytes), step u64, tensor count u32, then per tensor —
// name (u16 length + bytes), rank u32, dims u32 each, float64 payload.
// All integers and floats little-endian.
struct CheckpointData {
  std::string config_json;
  std::uint64_t step = 0;
  std::map<std::string, ad::Tensor> tensors;
};

void save_checkpoint(const std::string& path, const ParamStore& store,
                     const std::string& config_json, std::uint64_t step);
CheckpointData load_checkpoint(const std::string& path);

// Copies checkpoint tensors into an existing store. Unknown names or shape
// mismatches raise ValidationError naming the tensor.
void apply_checkpoint(ParamStore& store, const CheckpointData& data);

}  // namespace handrec::nn
