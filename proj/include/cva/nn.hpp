// Small layer zoo on top of the tensor core: named parameter registry,
// linear / layer-norm / multi-head attention / conv / MLP modules and the
// sinusoidal position table.

#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cva/tensor.hpp"

namespace cva {

// Owns the (name -> tensor) list for a model. Registration order is fixed by
// construction order, which keeps checkpoint layouts stable across runs.
class ParamRegistry {
 public:
  Tensor add(const std::string& name, Tensor t);
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  Tensor* find(const std::string& name);
  void zero_grad();
  int total_size() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

Tensor xavier_uniform(int fan_in, int fan_out, std::mt19937_64& rng);
Tensor normal_init(std::vector<int> shape, float stddev, std::mt19937_64& rng);

struct Linear {
  Tensor w;  // [in x out]
  Tensor b;  // [out]
  Linear() = default;
  Linear(ParamRegistry& reg, const std::string& prefix, int in, int out, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const { return add_row_bias(matmul(x, w), b); }
};

struct LayerNormLayer {
  Tensor gain, bias;
  LayerNormLayer() = default;
  LayerNormLayer(ParamRegistry& reg, const std::string& prefix, int dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

struct MultiHeadAttention {
  Linear wq, wk, wv;
  Tensor wo;
  int n_heads = 1;
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamRegistry& reg, const std::string& prefix, int dim, int n_heads, std::mt19937_64& rng);
  Tensor operator()(const Tensor& q, const Tensor& k, const Tensor& v,
                    const std::vector<uint8_t>* mask = nullptr) const;
};

// Two linear layers with a ReLU between them.
struct Mlp {
  Linear fc1, fc2;
  Mlp() = default;
  Mlp(ParamRegistry& reg, const std::string& prefix, int in, int hidden, int out, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const { return fc2(relu(fc1(x))); }
};

struct Conv1dLayer {
  Tensor kernel;  // [w x in x out]
  Tensor bias;    // [out]
  Conv1dLayer() = default;
  Conv1dLayer(ParamRegistry& reg, const std::string& prefix, int width, int in, int out, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const { return conv1d(x, kernel, bias); }
};

// Fixed sin/cos position table, [length x dim].
Tensor sinusoidal_positions(int length, int dim);

}  // namespace cva
