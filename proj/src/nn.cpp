#include "cva/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace cva {

Tensor ParamRegistry::add(const std::string& name, Tensor t) {
  for (const auto& [existing, _] : items_) {
    if (existing == name) throw std::invalid_argument("duplicate parameter name: " + name);
  }
  t.set_requires_grad(true);
  items_.emplace_back(name, t);
  return t;
}

Tensor* ParamRegistry::find(const std::string& name) {
  for (auto& [n, t] : items_) {
    if (n == name) return &t;
  }
  return nullptr;
}

void ParamRegistry::zero_grad() {
  for (auto& [_, t] : items_) t.zero_grad();
}

int ParamRegistry::total_size() const {
  int n = 0;
  for (const auto& [_, t] : items_) n += t.size();
  return n;
}

Tensor xavier_uniform(int fan_in, int fan_out, std::mt19937_64& rng) {
  const float limit = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
  std::uniform_real_distribution<float> dist(-limit, limit);
  std::vector<float> data(static_cast<size_t>(fan_in) * fan_out);
  for (float& v : data) v = dist(rng);
  return Tensor::from_data({fan_in, fan_out}, std::move(data));
}

Tensor normal_init(std::vector<int> shape, float stddev, std::mt19937_64& rng) {
  int n = 1;
  for (int d : shape) n *= d;
  std::normal_distribution<float> dist(0.0f, stddev);
  std::vector<float> data(static_cast<size_t>(n));
  for (float& v : data) v = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(data));
}

Linear::Linear(ParamRegistry& reg, const std::string& prefix, int in, int out, std::mt19937_64& rng) {
  w = reg.add(prefix + ".w", xavier_uniform(in, out, rng));
  b = reg.add(prefix + ".b", Tensor::zeros({out}));
}

LayerNormLayer::LayerNormLayer(ParamRegistry& reg, const std::string& prefix, int dim) {
  gain = reg.add(prefix + ".gain", Tensor::full({dim}, 1.0f));
  bias = reg.add(prefix + ".bias", Tensor::zeros({dim}));
}

MultiHeadAttention::MultiHeadAttention(ParamRegistry& reg, const std::string& prefix, int dim, int heads,
                                       std::mt19937_64& rng)
    : wq(reg, prefix + ".wq", dim, dim, rng),
      wk(reg, prefix + ".wk", dim, dim, rng),
      wv(reg, prefix + ".wv", dim, dim, rng),
      n_heads(heads) {
  wo = reg.add(prefix + ".wo", xavier_uniform(dim, dim, rng));
}

Tensor MultiHeadAttention::operator()(const Tensor& q, const Tensor& k, const Tensor& v,
                                      const std::vector<uint8_t>* mask) const {
  return attention(wq(q), wk(k), wv(v), wo, n_heads, mask);
}

Mlp::Mlp(ParamRegistry& reg, const std::string& prefix, int in, int hidden, int out, std::mt19937_64& rng)
    : fc1(reg, prefix + ".fc1", in, hidden, rng), fc2(reg, prefix + ".fc2", hidden, out, rng) {}

Conv1dLayer::Conv1dLayer(ParamRegistry& reg, const std::string& prefix, int width, int in, int out,
                         std::mt19937_64& rng) {
  if (width % 2 == 0) throw std::invalid_argument("conv layer width must be odd, got " + std::to_string(width));
  const float limit = std::sqrt(6.0f / static_cast<float>(width * in + out));
  std::uniform_real_distribution<float> dist(-limit, limit);
  std::vector<float> data(static_cast<size_t>(width) * in * out);
  for (float& v : data) v = dist(rng);
  kernel = reg.add(prefix + ".kernel", Tensor::from_data({width, in, out}, std::move(data)));
  bias = reg.add(prefix + ".bias", Tensor::zeros({out}));
}

Tensor sinusoidal_positions(int length, int dim) {
  std::vector<float> data(static_cast<size_t>(length) * dim);
  for (int pos = 0; pos < length; ++pos) {
    for (int i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -2.0 * (i / 2) / static_cast<double>(dim));
      const double angle = pos * rate;
      data[static_cast<size_t>(pos) * dim + i] = static_cast<float>((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
    }
  }
  return Tensor::from_data({length, dim}, std::move(data));
}

}  // namespace cva
