// Dense float32 tensors with reverse-mode automatic differentiation.
//
// Ops record backward closures onto the thread-local tape installed by a
// TapeScope. Without an active scope they run forward-only, so inference
// and plain data manipulation never pay for gradient bookkeeping. A tape
// is built by one forward pass and consumed by exactly one backward().

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace cva {

std::string shape_str(const std::vector<int>& shape);

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, float value);
  static Tensor from_data(std::vector<int> shape, std::vector<float> data);
  static Tensor scalar(float value);
  // Same as from_data but with requires_grad set; used for model parameters
  // and gradient-check probes.
  static Tensor param(std::vector<int> shape, std::vector<float> data);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int size() const { return static_cast<int>(impl_->data.size()); }

  float* data() { return impl_->data.data(); }
  const float* data() const { return impl_->data.data(); }
  std::vector<float>& vec() { return impl_->data; }
  const std::vector<float>& vec() const { return impl_->data; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool on);
  float* grad() { return impl_->grad.data(); }
  const float* grad() const { return impl_->grad.data(); }
  std::vector<float>& grad_vec() { return impl_->grad; }
  void zero_grad();

  // Single-element access; contract error on larger tensors.
  float item() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  bool all_finite() const;

  // Deep copy with fresh storage; gradients are not copied.
  Tensor clone() const;

 private:
  struct Impl {
    std::vector<int> shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty unless requires_grad
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
  static Tensor make(std::vector<int> shape, std::vector<float> data, bool requires_grad);
};

class Tape {
 public:
  void push(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
  size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Seeds d(loss)/d(loss) = seed and replays the tape in reverse, accumulating
  // into every requires_grad tensor reachable from the loss. One shot: a
  // second call on the same tape is a contract error.
  void backward(const Tensor& loss, float seed = 1.0f);

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

Tape* active_tape();

// Element-wise ops (shapes must match exactly).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, float c);
Tensor add_const(const Tensor& a, float c);
// Multiply every element of a by a single-element tensor (gradients flow to both).
Tensor mul_scalar(const Tensor& a, const Tensor& s);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor abs_val(const Tensor& a);

// C = op(a) * op(b) for 2-D tensors, with optional transposes.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
// [R x C] + [C] broadcast over rows.
Tensor add_row_bias(const Tensor& a, const Tensor& bias);

// Stable softmax (max subtraction) along `axis` of a rank-1/2 tensor.
Tensor softmax(const Tensor& a, int axis);
// Normalize the last dimension to mean 0 / var 1 (epsilon 1e-5), then scale+shift.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
// Same-length 1-D convolution; x [L x Din], kernel [w x Din x Dout], odd w, zero padding.
Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias);

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
// log(sum(exp(a))) over all elements, max-shifted; scalar output.
Tensor logsumexp(const Tensor& a);

// Same data, new shape; element count must match.
Tensor reshape(const Tensor& a, std::vector<int> new_shape);

Tensor slice_rows(const Tensor& a, int start, int count);
Tensor slice_cols(const Tensor& a, int start, int count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

// Differentiable cosine similarity between two vectors; scalar output.
// With eps = 0 a zero-norm input is a domain error; a positive eps
// regularizes the norms instead (used for learned embeddings that can
// collapse to zero under ReLU).
Tensor cosine_similarity_t(const Tensor& u, const Tensor& v, float eps = 0.0f);

// Multi-head scaled dot-product attention. q [Lq x D], k/v [Lk x D], D divisible
// by n_heads, per-head scale 1/sqrt(D/n_heads). Heads are concatenated and
// projected by wo [D x D]. mask, when given, is row-major Lq x Lk with nonzero =
// attend allowed; masked logits get -1e30 before softmax. A fully masked row is
// a contract error.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& wo,
                 int n_heads, const std::vector<uint8_t>* mask = nullptr);

}  // namespace cva
