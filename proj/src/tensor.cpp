#include "cva/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace cva {

namespace {

thread_local Tape* g_active_tape = nullptr;

int shape_product(const std::vector<int>& shape) {
  int n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dimension must be positive, got shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

bool taping(std::initializer_list<const Tensor*> inputs) {
  if (!g_active_tape) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// C[m x n] += A[m x k] * B[k x n], all row-major.
void mm_accum(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<size_t>(i) * k;
    float* crow = c + static_cast<size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const float av = arow[l];
      const float* brow = b + static_cast<size_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<float> transposed(const float* src, int rows, int cols) {
  std::vector<float> out(static_cast<size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[static_cast<size_t>(c) * rows + r] = src[static_cast<size_t>(r) * cols + c];
  return out;
}

// C += op(A) * op(B) with op = transpose when the flag is set.
void mm_into(float* c, const float* a, int ar, int ac, bool ta, const float* b, int br, int bc, bool tb) {
  std::vector<float> at, bt;
  const float* ae = a;
  const float* be = b;
  int m = ar, k = ac;
  if (ta) {
    at = transposed(a, ar, ac);
    ae = at.data();
    m = ac;
    k = ar;
  }
  int kb = br, n = bc;
  if (tb) {
    bt = transposed(b, br, bc);
    be = bt.data();
    kb = bc;
    n = br;
  }
  if (k != kb) throw std::logic_error("mm_into: inner dimension mismatch");
  mm_accum(ae, be, c, m, k, n);
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor Tensor::make(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
  const int n = shape_product(shape);
  if (n != static_cast<int>(data.size())) {
    throw std::invalid_argument("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                                shape_str(shape));
  }
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(data);
  t.impl_->requires_grad = requires_grad;
  if (requires_grad) t.impl_->grad.assign(t.impl_->data.size(), 0.0f);
  return t;
}

Tensor Tensor::zeros(std::vector<int> shape) {
  const int n = shape_product(shape);
  return make(std::move(shape), std::vector<float>(static_cast<size_t>(n), 0.0f), false);
}

Tensor Tensor::full(std::vector<int> shape, float value) {
  const int n = shape_product(shape);
  return make(std::move(shape), std::vector<float>(static_cast<size_t>(n), value), false);
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data) {
  return make(std::move(shape), std::move(data), false);
}

Tensor Tensor::scalar(float value) { return make({1}, {value}, false); }

Tensor Tensor::param(std::vector<int> shape, std::vector<float> data) {
  return make(std::move(shape), std::move(data), true);
}

void Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (on && impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0f);
  if (!on) impl_->grad.clear();
}

void Tensor::zero_grad() {
  if (impl_ && impl_->requires_grad) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

float Tensor::item() const {
  if (!impl_ || impl_->data.size() != 1) {
    throw std::invalid_argument("item(): tensor is not a scalar, shape " + (impl_ ? shape_str(impl_->shape) : "[]"));
  }
  return impl_->data[0];
}

bool Tensor::all_finite() const {
  for (float v : impl_->data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = impl_->shape;
  t.impl_->data = impl_->data;
  t.impl_->requires_grad = impl_->requires_grad;
  if (impl_->requires_grad) t.impl_->grad.assign(impl_->data.size(), 0.0f);
  return t;
}

void Tape::backward(const Tensor& loss, float seed) {
  if (consumed_) throw std::invalid_argument("backward: tape already consumed");
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward: loss is not connected to any parameter on this tape");
  }
  const_cast<Tensor&>(loss).grad()[0] += seed;
  for (size_t i = nodes_.size(); i-- > 0;) nodes_[i]();
  consumed_ = true;
}

TapeScope::TapeScope(Tape& tape) {
  prev_ = g_active_tape;
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = prev_; }

Tape* active_tape() { return g_active_tape; }

namespace {

// Builds the op output and registers the backward closure in one place.
Tensor unary_op(const Tensor& a, std::vector<int> out_shape, std::vector<float> out_data,
                std::function<void(Tensor&, Tensor&)> backward) {
  const bool rec = taping({&a});
  Tensor out = rec ? Tensor::param(std::move(out_shape), std::move(out_data))
                   : Tensor::from_data(std::move(out_shape), std::move(out_data));
  if (rec) {
    Tensor ain = a;
    g_active_tape->push([ain, out, backward]() mutable { backward(ain, out); });
  }
  return out;
}

Tensor binary_op(const Tensor& a, const Tensor& b, std::vector<int> out_shape, std::vector<float> out_data,
                 std::function<void(Tensor&, Tensor&, Tensor&)> backward) {
  const bool rec = taping({&a, &b});
  Tensor out = rec ? Tensor::param(std::move(out_shape), std::move(out_data))
                   : Tensor::from_data(std::move(out_shape), std::move(out_data));
  if (rec) {
    Tensor ain = a, bin = b;
    g_active_tape->push([ain, bin, out, backward]() mutable { backward(ain, bin, out); });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<float> out(a.vec());
  for (int i = 0; i < b.size(); ++i) out[i] += b.data()[i];
  return binary_op(a, b, a.shape(), std::move(out), [](Tensor& ain, Tensor& bin, Tensor& o) {
    if (ain.requires_grad())
      for (int i = 0; i < o.size(); ++i) ain.grad()[i] += o.grad()[i];
    if (bin.requires_grad())
      for (int i = 0; i < o.size(); ++i) bin.grad()[i] += o.grad()[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<float> out(a.vec());
  for (int i = 0; i < b.size(); ++i) out[i] -= b.data()[i];
  return binary_op(a, b, a.shape(), std::move(out), [](Tensor& ain, Tensor& bin, Tensor& o) {
    if (ain.requires_grad())
      for (int i = 0; i < o.size(); ++i) ain.grad()[i] += o.grad()[i];
    if (bin.requires_grad())
      for (int i = 0; i < o.size(); ++i) bin.grad()[i] -= o.grad()[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<float> out(static_cast<size_t>(a.size()));
  for (int i = 0; i < a.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return binary_op(a, b, a.shape(), std::move(out), [](Tensor& ain, Tensor& bin, Tensor& o) {
    if (ain.requires_grad())
      for (int i = 0; i < o.size(); ++i) ain.grad()[i] += o.grad()[i] * bin.data()[i];
    if (bin.requires_grad())
      for (int i = 0; i < o.size(); ++i) bin.grad()[i] += o.grad()[i] * ain.data()[i];
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "div");
  std::vector<float> out(static_cast<size_t>(a.size()));
  for (int i = 0; i < a.size(); ++i) out[i] = a.data()[i] / b.data()[i];
  return binary_op(a, b, a.shape(), std::move(out), [](Tensor& ain, Tensor& bin, Tensor& o) {
    if (ain.requires_grad())
      for (int i = 0; i < o.size(); ++i) ain.grad()[i] += o.grad()[i] / bin.data()[i];
    if (bin.requires_grad())
      for (int i = 0; i < o.size(); ++i)
        bin.grad()[i] -= o.grad()[i] * ain.data()[i] / (bin.data()[i] * bin.data()[i]);
  });
}

// Ties route the gradient to the first argument.
Tensor minimum(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "minimum");
  std::vector<float> out(static_cast<size_t>(a.size()));
  for (int i = 0; i < a.size(); ++i) out[i] = std::min(a.data()[i], b.data()[i]);
  return binary_op(a, b, a.shape(), std::move(out), [](Tensor& ain, Tensor& bin, Tensor& o) {
    for (int i = 0; i < o.size(); ++i) {
      const bool take_a = ain.data()[i] <= bin.data()[i];
      if (take_a && ain.requires_grad()) ain.grad()[i] += o.grad()[i];
      if (!take_a && bin.requires_grad()) bin.grad()[i] += o.grad()[i];
    }
  });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "maximum");
  std::vector<float> out(static_cast<size_t>(a.size()));
  for (int i = 0; i < a.size(); ++i) out[i] = std::max(a.data()[i], b.data()[i]);
  return binary_op(a, b, a.shape(), std::move(out), [](Tensor& ain, Tensor& bin, Tensor& o) {
    for (int i = 0; i < o.size(); ++i) {
      const bool take_a = ain.data()[i] >= bin.data()[i];
      if (take_a && ain.requires_grad()) ain.grad()[i] += o.grad()[i];
      if (!take_a && bin.requires_grad()) bin.grad()[i] += o.grad()[i];
    }
  });
}

Tensor scale(const Tensor& a, float c) {
  std::vector<float> out(static_cast<size_t>(a.size()));
  for (int i = 0; i < a.size(); ++i) out[i] = a.data()[i] * c;
  return unary_op(a, a.shape(), std::move(out), [c](Tensor& ain, Tensor& o) {
    for (int i = 0; i < o.size(); ++i) ain.grad()[i] += o.grad()[i] * c;
  });
}

Tensor add_const(const Tensor& a, float c) {
  std::vector<float> out(static_cast<size_t>(a.size()));
  for (int i = 0; i < a.size(); ++i) out[i] = a.data()[i] + c;
  return unary_op(a, a.shape(), std::move(out), [](Tensor& ain, Tensor& o) {
    for (int i = 0; i < o.size(); ++i) ain.grad()[i] += o.grad()[i];
  });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw std::invalid_argument("mul_scalar: scale must be single-element, got " + shape_str(s.shape()));
  const float sv = s.data()[0];
  std::vector<float> out(static_cast<size_t>(a.size()));
  for (int i = 0; i < a.size(); ++i) out[i] = a.data()[i] * sv;
  return binary_op(a, s, a.shape(), std::move(out), [](Tensor& ain, Tensor& sin, Tensor& o) {
    const float svb = sin.data()[0];
    if (ain.requires_grad())
      for (int i = 0; i < o.size(); ++i) ain.grad()[i] += o.grad()[i] * svb;
    if (sin.requires_grad()) {
      float acc = 0.0f;
      for (int i = 0; i < o.size(); ++i) acc += o.grad()[i] * ain.data()[i];
      sin.grad()[0] += acc;
    }
  });
}

Tensor relu(const Tensor& a) {
  std::vector<float> out(static_cast<size_t>(a.size()));
  for (int i = 0; i < a.size(); ++i) out[i] = a.data()[i] > 0.0f ? a.data()[i] : 0.0f;
  return unary_op(a, a.shape(), std::move(out), [](Tensor& ain, Tensor& o) {
    for (int i = 0; i < o.size(); ++i)
      if (ain.data()[i] > 0.0f) ain.grad()[i] += o.grad()[i];
  });
}

Tensor sigmoid(const Tensor& a) {
  std::vector<float> out(static_cast<size_t>(a.size()));
  for (int i = 0; i < a.size(); ++i) out[i] = 1.0f / (1.0f + std::exp(-a.data()[i]));
  return unary_op(a, a.shape(), std::move(out), [](Tensor& ain, Tensor& o) {
    for (int i = 0; i < o.size(); ++i) {
      const float y = o.data()[i];
      ain.grad()[i] += o.grad()[i] * y * (1.0f - y);
    }
  });
}

Tensor abs_val(const Tensor& a) {
  std::vector<float> out(static_cast<size_t>(a.size()));
  for (int i = 0; i < a.size(); ++i) out[i] = std::fabs(a.data()[i]);
  return unary_op(a, a.shape(), std::move(out), [](Tensor& ain, Tensor& o) {
    for (int i = 0; i < o.size(); ++i) {
      const float x = ain.data()[i];
      if (x > 0.0f) ain.grad()[i] += o.grad()[i];
      else if (x < 0.0f) ain.grad()[i] -= o.grad()[i];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw std::invalid_argument("matmul: expected rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  }
  const int m = trans_a ? a.dim(1) : a.dim(0);
  const int ka = trans_a ? a.dim(0) : a.dim(1);
  const int kb = trans_b ? b.dim(1) : b.dim(0);
  const int n = trans_b ? b.dim(0) : b.dim(1);
  if (ka != kb) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                (trans_a ? "^T" : "") + " x " + shape_str(b.shape()) + (trans_b ? "^T" : ""));
  }
  std::vector<float> out(static_cast<size_t>(m) * n, 0.0f);
  mm_into(out.data(), a.data(), a.dim(0), a.dim(1), trans_a, b.data(), b.dim(0), b.dim(1), trans_b);
  return binary_op(a, b, {m, n}, std::move(out), [trans_a, trans_b, m, n](Tensor& ain, Tensor& bin, Tensor& o) {
    if (ain.requires_grad()) {
      if (!trans_a)
        mm_into(ain.grad(), o.grad(), m, n, false, bin.data(), bin.dim(0), bin.dim(1), !trans_b);
      else
        mm_into(ain.grad(), bin.data(), bin.dim(0), bin.dim(1), trans_b, o.grad(), m, n, true);
    }
    if (bin.requires_grad()) {
      if (!trans_b)
        mm_into(bin.grad(), ain.data(), ain.dim(0), ain.dim(1), !trans_a, o.grad(), m, n, false);
      else
        mm_into(bin.grad(), o.grad(), m, n, true, ain.data(), ain.dim(0), ain.dim(1), trans_a);
    }
  });
}

Tensor add_row_bias(const Tensor& a, const Tensor& bias) {
  if (a.rank() != 2 || bias.rank() != 1 || a.dim(1) != bias.dim(0)) {
    throw std::invalid_argument("add_row_bias: incompatible shapes " + shape_str(a.shape()) + " and " +
                                shape_str(bias.shape()));
  }
  const int rows = a.dim(0), cols = a.dim(1);
  std::vector<float> out(a.vec());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[static_cast<size_t>(r) * cols + c] += bias.data()[c];
  return binary_op(a, bias, a.shape(), std::move(out), [rows, cols](Tensor& ain, Tensor& bin, Tensor& o) {
    if (ain.requires_grad())
      for (int i = 0; i < o.size(); ++i) ain.grad()[i] += o.grad()[i];
    if (bin.requires_grad())
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) bin.grad()[c] += o.grad()[static_cast<size_t>(r) * cols + c];
  });
}

namespace {

struct LineView {
  int count;    // number of independent lines
  int length;   // elements per line
  int stride;   // step between consecutive elements of a line
  int advance;  // step between first elements of consecutive lines
};

LineView line_view(const Tensor& t, int axis) {
  if (t.rank() == 1) {
    if (axis != 0) throw std::invalid_argument("axis out of range for shape " + shape_str(t.shape()));
    return {1, t.dim(0), 1, 0};
  }
  if (t.rank() == 2) {
    if (axis == 0) return {t.dim(1), t.dim(0), t.dim(1), 1};
    if (axis == 1) return {t.dim(0), t.dim(1), 1, t.dim(1)};
    throw std::invalid_argument("axis out of range for shape " + shape_str(t.shape()));
  }
  throw std::invalid_argument("softmax: rank > 2 unsupported, shape " + shape_str(t.shape()));
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  const LineView lv = line_view(a, axis);
  std::vector<float> out(static_cast<size_t>(a.size()));
  for (int line = 0; line < lv.count; ++line) {
    const int base = line * lv.advance;
    float mx = -std::numeric_limits<float>::infinity();
    for (int i = 0; i < lv.length; ++i) mx = std::max(mx, a.data()[base + i * lv.stride]);
    float denom = 0.0f;
    for (int i = 0; i < lv.length; ++i) {
      const float e = std::exp(a.data()[base + i * lv.stride] - mx);
      out[base + i * lv.stride] = e;
      denom += e;
    }
    for (int i = 0; i < lv.length; ++i) out[base + i * lv.stride] /= denom;
  }
  return unary_op(a, a.shape(), std::move(out), [lv](Tensor& ain, Tensor& o) {
    for (int line = 0; line < lv.count; ++line) {
      const int base = line * lv.advance;
      float dot = 0.0f;
      for (int i = 0; i < lv.length; ++i) {
        const int idx = base + i * lv.stride;
        dot += o.grad()[idx] * o.data()[idx];
      }
      for (int i = 0; i < lv.length; ++i) {
        const int idx = base + i * lv.stride;
        ain.grad()[idx] += o.data()[idx] * (o.grad()[idx] - dot);
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  constexpr float kEps = 1e-5f;
  if (x.rank() < 1) throw std::invalid_argument("layer_norm: rank-0 input");
  const int d = x.dim(x.rank() - 1);
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
    throw std::invalid_argument("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                                " do not match last dim of " + shape_str(x.shape()));
  }
  const int positions = x.size() / d;
  std::vector<float> out(static_cast<size_t>(x.size()));
  auto xhat = std::make_shared<std::vector<float>>(static_cast<size_t>(x.size()));
  auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(positions));
  for (int p = 0; p < positions; ++p) {
    const float* row = x.data() + static_cast<size_t>(p) * d;
    float mean = 0.0f;
    for (int i = 0; i < d; ++i) mean += row[i];
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (int i = 0; i < d; ++i) var += (row[i] - mean) * (row[i] - mean);
    var /= static_cast<float>(d);
    const float inv = 1.0f / std::sqrt(var + kEps);
    (*inv_std)[p] = inv;
    for (int i = 0; i < d; ++i) {
      const float xh = (row[i] - mean) * inv;
      (*xhat)[static_cast<size_t>(p) * d + i] = xh;
      out[static_cast<size_t>(p) * d + i] = xh * gain.data()[i] + bias.data()[i];
    }
  }
  const bool rec = taping({&x, &gain, &bias});
  Tensor o = rec ? Tensor::param(x.shape(), std::move(out)) : Tensor::from_data(x.shape(), std::move(out));
  if (rec) {
    Tensor xin = x, gin = gain, bin = bias;
    g_active_tape->push([xin, gin, bin, o, xhat, inv_std, positions, d]() mutable {
      for (int p = 0; p < positions; ++p) {
        const size_t base = static_cast<size_t>(p) * d;
        if (xin.requires_grad()) {
          float m1 = 0.0f, m2 = 0.0f;
          for (int i = 0; i < d; ++i) {
            const float dxh = o.grad()[base + i] * gin.data()[i];
            m1 += dxh;
            m2 += dxh * (*xhat)[base + i];
          }
          m1 /= static_cast<float>(d);
          m2 /= static_cast<float>(d);
          for (int i = 0; i < d; ++i) {
            const float dxh = o.grad()[base + i] * gin.data()[i];
            xin.grad()[base + i] += (*inv_std)[p] * (dxh - m1 - (*xhat)[base + i] * m2);
          }
        }
        if (gin.requires_grad())
          for (int i = 0; i < d; ++i) gin.grad()[i] += o.grad()[base + i] * (*xhat)[base + i];
        if (bin.requires_grad())
          for (int i = 0; i < d; ++i) bin.grad()[i] += o.grad()[base + i];
      }
    });
  }
  return o;
}

Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  if (x.rank() != 2 || kernel.rank() != 3) {
    throw std::invalid_argument("conv1d: expected x rank 2 and kernel rank 3, got " + shape_str(x.shape()) + " and " +
                                shape_str(kernel.shape()));
  }
  const int len = x.dim(0), din = x.dim(1);
  const int w = kernel.dim(0), kin = kernel.dim(1), dout = kernel.dim(2);
  if (w % 2 == 0) throw std::invalid_argument("conv1d: kernel width must be odd, got " + std::to_string(w));
  if (kin != din) {
    throw std::invalid_argument("conv1d: kernel input dim " + shape_str(kernel.shape()) + " does not match x " +
                                shape_str(x.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != dout) {
    throw std::invalid_argument("conv1d: bias " + shape_str(bias.shape()) + " does not match output dim " +
                                std::to_string(dout));
  }
  const int pad = (w - 1) / 2;
  std::vector<float> out(static_cast<size_t>(len) * dout);
  for (int l = 0; l < len; ++l) {
    float* orow = out.data() + static_cast<size_t>(l) * dout;
    for (int o = 0; o < dout; ++o) orow[o] = bias.data()[o];
    for (int t = 0; t < w; ++t) {
      const int s = l + t - pad;
      if (s < 0 || s >= len) continue;
      const float* xrow = x.data() + static_cast<size_t>(s) * din;
      const float* kslab = kernel.data() + static_cast<size_t>(t) * din * dout;
      for (int i = 0; i < din; ++i) {
        const float xv = xrow[i];
        const float* krow = kslab + static_cast<size_t>(i) * dout;
        for (int o = 0; o < dout; ++o) orow[o] += xv * krow[o];
      }
    }
  }
  const bool rec = taping({&x, &kernel, &bias});
  Tensor out_t = rec ? Tensor::param({len, dout}, std::move(out)) : Tensor::from_data({len, dout}, std::move(out));
  if (rec) {
    Tensor xin = x, kin_t = kernel, bin = bias;
    g_active_tape->push([xin, kin_t, bin, out_t, len, din, dout, w, pad]() mutable {
      for (int l = 0; l < len; ++l) {
        const float* grow = out_t.grad() + static_cast<size_t>(l) * dout;
        if (bin.requires_grad())
          for (int o = 0; o < dout; ++o) bin.grad()[o] += grow[o];
        for (int t = 0; t < w; ++t) {
          const int s = l + t - pad;
          if (s < 0 || s >= len) continue;
          const size_t kbase = static_cast<size_t>(t) * din * dout;
          if (xin.requires_grad()) {
            for (int i = 0; i < din; ++i) {
              float acc = 0.0f;
              const float* krow = kin_t.data() + kbase + static_cast<size_t>(i) * dout;
              for (int o = 0; o < dout; ++o) acc += grow[o] * krow[o];
              xin.grad()[static_cast<size_t>(s) * din + i] += acc;
            }
          }
          if (kin_t.requires_grad()) {
            const float* xrow = xin.data() + static_cast<size_t>(s) * din;
            for (int i = 0; i < din; ++i) {
              float* kgrow = kin_t.grad() + kbase + static_cast<size_t>(i) * dout;
              for (int o = 0; o < dout; ++o) kgrow[o] += xrow[i] * grow[o];
            }
          }
        }
      }
    });
  }
  return out_t;
}

Tensor sum_all(const Tensor& a) {
  float acc = 0.0f;
  for (int i = 0; i < a.size(); ++i) acc += a.data()[i];
  return unary_op(a, {1}, {acc}, [](Tensor& ain, Tensor& o) {
    for (int i = 0; i < ain.size(); ++i) ain.grad()[i] += o.grad()[0];
  });
}

Tensor mean_all(const Tensor& a) {
  float acc = 0.0f;
  for (int i = 0; i < a.size(); ++i) acc += a.data()[i];
  const float inv = 1.0f / static_cast<float>(a.size());
  return unary_op(a, {1}, {acc * inv}, [inv](Tensor& ain, Tensor& o) {
    for (int i = 0; i < ain.size(); ++i) ain.grad()[i] += o.grad()[0] * inv;
  });
}

Tensor logsumexp(const Tensor& a) {
  float mx = -std::numeric_limits<float>::infinity();
  for (int i = 0; i < a.size(); ++i) mx = std::max(mx, a.data()[i]);
  float s = 0.0f;
  for (int i = 0; i < a.size(); ++i) s += std::exp(a.data()[i] - mx);
  const float value = mx + std::log(s);
  return unary_op(a, {1}, {value}, [](Tensor& ain, Tensor& o) {
    const float lse = o.data()[0];
    for (int i = 0; i < ain.size(); ++i) ain.grad()[i] += o.grad()[0] * std::exp(ain.data()[i] - lse);
  });
}

Tensor reshape(const Tensor& a, std::vector<int> new_shape) {
  int n = 1;
  for (int d : new_shape) n *= d;
  if (n != a.size()) {
    throw std::invalid_argument("reshape: element count mismatch, " + shape_str(a.shape()) + " to " +
                                shape_str(new_shape));
  }
  std::vector<float> out(a.vec());
  return unary_op(a, std::move(new_shape), std::move(out), [](Tensor& ain, Tensor& o) {
    for (int i = 0; i < o.size(); ++i) ain.grad()[i] += o.grad()[i];
  });
}

namespace {

int row_stride(const Tensor& a) { return a.rank() == 1 ? 1 : a.size() / a.dim(0); }

std::vector<int> rows_shape(const Tensor& a, int count) {
  std::vector<int> s = a.shape();
  s[0] = count;
  return s;
}

}  // namespace

Tensor slice_rows(const Tensor& a, int start, int count) {
  if (start < 0 || count <= 0 || start + count > a.dim(0)) {
    throw std::invalid_argument("slice_rows: range [" + std::to_string(start) + "," + std::to_string(start + count) +
                                ") out of bounds for shape " + shape_str(a.shape()));
  }
  const int stride = row_stride(a);
  std::vector<float> out(a.data() + static_cast<size_t>(start) * stride,
                         a.data() + static_cast<size_t>(start + count) * stride);
  return unary_op(a, rows_shape(a, count), std::move(out), [start, stride](Tensor& ain, Tensor& o) {
    for (int i = 0; i < o.size(); ++i) ain.grad()[static_cast<size_t>(start) * stride + i] += o.grad()[i];
  });
}

Tensor slice_cols(const Tensor& a, int start, int count) {
  if (a.rank() != 2) throw std::invalid_argument("slice_cols: expected rank 2, got " + shape_str(a.shape()));
  const int rows = a.dim(0), cols = a.dim(1);
  if (start < 0 || count <= 0 || start + count > cols) {
    throw std::invalid_argument("slice_cols: range [" + std::to_string(start) + "," + std::to_string(start + count) +
                                ") out of bounds for shape " + shape_str(a.shape()));
  }
  std::vector<float> out(static_cast<size_t>(rows) * count);
  for (int r = 0; r < rows; ++r)
    std::memcpy(out.data() + static_cast<size_t>(r) * count, a.data() + static_cast<size_t>(r) * cols + start,
                sizeof(float) * static_cast<size_t>(count));
  return unary_op(a, {rows, count}, std::move(out), [start, rows, cols, count](Tensor& ain, Tensor& o) {
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < count; ++c)
        ain.grad()[static_cast<size_t>(r) * cols + start + c] += o.grad()[static_cast<size_t>(r) * count + c];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const int stride = row_stride(parts[0]);
  int total = 0;
  for (const Tensor& p : parts) {
    if (row_stride(p) != stride || p.rank() != parts[0].rank()) {
      throw std::invalid_argument("concat_rows: trailing dims mismatch, " + shape_str(parts[0].shape()) + " vs " +
                                  shape_str(p.shape()));
    }
    total += p.dim(0);
  }
  std::vector<float> out;
  out.reserve(static_cast<size_t>(total) * stride);
  for (const Tensor& p : parts) out.insert(out.end(), p.vec().begin(), p.vec().end());

  bool rec = false;
  if (g_active_tape) {
    for (const Tensor& p : parts)
      if (p.requires_grad()) rec = true;
  }
  Tensor o = rec ? Tensor::param(rows_shape(parts[0], total), std::move(out))
                 : Tensor::from_data(rows_shape(parts[0], total), std::move(out));
  if (rec) {
    std::vector<Tensor> ins = parts;
    g_active_tape->push([ins, o]() mutable {
      int offset = 0;
      for (Tensor& p : ins) {
        if (p.requires_grad())
          for (int i = 0; i < p.size(); ++i) p.grad()[i] += o.grad()[offset + i];
        offset += p.size();
      }
    });
  }
  return o;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const int rows = parts[0].dim(0);
  int total_cols = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows) {
      throw std::invalid_argument("concat_cols: row count mismatch, " + shape_str(parts[0].shape()) + " vs " +
                                  shape_str(p.shape()));
    }
    total_cols += p.dim(1);
  }
  std::vector<float> out(static_cast<size_t>(rows) * total_cols);
  int offset = 0;
  for (const Tensor& p : parts) {
    const int pc = p.dim(1);
    for (int r = 0; r < rows; ++r)
      std::memcpy(out.data() + static_cast<size_t>(r) * total_cols + offset,
                  p.data() + static_cast<size_t>(r) * pc, sizeof(float) * static_cast<size_t>(pc));
    offset += pc;
  }
  bool rec = false;
  if (g_active_tape) {
    for (const Tensor& p : parts)
      if (p.requires_grad()) rec = true;
  }
  Tensor o = rec ? Tensor::param({rows, total_cols}, std::move(out))
                 : Tensor::from_data({rows, total_cols}, std::move(out));
  if (rec) {
    std::vector<Tensor> ins = parts;
    g_active_tape->push([ins, o, rows, total_cols]() mutable {
      int off = 0;
      for (Tensor& p : ins) {
        const int pc = p.dim(1);
        if (p.requires_grad())
          for (int r = 0; r < rows; ++r)
            for (int c = 0; c < pc; ++c)
              p.grad()[static_cast<size_t>(r) * pc + c] += o.grad()[static_cast<size_t>(r) * total_cols + off + c];
        off += pc;
      }
    });
  }
  return o;
}

Tensor cosine_similarity_t(const Tensor& u, const Tensor& v, float eps) {
  check_same_shape(u, v, "cosine_similarity");
  double dot = 0.0, nu2 = 0.0, nv2 = 0.0;
  for (int i = 0; i < u.size(); ++i) {
    dot += static_cast<double>(u.data()[i]) * v.data()[i];
    nu2 += static_cast<double>(u.data()[i]) * u.data()[i];
    nv2 += static_cast<double>(v.data()[i]) * v.data()[i];
  }
  if (eps <= 0.0f && (nu2 == 0.0 || nv2 == 0.0)) {
    throw std::invalid_argument("cosine_similarity: zero-norm vector");
  }
  const double nu = std::sqrt(nu2 + eps), nv = std::sqrt(nv2 + eps);
  const float c = static_cast<float>(dot / (nu * nv));
  return binary_op(u, v, {1}, {c}, [nu, nv, c](Tensor& uin, Tensor& vin, Tensor& o) {
    const float g = o.grad()[0];
    const float inv_nunv = static_cast<float>(1.0 / (nu * nv));
    const float inv_nu2 = static_cast<float>(1.0 / (nu * nu));
    const float inv_nv2 = static_cast<float>(1.0 / (nv * nv));
    for (int i = 0; i < uin.size(); ++i) {
      if (uin.requires_grad()) uin.grad()[i] += g * (vin.data()[i] * inv_nunv - c * uin.data()[i] * inv_nu2);
      if (vin.requires_grad()) vin.grad()[i] += g * (uin.data()[i] * inv_nunv - c * vin.data()[i] * inv_nv2);
    }
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& wo, int n_heads,
                 const std::vector<uint8_t>* mask) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw std::invalid_argument("attention: q/k/v must be rank 2");
  }
  const int lq = q.dim(0), d = q.dim(1), lk = k.dim(0);
  if (k.dim(1) != d || v.dim(1) != d || v.dim(0) != lk) {
    throw std::invalid_argument("attention: incompatible shapes q" + shape_str(q.shape()) + " k" +
                                shape_str(k.shape()) + " v" + shape_str(v.shape()));
  }
  if (n_heads <= 0 || d % n_heads != 0) {
    throw std::invalid_argument("attention: dim " + std::to_string(d) + " not divisible by heads " +
                                std::to_string(n_heads));
  }
  Tensor mask_add;
  if (mask) {
    if (static_cast<int>(mask->size()) != lq * lk) {
      throw std::invalid_argument("attention: mask size " + std::to_string(mask->size()) + " != " +
                                  std::to_string(lq * lk));
    }
    std::vector<float> m(static_cast<size_t>(lq) * lk, 0.0f);
    for (int r = 0; r < lq; ++r) {
      bool any = false;
      for (int c = 0; c < lk; ++c) {
        if ((*mask)[static_cast<size_t>(r) * lk + c]) any = true;
        else m[static_cast<size_t>(r) * lk + c] = -1e30f;
      }
      if (!any) throw std::invalid_argument("attention: query row " + std::to_string(r) + " is fully masked");
    }
    mask_add = Tensor::from_data({lq, lk}, std::move(m));
  }
  const int dh = d / n_heads;
  const float sc = 1.0f / std::sqrt(static_cast<float>(dh));
  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor scores = scale(matmul(qh, kh, false, true), sc);
    if (mask) scores = add(scores, mask_add);
    Tensor weights = softmax(scores, 1);
    head_outs.push_back(matmul(weights, vh));
  }
  Tensor merged = n_heads == 1 ? head_outs[0] : concat_cols(head_outs);
  return matmul(merged, wo);
}

}  // namespace cva
