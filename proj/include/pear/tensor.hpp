#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pear/errors.hpp"

// Dense tensor with reverse-mode automatic differentiation.
//
// Values are flat row-major arrays wrapped by Eigen maps; all matrix work is
// delegated to Eigen. Operations are free functions that record a backward
// rule on a thread-local tape whenever gradient flow is required. A pass of
// backward() replays the tape in reverse once; leaf gradients accumulate
// across passes until zero_grad().

namespace pear {

using Index = Eigen::Index;

template <typename Scalar>
using MatrixR = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

inline std::string shape_string(const std::vector<Index>& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

}  // namespace detail

template <typename Scalar>
struct TensorStorageT {
  std::vector<Index> shape;
  std::vector<Scalar> data;
  std::vector<Scalar> grad;    // empty until a gradient is first accumulated
  bool requires_grad = false;  // leaf parameter flag
  bool track = false;          // true when gradient flows through this value

  Index numel() const { return static_cast<Index>(data.size()); }

  Index rows() const {
    if (shape.size() == 2) return shape[0];
    if (shape.size() == 1) return 1;
    throw shape_error("rows(): tensor is not 1D/2D, shape " + detail::shape_string(shape));
  }
  Index cols() const {
    if (shape.size() == 2) return shape[1];
    if (shape.size() == 1) return shape[0];
    throw shape_error("cols(): tensor is not 1D/2D, shape " + detail::shape_string(shape));
  }

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), Scalar(0));
  }

  Eigen::Map<MatrixR<Scalar>> mat() { return {data.data(), rows(), cols()}; }
  Eigen::Map<const MatrixR<Scalar>> mat() const { return {data.data(), rows(), cols()}; }
  Eigen::Map<MatrixR<Scalar>> gmat() { return {grad.data(), rows(), cols()}; }
  Eigen::Map<const MatrixR<Scalar>> gmat() const { return {grad.data(), rows(), cols()}; }
};

template <typename Scalar>
class TensorT {
 public:
  using Storage = TensorStorageT<Scalar>;

  TensorT() : s_(std::make_shared<Storage>()) {}

  explicit TensorT(std::vector<Index> shape, Scalar fill = Scalar(0), bool requires_grad = false)
      : s_(std::make_shared<Storage>()) {
    Index n = 1;
    for (Index d : shape) {
      if (d <= 0) throw shape_error("tensor dimensions must be positive, got " + detail::shape_string(shape));
      n *= d;
    }
    s_->shape = std::move(shape);
    s_->data.assign(static_cast<size_t>(n), fill);
    s_->requires_grad = requires_grad;
    s_->track = requires_grad;
  }

  TensorT(std::vector<Index> shape, std::vector<Scalar> data, bool requires_grad = false)
      : s_(std::make_shared<Storage>()) {
    Index n = 1;
    for (Index d : shape) {
      if (d <= 0) throw shape_error("tensor dimensions must be positive, got " + detail::shape_string(shape));
      n *= d;
    }
    if (n != static_cast<Index>(data.size()))
      throw shape_error("data length " + std::to_string(data.size()) + " does not match shape " +
                        detail::shape_string(shape));
    s_->shape = std::move(shape);
    s_->data = std::move(data);
    s_->requires_grad = requires_grad;
    s_->track = requires_grad;
  }

  static TensorT scalar(Scalar v) { return TensorT({1}, std::vector<Scalar>{v}); }

  const std::vector<Index>& shape() const { return s_->shape; }
  std::string shape_str() const { return detail::shape_string(s_->shape); }
  Index ndim() const { return static_cast<Index>(s_->shape.size()); }
  Index numel() const { return s_->numel(); }
  Index rows() const { return s_->rows(); }
  Index cols() const { return s_->cols(); }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool rg) {
    s_->requires_grad = rg;
    s_->track = rg;
  }
  bool tracked() const { return s_->track; }

  std::vector<Scalar>& data() { return s_->data; }
  const std::vector<Scalar>& data() const { return s_->data; }
  bool has_grad() const { return !s_->grad.empty(); }
  std::vector<Scalar>& grad() { return s_->grad; }
  const std::vector<Scalar>& grad() const { return s_->grad; }

  Scalar value() const {
    if (numel() != 1) throw shape_error("value(): tensor is not scalar, shape " + shape_str());
    return s_->data[0];
  }

  Scalar& at(Index i, Index j) { return s_->data[static_cast<size_t>(i * cols() + j)]; }
  Scalar at(Index i, Index j) const { return s_->data[static_cast<size_t>(i * cols() + j)]; }

  Eigen::Map<MatrixR<Scalar>> mat() { return s_->mat(); }
  Eigen::Map<const MatrixR<Scalar>> mat() const { return std::as_const(*s_).mat(); }

  // Deep copy of values; gradient state is not copied.
  TensorT copy(bool requires_grad = false) const {
    TensorT out(s_->shape, s_->data, requires_grad);
    return out;
  }

  std::shared_ptr<Storage> storage() const { return s_; }
  bool same_storage(const TensorT& other) const { return s_ == other.s_; }

 private:
  std::shared_ptr<Storage> s_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <typename Scalar>
class TapeT {
 public:
  using StoragePtr = std::shared_ptr<TensorStorageT<Scalar>>;

  struct Node {
    StoragePtr output;
    std::function<void()> backprop;
  };

  // Nodes are appended in forward execution order, so inputs always precede
  // the node that consumes them.
  void record(StoragePtr output, std::function<void()> backprop) {
    output->track = true;
    nodes_.push_back(Node{std::move(output), std::move(backprop)});
  }

  size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear() { nodes_.clear(); }
  const std::vector<Node>& nodes() const { return nodes_; }

 private:
  std::vector<Node> nodes_;
};

// Active tape for this thread. Each thread records and replays its own graph.
template <typename Scalar>
TapeT<Scalar>& tape() {
  thread_local TapeT<Scalar> t;
  return t;
}

inline bool& autograd_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

// Suspends tape recording on this thread (evaluation passes).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(autograd_enabled()) { autograd_enabled() = false; }
  ~NoGradGuard() { autograd_enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {

template <typename Scalar>
bool recording(const TensorT<Scalar>& a) {
  return autograd_enabled() && a.tracked();
}
template <typename Scalar>
bool recording(const TensorT<Scalar>& a, const TensorT<Scalar>& b) {
  return autograd_enabled() && (a.tracked() || b.tracked());
}
template <typename Scalar>
bool recording(const TensorT<Scalar>& a, const TensorT<Scalar>& b, const TensorT<Scalar>& c) {
  return autograd_enabled() && (a.tracked() || b.tracked() || c.tracked());
}

}  // namespace detail

// Runs one reverse pass over the active tape. Gradients of leaf tensors
// (op inputs that are not op outputs) accumulate across successive calls;
// gradients of op outputs are rebuilt from scratch each pass.
template <typename Scalar>
void backward(const TensorT<Scalar>& loss) {
  auto& tp = tape<Scalar>();
  if (loss.numel() != 1)
    throw usage_error("backward: loss must be scalar, got shape " + loss.shape_str());
  if (tp.empty()) throw usage_error("backward: tape is empty, nothing was recorded");

  for (auto& node : tp.nodes()) {
    node.output->grad.assign(node.output->data.size(), Scalar(0));
  }
  loss.storage()->ensure_grad();
  loss.storage()->grad[0] = Scalar(1);

  const auto& nodes = tp.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    it->backprop();
  }
}

template <typename Scalar>
void zero_grad(const std::vector<TensorT<Scalar>>& params) {
  for (const auto& p : params) {
    auto s = p.storage();
    if (!s->grad.empty()) std::fill(s->grad.begin(), s->grad.end(), Scalar(0));
  }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace detail {

template <typename Scalar>
void require_2d(const TensorT<Scalar>& t, const char* op) {
  if (t.ndim() != 2) throw shape_error(std::string(op) + ": expected 2D tensor, got shape " + t.shape_str());
}

}  // namespace detail

template <typename Scalar>
TensorT<Scalar> matmul(const TensorT<Scalar>& a, const TensorT<Scalar>& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  if (a.cols() != b.rows())
    throw shape_error("matmul: inner dimensions differ, " + a.shape_str() + " vs " + b.shape_str());

  TensorT<Scalar> out({a.rows(), b.cols()});
  out.mat().noalias() = a.mat() * b.mat();

  if (detail::recording(a, b)) {
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    tape<Scalar>().record(so, [sa, sb, so] {
      auto g = so->gmat();
      if (sa->track) {
        sa->ensure_grad();
        sa->gmat().noalias() += g * sb->mat().transpose();
      }
      if (sb->track) {
        sb->ensure_grad();
        sb->gmat().noalias() += sa->mat().transpose() * g;
      }
    });
  }
  return out;
}

// Elementwise sum. The second operand may be a row vector ([c] or [1 x c])
// broadcast across the rows of a 2D first operand.
template <typename Scalar>
TensorT<Scalar> add(const TensorT<Scalar>& a, const TensorT<Scalar>& b) {
  const bool same = a.shape() == b.shape();
  const bool row_bcast = !same && a.ndim() == 2 && b.ndim() <= 2 && b.rows() == 1 && b.cols() == a.cols();
  if (!same && !row_bcast)
    throw shape_error("add: incompatible shapes " + a.shape_str() + " and " + b.shape_str());

  TensorT<Scalar> out(a.shape());
  auto& od = out.data();
  const auto& ad = a.data();
  const auto& bd = b.data();
  if (same) {
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
  } else {
    const size_t c = static_cast<size_t>(a.cols());
    for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i % c];
  }

  if (detail::recording(a, b)) {
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    tape<Scalar>().record(so, [sa, sb, so, same] {
      const auto& g = so->grad;
      if (sa->track) {
        sa->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) sa->grad[i] += g[i];
      }
      if (sb->track) {
        sb->ensure_grad();
        if (same) {
          for (size_t i = 0; i < g.size(); ++i) sb->grad[i] += g[i];
        } else {
          const size_t c = sb->grad.size();
          for (size_t i = 0; i < g.size(); ++i) sb->grad[i % c] += g[i];
        }
      }
    });
  }
  return out;
}

template <typename Scalar>
TensorT<Scalar> mul(const TensorT<Scalar>& a, const TensorT<Scalar>& b) {
  if (a.shape() != b.shape())
    throw shape_error("mul: shape mismatch " + a.shape_str() + " vs " + b.shape_str());

  TensorT<Scalar> out(a.shape());
  auto& od = out.data();
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i];

  if (detail::recording(a, b)) {
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    tape<Scalar>().record(so, [sa, sb, so] {
      const auto& g = so->grad;
      if (sa->track) {
        sa->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) sa->grad[i] += g[i] * sb->data[i];
      }
      if (sb->track) {
        sb->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) sb->grad[i] += g[i] * sa->data[i];
      }
    });
  }
  return out;
}

template <typename Scalar>
TensorT<Scalar> scale(const TensorT<Scalar>& a, Scalar c) {
  TensorT<Scalar> out(a.shape());
  auto& od = out.data();
  const auto& ad = a.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * c;

  if (detail::recording(a)) {
    auto sa = a.storage();
    auto so = out.storage();
    tape<Scalar>().record(so, [sa, so, c] {
      sa->ensure_grad();
      const auto& g = so->grad;
      for (size_t i = 0; i < g.size(); ++i) sa->grad[i] += g[i] * c;
    });
  }
  return out;
}

template <typename Scalar>
TensorT<Scalar> relu(const TensorT<Scalar>& a) {
  TensorT<Scalar> out(a.shape());
  auto& od = out.data();
  const auto& ad = a.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] > Scalar(0) ? ad[i] : Scalar(0);

  if (detail::recording(a)) {
    auto sa = a.storage();
    auto so = out.storage();
    tape<Scalar>().record(so, [sa, so] {
      sa->ensure_grad();
      const auto& g = so->grad;
      for (size_t i = 0; i < g.size(); ++i)
        if (sa->data[i] > Scalar(0)) sa->grad[i] += g[i];
    });
  }
  return out;
}

// Exact gaussian-error-function gelu.
template <typename Scalar>
TensorT<Scalar> gelu(const TensorT<Scalar>& a) {
  static const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
  static const Scalar inv_sqrt2pi = Scalar(1) / std::sqrt(Scalar(2) * Scalar(M_PI));

  TensorT<Scalar> out(a.shape());
  auto& od = out.data();
  const auto& ad = a.data();
  std::vector<Scalar> cdf(od.size());
  for (size_t i = 0; i < od.size(); ++i) {
    cdf[i] = Scalar(0.5) * (Scalar(1) + std::erf(ad[i] * inv_sqrt2));
    od[i] = ad[i] * cdf[i];
  }

  if (detail::recording(a)) {
    auto sa = a.storage();
    auto so = out.storage();
    tape<Scalar>().record(so, [sa, so, cdf = std::move(cdf)] {
      sa->ensure_grad();
      const auto& g = so->grad;
      for (size_t i = 0; i < g.size(); ++i) {
        const Scalar x = sa->data[i];
        const Scalar pdf = std::exp(Scalar(-0.5) * x * x) * inv_sqrt2pi;
        sa->grad[i] += g[i] * (cdf[i] + x * pdf);
      }
    });
  }
  return out;
}

// Row-wise layer normalization over the last dimension of a 2D tensor.
// gain and bias are length-c vectors.
template <typename Scalar>
TensorT<Scalar> layer_norm(const TensorT<Scalar>& a, const TensorT<Scalar>& gain,
                           const TensorT<Scalar>& bias, Scalar eps) {
  detail::require_2d(a, "layer_norm");
  if (eps <= Scalar(0)) throw usage_error("layer_norm: eps must be positive");
  const Index r = a.rows(), c = a.cols();
  if (gain.numel() != c || bias.numel() != c)
    throw shape_error("layer_norm: gain/bias length must match feature dim " + std::to_string(c) +
                      ", got " + gain.shape_str() + " and " + bias.shape_str());

  TensorT<Scalar> out({r, c});
  std::vector<Scalar> xhat(static_cast<size_t>(r * c));
  std::vector<Scalar> inv_std(static_cast<size_t>(r));
  const auto& ad = a.data();
  const auto& gd = gain.data();
  const auto& bd = bias.data();
  auto& od = out.data();
  for (Index i = 0; i < r; ++i) {
    const size_t off = static_cast<size_t>(i * c);
    Scalar mean = 0;
    for (Index j = 0; j < c; ++j) mean += ad[off + j];
    mean /= Scalar(c);
    Scalar var = 0;
    for (Index j = 0; j < c; ++j) {
      const Scalar d = ad[off + j] - mean;
      var += d * d;
    }
    var /= Scalar(c);
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(i)] = is;
    for (Index j = 0; j < c; ++j) {
      const Scalar xh = (ad[off + j] - mean) * is;
      xhat[off + j] = xh;
      od[off + j] = xh * gd[j] + bd[j];
    }
  }

  if (detail::recording(a, gain, bias)) {
    auto sa = a.storage(), sg = gain.storage(), sb = bias.storage(), so = out.storage();
    tape<Scalar>().record(so, [sa, sg, sb, so, xhat = std::move(xhat), inv_std = std::move(inv_std), r, c] {
      const auto& g = so->grad;
      if (sg->track) sg->ensure_grad();
      if (sb->track) sb->ensure_grad();
      if (sa->track) sa->ensure_grad();
      for (Index i = 0; i < r; ++i) {
        const size_t off = static_cast<size_t>(i * c);
        if (sg->track || sb->track) {
          for (Index j = 0; j < c; ++j) {
            if (sg->track) sg->grad[j] += g[off + j] * xhat[off + j];
            if (sb->track) sb->grad[j] += g[off + j];
          }
        }
        if (sa->track) {
          // dxhat = g * gain; dx = (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat)) * inv_std
          Scalar m1 = 0, m2 = 0;
          for (Index j = 0; j < c; ++j) {
            const Scalar dxh = g[off + j] * sg->data[j];
            m1 += dxh;
            m2 += dxh * xhat[off + j];
          }
          m1 /= Scalar(c);
          m2 /= Scalar(c);
          const Scalar is = inv_std[static_cast<size_t>(i)];
          for (Index j = 0; j < c; ++j) {
            const Scalar dxh = g[off + j] * sg->data[j];
            sa->grad[off + j] += (dxh - m1 - xhat[off + j] * m2) * is;
          }
        }
      }
    });
  }
  return out;
}

template <typename Scalar>
TensorT<Scalar> softmax_rows(const TensorT<Scalar>& a) {
  detail::require_2d(a, "softmax_rows");
  const Index r = a.rows(), c = a.cols();
  TensorT<Scalar> out({r, c});
  const auto& ad = a.data();
  auto& od = out.data();
  for (Index i = 0; i < r; ++i) {
    const size_t off = static_cast<size_t>(i * c);
    Scalar mx = ad[off];
    for (Index j = 1; j < c; ++j) mx = std::max(mx, ad[off + j]);
    Scalar sum = 0;
    for (Index j = 0; j < c; ++j) {
      const Scalar e = std::exp(ad[off + j] - mx);
      od[off + j] = e;
      sum += e;
    }
    const Scalar inv = Scalar(1) / sum;
    for (Index j = 0; j < c; ++j) od[off + j] *= inv;
  }

  if (detail::recording(a)) {
    auto sa = a.storage();
    auto so = out.storage();
    tape<Scalar>().record(so, [sa, so, r, c] {
      sa->ensure_grad();
      const auto& g = so->grad;
      const auto& p = so->data;
      for (Index i = 0; i < r; ++i) {
        const size_t off = static_cast<size_t>(i * c);
        Scalar dot = 0;
        for (Index j = 0; j < c; ++j) dot += g[off + j] * p[off + j];
        for (Index j = 0; j < c; ++j) sa->grad[off + j] += p[off + j] * (g[off + j] - dot);
      }
    });
  }
  return out;
}

// Mean negative log-likelihood over the batch. Returns a scalar tensor.
template <typename Scalar>
TensorT<Scalar> cross_entropy(const TensorT<Scalar>& logits, const std::vector<int>& labels) {
  detail::require_2d(logits, "cross_entropy");
  const Index r = logits.rows(), c = logits.cols();
  if (static_cast<Index>(labels.size()) != r)
    throw shape_error("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                      std::to_string(r));
  for (int y : labels)
    if (y < 0 || y >= c)
      throw usage_error("cross_entropy: label " + std::to_string(y) + " out of range [0, " +
                        std::to_string(c) + ")");

  const auto& zd = logits.data();
  std::vector<Scalar> probs(static_cast<size_t>(r * c));
  Scalar loss = 0;
  for (Index i = 0; i < r; ++i) {
    const size_t off = static_cast<size_t>(i * c);
    Scalar mx = zd[off];
    for (Index j = 1; j < c; ++j) mx = std::max(mx, zd[off + j]);
    Scalar sum = 0;
    for (Index j = 0; j < c; ++j) {
      const Scalar e = std::exp(zd[off + j] - mx);
      probs[off + j] = e;
      sum += e;
    }
    const Scalar inv = Scalar(1) / sum;
    for (Index j = 0; j < c; ++j) probs[off + j] *= inv;
    loss += std::log(sum) + mx - zd[off + static_cast<size_t>(labels[static_cast<size_t>(i)])];
  }
  loss /= Scalar(r);

  TensorT<Scalar> out = TensorT<Scalar>::scalar(loss);
  if (detail::recording(logits)) {
    auto sz = logits.storage();
    auto so = out.storage();
    tape<Scalar>().record(so, [sz, so, probs = std::move(probs), labels, r, c] {
      sz->ensure_grad();
      const Scalar g = so->grad[0] / Scalar(r);
      for (Index i = 0; i < r; ++i) {
        const size_t off = static_cast<size_t>(i * c);
        for (Index j = 0; j < c; ++j) {
          Scalar p = probs[off + j];
          if (j == labels[static_cast<size_t>(i)]) p -= Scalar(1);
          sz->grad[off + j] += g * p;
        }
      }
    });
  }
  return out;
}

template <typename Scalar>
TensorT<Scalar> sum(const TensorT<Scalar>& a) {
  Scalar s = 0;
  for (Scalar v : a.data()) s += v;
  TensorT<Scalar> out = TensorT<Scalar>::scalar(s);
  if (detail::recording(a)) {
    auto sa = a.storage();
    auto so = out.storage();
    tape<Scalar>().record(so, [sa, so] {
      sa->ensure_grad();
      const Scalar g = so->grad[0];
      for (auto& v : sa->grad) v += g;
    });
  }
  return out;
}

// Multi-head scaled dot-product attention over packed sequences.
// q, k, v are [batch*seq x dim]; each head attends within its sequence.
template <typename Scalar>
TensorT<Scalar> attention_core(const TensorT<Scalar>& q, const TensorT<Scalar>& k,
                               const TensorT<Scalar>& v, Index batch, Index seq, Index heads) {
  detail::require_2d(q, "attention_core");
  if (q.shape() != k.shape() || q.shape() != v.shape())
    throw shape_error("attention_core: q/k/v shapes differ: " + q.shape_str() + ", " + k.shape_str() +
                      ", " + v.shape_str());
  const Index dim = q.cols();
  if (dim % heads != 0)
    throw shape_error("attention_core: dim " + std::to_string(dim) + " not divisible by " +
                      std::to_string(heads) + " heads");
  if (q.rows() != batch * seq)
    throw shape_error("attention_core: rows " + std::to_string(q.rows()) + " != batch*seq " +
                      std::to_string(batch * seq));
  const Index hd = dim / heads;
  const Scalar alpha = Scalar(1) / std::sqrt(Scalar(hd));

  TensorT<Scalar> out({batch * seq, dim});
  // Attention probabilities, kept for the backward rule:
  // one seq x seq block per (batch, head).
  std::vector<Scalar> probs(static_cast<size_t>(batch * heads * seq * seq));

  auto qm = q.mat();
  auto km = k.mat();
  auto vm = v.mat();
  auto om = out.mat();
  MatrixR<Scalar> scores(seq, seq);
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      auto qb = qm.block(b * seq, h * hd, seq, hd);
      auto kb = km.block(b * seq, h * hd, seq, hd);
      auto vb = vm.block(b * seq, h * hd, seq, hd);
      scores.noalias() = qb * kb.transpose() * alpha;
      Eigen::Map<MatrixR<Scalar>> p(probs.data() + (b * heads + h) * seq * seq, seq, seq);
      for (Index i = 0; i < seq; ++i) {
        const Scalar mx = scores.row(i).maxCoeff();
        p.row(i) = (scores.row(i).array() - mx).exp().matrix();
        p.row(i) /= p.row(i).sum();
      }
      om.block(b * seq, h * hd, seq, hd).noalias() = p * vb;
    }
  }

  if (detail::recording(q, k, v)) {
    auto sq = q.storage(), sk = k.storage(), sv = v.storage(), so = out.storage();
    tape<Scalar>().record(so, [sq, sk, sv, so, probs = std::move(probs), batch, seq, heads, hd, alpha] {
      if (sq->track) sq->ensure_grad();
      if (sk->track) sk->ensure_grad();
      if (sv->track) sv->ensure_grad();
      auto go = so->gmat();
      MatrixR<Scalar> dp(seq, seq), ds(seq, seq);
      for (Index b = 0; b < batch; ++b) {
        for (Index h = 0; h < heads; ++h) {
          Eigen::Map<const MatrixR<Scalar>> p(probs.data() + (b * heads + h) * seq * seq, seq, seq);
          auto g = go.block(b * seq, h * hd, seq, hd);
          auto qb = sq->mat().block(b * seq, h * hd, seq, hd);
          auto kb = sk->mat().block(b * seq, h * hd, seq, hd);
          auto vb = sv->mat().block(b * seq, h * hd, seq, hd);
          if (sv->track) {
            sv->gmat().block(b * seq, h * hd, seq, hd).noalias() += p.transpose() * g;
          }
          if (sq->track || sk->track) {
            dp.noalias() = g * vb.transpose();
            for (Index i = 0; i < seq; ++i) {
              const Scalar dot = (dp.row(i).array() * p.row(i).array()).sum();
              ds.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
            }
            if (sq->track) sq->gmat().block(b * seq, h * hd, seq, hd).noalias() += ds * kb * alpha;
            if (sk->track) sk->gmat().block(b * seq, h * hd, seq, hd).noalias() += ds.transpose() * qb * alpha;
          }
        }
      }
    });
  }
  return out;
}

// Mean over each sequence's rows: [batch*seq x c] -> [batch x c].
template <typename Scalar>
TensorT<Scalar> sequence_mean(const TensorT<Scalar>& x, Index batch, Index seq) {
  detail::require_2d(x, "sequence_mean");
  if (x.rows() != batch * seq)
    throw shape_error("sequence_mean: rows " + std::to_string(x.rows()) + " != batch*seq " +
                      std::to_string(batch * seq));
  const Index c = x.cols();
  TensorT<Scalar> out({batch, c});
  const auto& xd = x.data();
  auto& od = out.data();
  const Scalar inv = Scalar(1) / Scalar(seq);
  for (Index b = 0; b < batch; ++b) {
    const size_t ooff = static_cast<size_t>(b * c);
    for (Index t = 0; t < seq; ++t) {
      const size_t xoff = static_cast<size_t>((b * seq + t) * c);
      for (Index j = 0; j < c; ++j) od[ooff + j] += xd[xoff + j];
    }
    for (Index j = 0; j < c; ++j) od[ooff + j] *= inv;
  }

  if (detail::recording(x)) {
    auto sx = x.storage();
    auto so = out.storage();
    tape<Scalar>().record(so, [sx, so, batch, seq, c, inv] {
      sx->ensure_grad();
      const auto& g = so->grad;
      for (Index b = 0; b < batch; ++b) {
        const size_t ooff = static_cast<size_t>(b * c);
        for (Index t = 0; t < seq; ++t) {
          const size_t xoff = static_cast<size_t>((b * seq + t) * c);
          for (Index j = 0; j < c; ++j) sx->grad[xoff + j] += g[ooff + j] * inv;
        }
      }
    });
  }
  return out;
}

template <typename Scalar>
bool all_finite(const TensorT<Scalar>& t) {
  for (Scalar v : t.data())
    if (!std::isfinite(v)) return false;
  for (Scalar v : t.grad())
    if (!std::isfinite(v)) return false;
  return true;
}

using Tensor = TensorT<double>;
using Tape = TapeT<double>;

}  // namespace pear
