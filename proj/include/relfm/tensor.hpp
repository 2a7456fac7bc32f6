#pragma once

// Dense row-major tensors with a reverse-mode tape, the Adam optimizer and the
// RFMP parameter checkpoint format. Only the operations the models use exist;
// broadcasting is limited to adding a bias row.
//
// Scalar type is a template parameter: float for training, double for
// gradient checking.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "relfm/binio.hpp"
#include "relfm/error.hpp"
#include "relfm/rng.hpp"

namespace relfm::tensor {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out + "]";
}

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Shared handle to a value buffer and its (lazily allocated) gradient.
/// Copies alias; use clone() for a deep copy.
template <typename T>
class Tensor {
  struct Storage {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
  };

 public:
  using value_type = T;

  Tensor() : s_(std::make_shared<Storage>()) {}
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) : s_(std::make_shared<Storage>()) {
    if (shape_size(shape) != values.size())
      throw Error("tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    s_->shape = std::move(shape);
    s_->value = std::move(values);
    s_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values, bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(values), requires_grad);
  }
  static Tensor vector(std::vector<T> values, bool requires_grad = false) {
    auto n = values.size();
    return Tensor({n}, std::move(values), requires_grad);
  }

  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t size() const { return s_->value.size(); }
  /// Matrix view: rank-2 as is, rank-1 as a single row, rank-0 as 1x1.
  std::size_t rows() const { return rank() == 2 ? s_->shape[0] : 1; }
  std::size_t cols() const { return rank() == 2 ? s_->shape[1] : (rank() == 1 ? s_->shape[0] : 1); }

  std::span<T> data() { return s_->value; }
  std::span<const T> data() const { return s_->value; }
  T item() const {
    if (size() != 1) throw Error("tensor: item() on tensor of shape " + shape_str(shape()));
    return s_->value[0];
  }
  T& operator()(std::size_t r, std::size_t c) { return s_->value[r * cols() + c]; }
  T operator()(std::size_t r, std::size_t c) const { return s_->value[r * cols() + c]; }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on) { s_->requires_grad = on; }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const T> grad() const { return s_->grad; }
  // Handles share storage, so gradient buffers are writable through const handles.
  std::span<T> grad_mut() const {
    if (s_->grad.empty()) s_->grad.assign(s_->value.size(), T(0));
    return s_->grad;
  }
  void zero_grad() { std::fill(s_->grad.begin(), s_->grad.end(), T(0)); }

  Tensor clone() const { return Tensor(s_->shape, s_->value, s_->requires_grad); }
  bool same_as(const Tensor& o) const { return s_ == o.s_; }

 private:
  std::shared_ptr<Storage> s_;
};

/// Row index groups in CSR form: group g covers index[offsets[g]..offsets[g+1]).
struct RowGroups {
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> index;

  std::size_t size() const { return offsets.size() - 1; }
  void add(std::span<const std::size_t> rows) {
    index.insert(index.end(), rows.begin(), rows.end());
    offsets.push_back(index.size());
  }
};

/// Records operations in execution order; backward() replays the local
/// gradient rules in reverse, once.
template <typename T>
class Tape {
 public:
  using Tn = Tensor<T>;

  std::size_t size() const { return ops_.size(); }
  void reset() {
    ops_.clear();
    consumed_ = false;
  }

  Tn constant(Shape shape, std::vector<T> values) { return Tn(std::move(shape), std::move(values), false); }

  /// [n x k] . [k x m]
  Tn matmul(const Tn& a, const Tn& b) {
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    if (b.rows() != k || a.rank() != 2 || b.rank() != 2)
      throw Error("matmul: shape mismatch " + shape_str(a.shape()) + " . " + shape_str(b.shape()));
    Tn out = make({n, m}, {&a, &b});
    gemm(a.data().data(), b.data().data(), out.data().data(), n, k, m);
    if (out.requires_grad())
      record([a, b, out, n, k, m]() mutable {
        if (!out.has_grad()) return;
        const T* g = out.grad().data();
        if (a.requires_grad()) {
          T* ga = a.grad_mut().data();
          const T* bv = b.data().data();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              T s = 0;
              const T* gi = g + i * m;
              const T* bp = bv + p * m;
              for (std::size_t j = 0; j < m; ++j) s += gi[j] * bp[j];
              ga[i * k + p] += s;
            }
        }
        if (b.requires_grad()) {
          T* gb = b.grad_mut().data();
          const T* av = a.data().data();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const T aip = av[i * k + p];
              if (aip == T(0)) continue;
              T* gbp = gb + p * m;
              const T* gi = g + i * m;
              for (std::size_t j = 0; j < m; ++j) gbp[j] += aip * gi[j];
            }
        }
      });
    return out;
  }

  /// x [n x m] + bias [m], broadcast over rows.
  Tn add_bias(const Tn& x, const Tn& bias) {
    const std::size_t n = x.rows(), m = x.cols();
    if (bias.size() != m || x.rank() != 2)
      throw Error("add_bias: shape mismatch " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
    Tn out = make({n, m}, {&x, &bias});
    auto o = out.data();
    auto xv = x.data();
    auto bv = bias.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) o[i * m + j] = xv[i * m + j] + bv[j];
    if (out.requires_grad())
      record([x, bias, out, n, m]() mutable {
        if (!out.has_grad()) return;
        auto g = out.grad();
        if (x.requires_grad()) {
          auto gx = x.grad_mut();
          for (std::size_t i = 0; i < n * m; ++i) gx[i] += g[i];
        }
        if (bias.requires_grad()) {
          auto gb = bias.grad_mut();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
        }
      });
    return out;
  }

  /// y = x W + bias
  Tn linear(const Tn& x, const Tn& w, const Tn& bias) {
    if (x.cols() != w.rows()) throw Error("linear: inner dimension mismatch " + shape_str(x.shape()) + " . " + shape_str(w.shape()));
    if (bias.size() != w.cols()) throw Error("linear: bias size mismatch");
    return add_bias(matmul(x, w), bias);
  }

  Tn add(const Tn& a, const Tn& b) {
    if (a.shape() != b.shape()) throw Error("add: shape mismatch " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
    Tn out = make(a.shape(), {&a, &b});
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] + b.data()[i];
    if (out.requires_grad())
      record([a, b, out]() mutable {
        if (!out.has_grad()) return;
        auto g = out.grad();
        for (const Tn* t : {&a, &b})
          if (t->requires_grad()) {
            auto gt = t->grad_mut();
            for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
          }
      });
    return out;
  }

  /// Gradient at exactly 0 is 0.
  Tn relu(const Tn& x) {
    Tn out = make(x.shape(), {&x});
    auto o = out.data();
    auto xv = x.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] > T(0) ? xv[i] : T(0);
    if (out.requires_grad())
      record([x, out]() mutable {
        if (!out.has_grad()) return;
        auto g = out.grad();
        auto gx = x.grad_mut();
        auto xv = x.data();
        for (std::size_t i = 0; i < g.size(); ++i)
          if (xv[i] > T(0)) gx[i] += g[i];
      });
    return out;
  }

  /// Inverted dropout: survivors are scaled by 1/keep. Identity unless training.
  Tn dropout(const Tn& x, double keep, Rng& rng, bool training) {
    if (!(keep > 0.0 && keep <= 1.0)) throw Error("dropout: keep probability must be in (0, 1]");
    if (!training || keep == 1.0) return x;
    std::vector<T> scale(x.size());
    std::bernoulli_distribution coin(keep);
    for (auto& s : scale) s = coin(rng) ? T(1.0 / keep) : T(0);
    Tn out = make(x.shape(), {&x});
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x.data()[i] * scale[i];
    if (out.requires_grad())
      record([x, out, scale = std::move(scale)]() mutable {
        if (!out.has_grad()) return;
        auto g = out.grad();
        auto gx = x.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * scale[i];
      });
    return out;
  }

  /// Row g of the result is the mean of x's rows listed in group g.
  Tn mean_rows(const Tn& x, const RowGroups& groups) {
    const std::size_t d = x.cols(), n = groups.size();
    for (std::size_t g = 0; g < n; ++g)
      if (groups.offsets[g + 1] == groups.offsets[g]) throw Error("mean_rows: empty row set");
    for (auto r : groups.index)
      if (r >= x.rows()) throw Error("mean_rows: row index out of range");
    Tn out = make({n, d}, {&x});
    T* o = out.data().data();
    const T* xv = x.data().data();
    for (std::size_t g = 0; g < n; ++g) {
      const std::size_t b = groups.offsets[g], e = groups.offsets[g + 1];
      const T inv = T(1) / static_cast<T>(e - b);
      T* og = o + g * d;
      for (std::size_t k = b; k < e; ++k) {
        const T* xr = xv + groups.index[k] * d;
        for (std::size_t j = 0; j < d; ++j) og[j] += xr[j];
      }
      for (std::size_t j = 0; j < d; ++j) og[j] *= inv;
    }
    if (out.requires_grad())
      record([x, out, groups, n, d]() mutable {
        if (!out.has_grad()) return;
        const T* g = out.grad().data();
        T* gx = x.grad_mut().data();
        for (std::size_t gi = 0; gi < n; ++gi) {
          const std::size_t b = groups.offsets[gi], e = groups.offsets[gi + 1];
          const T inv = T(1) / static_cast<T>(e - b);
          for (std::size_t k = b; k < e; ++k) {
            T* gr = gx + groups.index[k] * d;
            for (std::size_t j = 0; j < d; ++j) gr[j] += g[gi * d + j] * inv;
          }
        }
      });
    return out;
  }

  Tn gather_rows(const Tn& x, std::vector<std::size_t> idx) {
    const std::size_t d = x.cols();
    for (auto r : idx)
      if (r >= x.rows()) throw Error("gather_rows: row index out of range");
    Tn out = make({idx.size(), d}, {&x});
    auto o = out.data();
    auto xv = x.data();
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d, o.begin() + static_cast<std::ptrdiff_t>(i * d));
    if (out.requires_grad())
      record([x, out, idx = std::move(idx), d]() mutable {
        if (!out.has_grad()) return;
        auto g = out.grad();
        auto gx = x.grad_mut();
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t j = 0; j < d; ++j) gx[idx[i] * d + j] += g[i * d + j];
      });
    return out;
  }

  Tn concat_rows(std::vector<Tn> parts) {
    if (parts.empty()) throw Error("concat_rows: no inputs");
    const std::size_t d = parts.front().cols();
    std::size_t n = 0;
    std::vector<const Tn*> ins;
    for (const auto& p : parts) {
      if (p.cols() != d) throw Error("concat_rows: column mismatch");
      n += p.rows();
      ins.push_back(&p);
    }
    Tn out = make({n, d}, ins);
    auto o = out.data();
    std::size_t at = 0;
    for (const auto& p : parts) {
      std::copy(p.data().begin(), p.data().end(), o.begin() + static_cast<std::ptrdiff_t>(at));
      at += p.size();
    }
    if (out.requires_grad())
      record([parts = std::move(parts), out]() mutable {
        if (!out.has_grad()) return;
        auto g = out.grad();
        std::size_t at = 0;
        for (auto& p : parts) {
          if (p.requires_grad()) {
            auto gp = p.grad_mut();
            for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[at + i];
          }
          at += p.size();
        }
      });
    return out;
  }

  /// [n x p] | [n x q] -> [n x (p+q)]
  Tn concat_cols(const Tn& a, const Tn& b) {
    const std::size_t n = a.rows(), p = a.cols(), q = b.cols();
    if (b.rows() != n) throw Error("concat_cols: row count mismatch");
    Tn out = make({n, p + q}, {&a, &b});
    auto o = out.data();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < p; ++j) o[i * (p + q) + j] = a.data()[i * p + j];
      for (std::size_t j = 0; j < q; ++j) o[i * (p + q) + p + j] = b.data()[i * q + j];
    }
    if (out.requires_grad())
      record([a, b, out, n, p, q]() mutable {
        if (!out.has_grad()) return;
        auto g = out.grad();
        if (a.requires_grad()) {
          auto ga = a.grad_mut();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < p; ++j) ga[i * p + j] += g[i * (p + q) + j];
        }
        if (b.requires_grad()) {
          auto gb = b.grad_mut();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < q; ++j) gb[i * q + j] += g[i * (p + q) + p + j];
        }
      });
    return out;
  }

  Tn sum(const Tn& x) {
    Tn out = make({}, {&x});
    T s = 0;
    for (T v : x.data()) s += v;
    out.data()[0] = s;
    if (out.requires_grad())
      record([x, out]() mutable {
        if (!out.has_grad()) return;
        T g = out.grad()[0];
        for (auto& gx : x.grad_mut()) gx += g;
      });
    return out;
  }

  /// wa * a + wb * b for scalars a, b.
  Tn weighted_sum(const Tn& a, double wa, const Tn& b, double wb) {
    if (a.size() != 1 || b.size() != 1) throw Error("weighted_sum: scalar inputs required");
    Tn out = make({}, {&a, &b});
    out.data()[0] = T(wa) * a.item() + T(wb) * b.item();
    if (out.requires_grad())
      record([a, b, out, wa, wb]() mutable {
        if (!out.has_grad()) return;
        T g = out.grad()[0];
        if (a.requires_grad()) a.grad_mut()[0] += T(wa) * g;
        if (b.requires_grad()) b.grad_mut()[0] += T(wb) * g;
      });
    return out;
  }

  /// Mean over rows of -log softmax(logits)[label].
  Tn softmax_cross_entropy(const Tn& logits, std::vector<int> labels) {
    const std::size_t n = logits.rows(), k = logits.cols();
    if (labels.size() != n || n == 0) throw Error("softmax_cross_entropy: label count mismatch");
    std::vector<T> prob(n * k);
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) throw Error("softmax_cross_entropy: label out of range");
      const T* l = logits.data().data() + i * k;
      T mx = *std::max_element(l, l + k);
      T z = 0;
      for (std::size_t j = 0; j < k; ++j) z += std::exp(l[j] - mx);
      for (std::size_t j = 0; j < k; ++j) prob[i * k + j] = std::exp(l[j] - mx) / z;
      total += -(l[labels[i]] - mx - std::log(z));
    }
    Tn out = make({}, {&logits});
    out.data()[0] = total / static_cast<T>(n);
    if (out.requires_grad())
      record([logits, out, prob = std::move(prob), labels = std::move(labels), n, k]() mutable {
        if (!out.has_grad()) return;
        T g = out.grad()[0] / static_cast<T>(n);
        auto gl = logits.grad_mut();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < k; ++j)
            gl[i * k + j] += g * (prob[i * k + j] - (static_cast<int>(j) == labels[i] ? T(1) : T(0)));
      });
    return out;
  }

  /// Mean over rows with a non-empty mask of (1 - cos(pred_M, target_M; eps))^gamma,
  /// where cos = a.b / (|a||b| + eps). `mask` is row-major, nonzero = masked.
  Tn scaled_cosine_loss(const Tn& pred, const Tn& target, std::vector<std::uint8_t> mask, double gamma, double eps) {
    const std::size_t n = pred.rows(), d = pred.cols();
    check_loss_inputs(pred, target, mask, "scaled_cosine_loss");
    if (gamma < 1.0) throw Error("scaled_cosine_loss: gamma must be >= 1");
    const T* a = pred.data().data();
    const T* b = target.data().data();
    std::vector<T> coef(n, T(0)), dotv(n, T(0)), na(n, T(0)), nb(n, T(0)), den(n, T(0));
    std::size_t count = 0;
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      bool any = false;
      T dot = 0, aa = 0, bb = 0;
      for (std::size_t j = 0; j < d; ++j)
        if (mask[i * d + j]) {
          any = true;
          dot += a[i * d + j] * b[i * d + j];
          aa += a[i * d + j] * a[i * d + j];
          bb += b[i * d + j] * b[i * d + j];
        }
      if (!any) continue;
      ++count;
      na[i] = std::sqrt(aa);
      nb[i] = std::sqrt(bb);
      den[i] = na[i] * nb[i] + T(eps);
      dotv[i] = dot;
      T c = dot / den[i];
      T one_minus = T(1) - c;
      total += std::pow(one_minus, T(gamma));
      // d/dc of (1-c)^gamma
      coef[i] = -T(gamma) * std::pow(one_minus, T(gamma - 1.0));
    }
    if (count == 0) throw Error("no masked dimensions");
    Tn out = make({}, {&pred, &target});
    out.data()[0] = total / static_cast<T>(count);
    if (out.requires_grad())
      record([pred, target, out, mask = std::move(mask), coef = std::move(coef), dotv = std::move(dotv),
              na = std::move(na), nb = std::move(nb), den = std::move(den), n, d, count]() mutable {
        if (!out.has_grad()) return;
        const T g = out.grad()[0] / static_cast<T>(count);
        const T* a = pred.data().data();
        const T* b = target.data().data();
        T* ga = pred.requires_grad() ? pred.grad_mut().data() : nullptr;
        T* gb = target.requires_grad() ? target.grad_mut().data() : nullptr;
        for (std::size_t i = 0; i < n; ++i) {
          if (coef[i] == T(0) && den[i] == T(0)) continue;
          const T dd = den[i];
          const T s = g * coef[i];
          // dc/da = b/D - dot * |b| * a / (|a| D^2), second term dropped at |a| = 0
          const T ka = na[i] > T(0) ? dotv[i] * nb[i] / (na[i] * dd * dd) : T(0);
          const T kb = nb[i] > T(0) ? dotv[i] * na[i] / (nb[i] * dd * dd) : T(0);
          for (std::size_t j = 0; j < d; ++j) {
            if (!mask[i * d + j]) continue;
            const std::size_t at = i * d + j;
            if (ga) ga[at] += s * (b[at] / dd - ka * a[at]);
            if (gb) gb[at] += s * (a[at] / dd - kb * b[at]);
          }
        }
      });
    return out;
  }

  /// Mean over rows with a non-empty mask of the masked squared L2 error.
  Tn masked_mse_loss(const Tn& pred, const Tn& target, std::vector<std::uint8_t> mask) {
    const std::size_t n = pred.rows(), d = pred.cols();
    check_loss_inputs(pred, target, mask, "masked_mse_loss");
    std::size_t count = 0;
    T total = 0;
    const T* a = pred.data().data();
    const T* b = target.data().data();
    for (std::size_t i = 0; i < n; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < d; ++j)
        if (mask[i * d + j]) {
          any = true;
          T diff = a[i * d + j] - b[i * d + j];
          total += diff * diff;
        }
      count += any;
    }
    if (count == 0) throw Error("no masked dimensions");
    Tn out = make({}, {&pred, &target});
    out.data()[0] = total / static_cast<T>(count);
    if (out.requires_grad())
      record([pred, target, out, mask = std::move(mask), count]() mutable {
        if (!out.has_grad()) return;
        const T g = T(2) * out.grad()[0] / static_cast<T>(count);
        const T* a = pred.data().data();
        const T* b = target.data().data();
        T* ga = pred.requires_grad() ? pred.grad_mut().data() : nullptr;
        T* gb = target.requires_grad() ? target.grad_mut().data() : nullptr;
        for (std::size_t i = 0; i < mask.size(); ++i)
          if (mask[i]) {
            if (ga) ga[i] += g * (a[i] - b[i]);
            if (gb) gb[i] -= g * (a[i] - b[i]);
          }
      });
    return out;
  }

  /// Accumulates d(loss)/d(x) into every requires_grad tensor reachable on this tape.
  void backward(const Tn& loss) {
    if (loss.size() != 1) throw Error("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    if (consumed_) throw Error("backward: tape already consumed; reset() before recording again");
    consumed_ = true;
    if (!loss.requires_grad()) return;
    Tn l = loss;
    l.grad_mut()[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

 private:
  Tn make(Shape shape, std::initializer_list<const Tn*> inputs) {
    return make(std::move(shape), std::vector<const Tn*>(inputs));
  }
  Tn make(Shape shape, const std::vector<const Tn*>& inputs) {
    bool rg = false;
    for (auto* t : inputs) rg |= t->requires_grad();
    return Tn::zeros(std::move(shape), rg);
  }
  void record(std::function<void()> fn) {
    if (consumed_) throw Error("tape: recording after backward; reset() first");
    ops_.push_back(std::move(fn));
  }
  static void check_loss_inputs(const Tn& pred, const Tn& target, const std::vector<std::uint8_t>& mask,
                                const char* what) {
    if (pred.shape() != target.shape())
      throw Error(std::string(what) + ": shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    if (mask.size() != pred.size()) throw Error(std::string(what) + ": mask size mismatch");
  }
  static void gemm(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
      T* ci = c + i * m;
      for (std::size_t p = 0; p < k; ++p) {
        const T aip = a[i * k + p];
        if (aip == T(0)) continue;
        const T* bp = b + p * m;
        for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
      }
    }
  }

  std::vector<std::function<void()>> ops_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  /// One bias-corrected update from the accumulated gradients. Parameters
  /// that received no gradient are treated as having a zero gradient.
  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (m_[i].size() != p.size()) throw Error("adam: parameter shape changed");
      auto val = p.data();
      auto g = p.grad();
      for (std::size_t j = 0; j < val.size(); ++j) {
        const double gj = g.empty() ? 0.0 : static_cast<double>(g[j]);
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * gj;
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * gj * gj;
        const double mhat = m_[i][j] / c1;
        const double vhat = v_[i][j] / c2;
        val[j] = static_cast<T>(static_cast<double>(val[j]) - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t steps() const { return t_; }
  std::span<const double> first_moment(std::size_t i) const { return m_[i]; }
  std::span<const double> second_moment(std::size_t i) const { return v_[i]; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// RFMP checkpoints

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;

  friend bool operator==(const NamedArray&, const NamedArray&) = default;
};

template <typename T>
NamedArray to_named(std::string name, const Tensor<T>& t) {
  NamedArray a{std::move(name), t.shape(), {}};
  a.values.reserve(t.size());
  for (T v : t.data()) a.values.push_back(static_cast<float>(v));
  return a;
}

template <typename T>
Tensor<T> from_named(const NamedArray& a, bool requires_grad = false) {
  std::vector<T> vals(a.values.begin(), a.values.end());
  return Tensor<T>(a.shape, std::move(vals), requires_grad);
}

inline std::string encode_checkpoint(const std::vector<NamedArray>& entries) {
  binio::Writer w;
  w.put_bytes("RFMP");
  w.put<std::uint8_t>(1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (shape_size(e.shape) != e.values.size()) throw Error("checkpoint entry '" + e.name + "' has inconsistent shape");
    w.put_str16(e.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.shape.size()));
    for (auto x : e.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(x));
    for (float v : e.values) w.put_f32(v);
  }
  return w.bytes();
}

inline void write_checkpoint(const std::vector<NamedArray>& entries, const std::filesystem::path& path) {
  binio::Writer w;
  w.put_bytes(encode_checkpoint(entries));
  w.save(path);
}

inline std::vector<NamedArray> decode_checkpoint(std::string bytes) {
  binio::Reader r(std::move(bytes));
  if (r.get_bytes(4) != "RFMP") throw Error("RFMP: magic mismatch");
  if (r.get<std::uint8_t>() != 1) throw Error("RFMP: unsupported version");
  auto n = r.get<std::uint32_t>();
  std::vector<NamedArray> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    NamedArray a;
    a.name = r.get_str16();
    auto rank = r.get<std::uint8_t>();
    for (std::uint8_t k = 0; k < rank; ++k) a.shape.push_back(r.get<std::uint32_t>());
    auto count = shape_size(a.shape);
    if (count > r.remaining() / 4) throw Error("unexpected end of file");
    a.values.resize(count);
    for (auto& v : a.values) v = r.get_f32();
    out.push_back(std::move(a));
  }
  if (!r.at_end()) throw Error("RFMP: trailing bytes after last entry");
  return out;
}

inline std::vector<NamedArray> read_checkpoint(const std::filesystem::path& path) {
  auto r = binio::Reader::from_file(path);
  return decode_checkpoint(r.get_bytes(r.remaining()));
}

}  // namespace relfm::tensor
