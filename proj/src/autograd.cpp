// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

#include "autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <unordered_set>

#include "error.hpp"

CMIVLD_NS_BEGIN

namespace {

using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap as_mat(const Tensor& t) {
  return ConstMatMap(t.data.data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}

MatMap as_mat(Tensor& t) {
  return MatMap(t.data.data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

bool wants_grad(const Var& v) { return v && v->requires_grad; }

void check_same_shape(const Var& a, const Var& b, const char* op) {
  require(a->value.shape == b->value.shape, ErrorCode::kInvalidInput,
          std::string(op) + ": shape mismatch");
}

template <typename F>
Var unary(const Var& a, Tensor out, F&& local_grad) {
  return ag::make_result(std::move(out), {a}, [local_grad](Node& self) {
    Node& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    auto& g = pa.grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      g.data[i] += self.grad.data[i] * local_grad(pa.value.data[i], self.value.data[i]);
    }
  });
}

}  // namespace

namespace ag {

Var param(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  const bool any = std::any_of(parents.begin(), parents.end(), wants_grad);
  if (any) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

void backward(const Var& root) {
  require(root != nullptr && root->value.numel() == 1, ErrorCode::kInvalidInput,
          "backward requires a scalar root");
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->is_leaf()) n->zero_grad();
  }
  root->grad_buffer().data[0] += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->is_leaf() || !n->has_grad()) continue;
    n->backward_fn(*n);
  }
  // Release intermediate buffers; leaves keep their accumulated gradients.
  for (Node* n : order) {
    if (!n->is_leaf()) n->zero_grad();
  }
}

Var matmul(const Var& a, const Var& b) { return linear(a, b, nullptr); }

Var linear(const Var& x, const Var& weight, const Var& bias) {
  const Tensor& xv = x->value;
  const Tensor& wv = weight->value;
  require(wv.rank() == 2 && xv.cols() == wv.dim(0), ErrorCode::kInvalidInput,
          "linear: inner dimensions differ");
  std::vector<std::size_t> shape = xv.shape;
  if (shape.empty()) shape = {1};
  shape.back() = wv.dim(1);
  Tensor out(shape);
  auto om = as_mat(out);
  om.noalias() = as_mat(xv) * as_mat(wv);
  if (bias) {
    require(bias->value.numel() == wv.dim(1), ErrorCode::kInvalidInput,
            "linear: bias width mismatch");
    const auto bm = ConstMatMap(bias->value.data.data(), 1, om.cols());
    om.rowwise() += bm.row(0);
  }
  std::vector<Var> parents{x, weight};
  if (bias) parents.push_back(bias);
  return make_result(std::move(out), std::move(parents), [](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    const auto gm = as_mat(std::as_const(self.grad));
    if (px.requires_grad) {
      as_mat(px.grad_buffer()).noalias() += gm * as_mat(std::as_const(pw.value)).transpose();
    }
    if (pw.requires_grad) {
      as_mat(pw.grad_buffer()).noalias() += as_mat(std::as_const(px.value)).transpose() * gm;
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      Tensor& gb = self.parents[2]->grad_buffer();
      MatMap bm(gb.data.data(), 1, gm.cols());
      bm.row(0) += gm.colwise().sum();
    }
  });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += b->value.data[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      auto& g = p.grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += self.grad.data[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= b->value.data[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      const Scalar sign = k == 0 ? Scalar(1) : Scalar(-1);
      auto& g = p.grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += sign * self.grad.data[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= b->value.data[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      const Tensor& other = self.parents[1 - k]->value;
      auto& g = p.grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += self.grad.data[i] * other.data[i];
    }
  });
}

Var scale(const Var& a, Scalar s) {
  Tensor out = a->value;
  for (auto& v : out.data) v *= s;
  return unary(a, std::move(out), [s](Scalar, Scalar) { return s; });
}

Var add_scalar(const Var& a, Scalar s) {
  Tensor out = a->value;
  for (auto& v : out.data) v += s;
  return unary(a, std::move(out), [](Scalar, Scalar) { return Scalar(1); });
}

Var abs(const Var& a) {
  Tensor out = a->value;
  for (auto& v : out.data) v = std::abs(v);
  return unary(a, std::move(out), [](Scalar x, Scalar) {
    return x > 0 ? Scalar(1) : (x < 0 ? Scalar(-1) : Scalar(0));
  });
}

Var tanh(const Var& a) {
  Tensor out = a->value;
  for (auto& v : out.data) v = std::tanh(v);
  return unary(a, std::move(out), [](Scalar, Scalar y) { return Scalar(1) - y * y; });
}

Var gelu(const Var& a) {
  // tanh approximation
  constexpr Scalar kC = Scalar(0.7978845608028654);  // sqrt(2/pi)
  constexpr Scalar kA = Scalar(0.044715);
  Tensor out = a->value;
  for (auto& v : out.data) {
    const Scalar x = v;
    v = Scalar(0.5) * x * (Scalar(1) + std::tanh(kC * (x + kA * x * x * x)));
  }
  return unary(a, std::move(out), [](Scalar x, Scalar) {
    const Scalar u = kC * (x + kA * x * x * x);
    const Scalar t = std::tanh(u);
    const Scalar du = kC * (Scalar(1) + Scalar(3) * kA * x * x);
    return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * x * (Scalar(1) - t * t) * du;
  });
}

Var log_clamped(const Var& a, Scalar floor) {
  Tensor out = a->value;
  for (auto& v : out.data) v = std::log(std::max(v, floor));
  return unary(a, std::move(out),
               [floor](Scalar x, Scalar) { return x > floor ? Scalar(1) / x : Scalar(0); });
}

Var softmax_rows(const Var& a) {
  Tensor out = softmax(a->value, a->value.rank() - 1);
  return make_result(std::move(out), {a}, [](Node& self) {
    Node& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    auto& g = pa.grad_buffer();
    const std::size_t cols = self.value.cols();
    for (std::size_t r = 0; r < self.value.rows(); ++r) {
      const Scalar* y = self.value.data.data() + r * cols;
      const Scalar* dy = self.grad.data.data() + r * cols;
      Scalar dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += dy[c] * y[c];
      Scalar* dx = g.data.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) dx[c] += y[c] * (dy[c] - dot);
    }
  });
}

Var log_softmax_rows(const Var& a) {
  Tensor out = log_softmax(a->value);
  return make_result(std::move(out), {a}, [](Node& self) {
    Node& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    auto& g = pa.grad_buffer();
    const std::size_t cols = self.value.cols();
    for (std::size_t r = 0; r < self.value.rows(); ++r) {
      const Scalar* y = self.value.data.data() + r * cols;
      const Scalar* dy = self.grad.data.data() + r * cols;
      Scalar total = 0;
      for (std::size_t c = 0; c < cols; ++c) total += dy[c];
      Scalar* dx = g.data.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) dx[c] += dy[c] - std::exp(y[c]) * total;
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, Scalar eps) {
  const Tensor& xv = x->value;
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  require(gain->value.numel() == cols && bias->value.numel() == cols, ErrorCode::kInvalidInput,
          "layer_norm: parameter width mismatch");
  Tensor out(xv.shape);
  auto xhat = std::make_shared<std::vector<Scalar>>(xv.numel());
  auto inv_std = std::make_shared<std::vector<Scalar>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* in = xv.data.data() + r * cols;
    Scalar mu = 0;
    for (std::size_t c = 0; c < cols; ++c) mu += in[c];
    mu /= static_cast<Scalar>(cols);
    Scalar var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<Scalar>(cols);
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < cols; ++c) {
      const Scalar h = (in[c] - mu) * is;
      (*xhat)[r * cols + c] = h;
      out.data[r * cols + c] = h * gain->value.data[c] + bias->value.data[c];
    }
  }
  return make_result(std::move(out), {x, gain, bias}, [xhat, inv_std, rows, cols](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    const Scalar* gv = pg.value.data.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const Scalar* dy = self.grad.data.data() + r * cols;
      const Scalar* h = xhat->data() + r * cols;
      if (pg.requires_grad) {
        auto& gg = pg.grad_buffer();
        for (std::size_t c = 0; c < cols; ++c) gg.data[c] += dy[c] * h[c];
      }
      if (pb.requires_grad) {
        auto& gb = pb.grad_buffer();
        for (std::size_t c = 0; c < cols; ++c) gb.data[c] += dy[c];
      }
      if (px.requires_grad) {
        Scalar mean_dh = 0;
        Scalar mean_dh_h = 0;
        for (std::size_t c = 0; c < cols; ++c) {
          const Scalar dh = dy[c] * gv[c];
          mean_dh += dh;
          mean_dh_h += dh * h[c];
        }
        mean_dh /= static_cast<Scalar>(cols);
        mean_dh_h /= static_cast<Scalar>(cols);
        Scalar* dx = px.grad_buffer().data.data() + r * cols;
        const Scalar is = (*inv_std)[r];
        for (std::size_t c = 0; c < cols; ++c) {
          dx[c] += is * (dy[c] * gv[c] - mean_dh - h[c] * mean_dh_h);
        }
      }
    }
  });
}

Var sum(const Var& a) {
  Scalar total = 0;
  for (auto v : a->value.data) total += v;
  return make_result(Tensor::scalar(total), {a}, [](Node& self) {
    Node& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    const Scalar g0 = self.grad.data[0];
    for (auto& g : pa.grad_buffer().data) g += g0;
  });
}

Var mean(const Var& a) {
  const auto n = static_cast<Scalar>(a->value.numel());
  return scale(sum(a), Scalar(1) / n);
}

Var embedding(const Var& table, std::span<const int> ids) {
  const Tensor& tv = table->value;
  const std::size_t width = tv.cols();
  const std::size_t vocab = tv.rows();
  Tensor out({ids.size(), width});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < vocab, ErrorCode::kInvalidInput,
            "embedding: token id " + std::to_string(ids[i]) + " out of vocabulary");
    std::copy_n(tv.data.data() + static_cast<std::size_t>(ids[i]) * width, width,
                out.data.data() + i * width);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return make_result(std::move(out), {table}, [idx = std::move(idx), width](Node& self) {
    Node& pt = *self.parents[0];
    if (!pt.requires_grad) return;
    auto& g = pt.grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      Scalar* dst = g.data.data() + static_cast<std::size_t>(idx[i]) * width;
      const Scalar* src = self.grad.data.data() + i * width;
      for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
    }
  });
}

Var concat(const std::vector<Var>& parts) {
  require(!parts.empty(), ErrorCode::kInvalidInput, "concat: no inputs");
  std::vector<std::size_t> trailing(parts[0]->value.shape.begin() + 1,
                                    parts[0]->value.shape.end());
  std::size_t lead = 0;
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p->value.rank() >= 1 &&
                std::equal(trailing.begin(), trailing.end(), p->value.shape.begin() + 1,
                           p->value.shape.end()),
            ErrorCode::kInvalidInput, "concat: trailing shape mismatch");
    lead += p->value.shape[0];
    offsets.push_back(total);
    total += p->value.numel();
  }
  std::vector<std::size_t> shape{lead};
  shape.insert(shape.end(), trailing.begin(), trailing.end());
  Tensor out(shape);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    std::copy(parts[k]->value.data.begin(), parts[k]->value.data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(offsets[k]));
  }
  return make_result(std::move(out), parts, [offsets](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      auto& g = p.grad_buffer();
      const Scalar* src = self.grad.data.data() + offsets[k];
      for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += src[i];
    }
  });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  const Tensor& av = a->value;
  require(av.rank() >= 1 && begin <= end && end <= av.shape[0], ErrorCode::kIndex,
          "slice_rows: range out of bounds");
  const std::size_t stride = av.shape[0] == 0 ? 0 : av.numel() / av.shape[0];
  std::vector<std::size_t> shape = av.shape;
  shape[0] = end - begin;
  Tensor out(shape);
  std::copy_n(av.data.data() + begin * stride, (end - begin) * stride, out.data.data());
  return make_result(std::move(out), {a}, [begin, stride](Node& self) {
    Node& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    Scalar* dst = pa.grad_buffer().data.data() + begin * stride;
    for (std::size_t i = 0; i < self.grad.numel(); ++i) dst[i] += self.grad.data[i];
  });
}

Var remove_rows(const Var& a, std::span<const std::size_t> rows) {
  const Tensor& av = a->value;
  const std::size_t stride = av.shape[0] == 0 ? 0 : av.numel() / av.shape[0];
  std::vector<bool> drop(av.shape[0], false);
  for (auto r : rows) {
    require(r < av.shape[0], ErrorCode::kIndex, "remove_rows: row out of bounds");
    drop[r] = true;
  }
  std::vector<std::size_t> kept;
  for (std::size_t r = 0; r < av.shape[0]; ++r) {
    if (!drop[r]) kept.push_back(r);
  }
  std::vector<std::size_t> shape = av.shape;
  shape[0] = kept.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < kept.size(); ++i) {
    std::copy_n(av.data.data() + kept[i] * stride, stride, out.data.data() + i * stride);
  }
  return make_result(std::move(out), {a}, [kept, stride](Node& self) {
    Node& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    auto& g = pa.grad_buffer();
    for (std::size_t i = 0; i < kept.size(); ++i) {
      for (std::size_t c = 0; c < stride; ++c) {
        g.data[kept[i] * stride + c] += self.grad.data[i * stride + c];
      }
    }
  });
}

Var column(const Var& a, std::size_t c) {
  const Tensor& av = a->value;
  require(av.rank() == 2 && c < av.cols(), ErrorCode::kIndex, "column: index out of bounds");
  const std::size_t rows = av.rows();
  const std::size_t cols = av.cols();
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) out.data[r] = av.data[r * cols + c];
  return make_result(std::move(out), {a}, [c, cols](Node& self) {
    Node& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    auto& g = pa.grad_buffer();
    for (std::size_t r = 0; r < self.grad.numel(); ++r) g.data[r * cols + c] += self.grad.data[r];
  });
}

Var pick(const Var& a, std::span<const int> targets) {
  const Tensor& av = a->value;
  require(av.rows() == targets.size(), ErrorCode::kInvalidInput, "pick: row/target mismatch");
  const std::size_t cols = av.cols();
  Tensor out({targets.size()});
  for (std::size_t r = 0; r < targets.size(); ++r) {
    require(targets[r] >= 0 && static_cast<std::size_t>(targets[r]) < cols,
            ErrorCode::kInvalidInput, "pick: target out of range");
    out.data[r] = av.data[r * cols + static_cast<std::size_t>(targets[r])];
  }
  std::vector<int> tg(targets.begin(), targets.end());
  return make_result(std::move(out), {a}, [tg = std::move(tg), cols](Node& self) {
    Node& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    auto& g = pa.grad_buffer();
    for (std::size_t r = 0; r < tg.size(); ++r) {
      g.data[r * cols + static_cast<std::size_t>(tg[r])] += self.grad.data[r];
    }
  });
}

Var element(const Var& a, std::size_t index) {
  require(index < a->value.numel(), ErrorCode::kIndex, "element: index out of bounds");
  return make_result(Tensor::scalar(a->value.data[index]), {a}, [index](Node& self) {
    Node& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.grad_buffer().data[index] += self.grad.data[0];
  });
}

Var attention_probs(const Var& q, const Var& k, const Var& column_bias, std::size_t n_heads,
                    bool causal) {
  const Tensor& qv = q->value;
  const Tensor& kv = k->value;
  require(qv.rank() == 2 && qv.shape == kv.shape, ErrorCode::kInvalidInput,
          "attention_probs: q/k shape mismatch");
  const std::size_t n = qv.rows();
  const std::size_t width = qv.cols();
  require(n_heads > 0 && width % n_heads == 0, ErrorCode::kInvalidInput,
          "attention_probs: width not divisible by heads");
  const std::size_t dk = width / n_heads;
  if (column_bias) {
    require(column_bias->value.numel() == n, ErrorCode::kInvalidInput,
            "attention_probs: bias length mismatch");
  }
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dk));
  Tensor out({n_heads, n, n});
  std::vector<Scalar> row(n);
  for (std::size_t h = 0; h < n_heads; ++h) {
    for (std::size_t p = 0; p < n; ++p) {
      const std::size_t limit = causal ? p + 1 : n;
      const Scalar* qp = qv.data.data() + p * width + h * dk;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (std::size_t j = 0; j < limit; ++j) {
        const Scalar* kj = kv.data.data() + j * width + h * dk;
        Scalar s = 0;
        for (std::size_t d = 0; d < dk; ++d) s += qp[d] * kj[d];
        s *= inv_sqrt;
        if (column_bias) s += column_bias->value.data[j];
        row[j] = s;
        mx = std::max(mx, s);
      }
      Scalar total = 0;
      for (std::size_t j = 0; j < limit; ++j) {
        row[j] = std::exp(row[j] - mx);
        total += row[j];
      }
      Scalar* dst = out.data.data() + (h * n + p) * n;
      for (std::size_t j = 0; j < limit; ++j) dst[j] = row[j] / total;
    }
  }
  std::vector<Var> parents{q, k};
  if (column_bias) parents.push_back(column_bias);
  return make_result(
      std::move(out), std::move(parents), [n, n_heads, dk, width, inv_sqrt, causal](Node& self) {
        Node& pq = *self.parents[0];
        Node& pk = *self.parents[1];
        Node* pb = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
        Scalar* gq = pq.requires_grad ? pq.grad_buffer().data.data() : nullptr;
        Scalar* gk = pk.requires_grad ? pk.grad_buffer().data.data() : nullptr;
        Scalar* gb = (pb && pb->requires_grad) ? pb->grad_buffer().data.data() : nullptr;
        std::vector<Scalar> ds(n);
        for (std::size_t h = 0; h < n_heads; ++h) {
          for (std::size_t p = 0; p < n; ++p) {
            const std::size_t limit = causal ? p + 1 : n;
            const Scalar* y = self.value.data.data() + (h * n + p) * n;
            const Scalar* dy = self.grad.data.data() + (h * n + p) * n;
            Scalar dot = 0;
            for (std::size_t j = 0; j < limit; ++j) dot += dy[j] * y[j];
            for (std::size_t j = 0; j < limit; ++j) ds[j] = y[j] * (dy[j] - dot);
            if (gb) {
              for (std::size_t j = 0; j < limit; ++j) gb[j] += ds[j];
            }
            const Scalar* qp = pq.value.data.data() + p * width + h * dk;
            for (std::size_t j = 0; j < limit; ++j) {
              const Scalar w = ds[j] * inv_sqrt;
              if (w == Scalar(0)) continue;
              const Scalar* kj = pk.value.data.data() + j * width + h * dk;
              if (gq) {
                Scalar* dq = gq + p * width + h * dk;
                for (std::size_t d = 0; d < dk; ++d) dq[d] += w * kj[d];
              }
              if (gk) {
                Scalar* dkj = gk + j * width + h * dk;
                for (std::size_t d = 0; d < dk; ++d) dkj[d] += w * qp[d];
              }
            }
          }
        }
      });
}

Var attention_apply(const Var& probs, const Var& v, std::size_t n_heads) {
  const Tensor& pv = probs->value;
  const Tensor& vv = v->value;
  const std::size_t n = vv.rows();
  const std::size_t width = vv.cols();
  require(pv.rank() == 3 && pv.shape[0] == n_heads && pv.shape[1] == n && pv.shape[2] == n,
          ErrorCode::kInvalidInput, "attention_apply: probability shape mismatch");
  const std::size_t dk = width / n_heads;
  Tensor out({n, width});
  for (std::size_t h = 0; h < n_heads; ++h) {
    const auto ph = ConstMatMap(pv.data.data() + h * n * n, static_cast<Eigen::Index>(n),
                                static_cast<Eigen::Index>(n));
    for (std::size_t p = 0; p < n; ++p) {
      Scalar* dst = out.data.data() + p * width + h * dk;
      for (std::size_t j = 0; j < n; ++j) {
        const Scalar w = ph(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(j));
        if (w == Scalar(0)) continue;
        const Scalar* src = vv.data.data() + j * width + h * dk;
        for (std::size_t d = 0; d < dk; ++d) dst[d] += w * src[d];
      }
    }
  }
  return make_result(std::move(out), {probs, v}, [n, n_heads, dk, width](Node& self) {
    Node& pp = *self.parents[0];
    Node& pvn = *self.parents[1];
    Scalar* gp = pp.requires_grad ? pp.grad_buffer().data.data() : nullptr;
    Scalar* gv = pvn.requires_grad ? pvn.grad_buffer().data.data() : nullptr;
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t p = 0; p < n; ++p) {
        const Scalar* dout = self.grad.data.data() + p * width + h * dk;
        for (std::size_t j = 0; j < n; ++j) {
          const Scalar* vj = pvn.value.data.data() + j * width + h * dk;
          if (gp) {
            Scalar s = 0;
            for (std::size_t d = 0; d < dk; ++d) s += dout[d] * vj[d];
            gp[(h * n + p) * n + j] += s;
          }
          if (gv) {
            const Scalar w = pp.value.data[(h * n + p) * n + j];
            if (w == Scalar(0)) continue;
            Scalar* dv = gv + j * width + h * dk;
            for (std::size_t d = 0; d < dk; ++d) dv[d] += w * dout[d];
          }
        }
      }
    }
  });
}

Tensor gumbel_noise(const std::vector<std::size_t>& shape, Rng& rng) {
  Tensor g(shape);
  for (auto& v : g.data) v = static_cast<Scalar>(rng.gumbel());
  return g;
}

Var gumbel_softmax(const Var& logits, const Tensor& noise, Scalar tau) {
  require(tau > 0, ErrorCode::kInvalidConfig, "gumbel_softmax: tau must be positive");
  require(noise.shape == logits->value.shape, ErrorCode::kInvalidInput,
          "gumbel_softmax: noise shape mismatch");
  return softmax_rows(scale(add(logits, constant(noise)), Scalar(1) / tau));
}

Var gumbel_softmax(const Var& logits, Scalar tau, Rng& rng) {
  require(tau > 0, ErrorCode::kInvalidConfig, "gumbel_softmax: tau must be positive");
  return gumbel_softmax(logits, gumbel_noise(logits->value.shape, rng), tau);
}

}  // namespace ag

double gradcheck(const std::function<Var()>& f, const std::vector<Var>& params, double h) {
  for (const auto& p : params) p->zero_grad();
  Var root = f();
  ag::backward(root);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) {
    analytic.push_back(p->has_grad() ? p->grad : Tensor(p->value.shape));
  }

  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& value = params[k]->value;
    for (std::size_t i = 0; i < value.numel(); ++i) {
      const Scalar saved = value.data[i];
      value.data[i] = static_cast<Scalar>(saved + h);
      const double up = static_cast<double>(f()->value.data[0]);
      value.data[i] = static_cast<Scalar>(saved - h);
      const double down = static_cast<double>(f()->value.data[0]);
      value.data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = static_cast<double>(analytic[k].data[i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  for (const auto& p : params) p->zero_grad();
  return worst;
}

double gradcheck_norm(const std::function<Var()>& f, const std::vector<Var>& params, double h) {
  for (const auto& p : params) p->zero_grad();
  Var root = f();
  ag::backward(root);
  double worst = 0.0;
  for (const auto& p : params) {
    const Tensor analytic = p->has_grad() ? p->grad : Tensor(p->value.shape);
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      const Scalar saved = p->value.data[i];
      p->value.data[i] = static_cast<Scalar>(saved + h);
      const double up = static_cast<double>(f()->value.data[0]);
      p->value.data[i] = static_cast<Scalar>(saved - h);
      const double down = static_cast<double>(f()->value.data[0]);
      p->value.data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = static_cast<double>(analytic.data[i]);
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-8});
    worst = std::max(worst, std::sqrt(diff2) / denom);
  }
  for (const auto& p : params) p->zero_grad();
  return worst;
}

CMIVLD_NS_END
