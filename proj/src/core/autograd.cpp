#include "tscil/core/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace tscil::ag {
namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto out = std::make_shared<Node>();
  out->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || (p && p->requires_grad);
  }
  if (needs) {
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward_fn = std::move(fn);
  }
  return out;
}

void require(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(what);
}

bool wants(const Var& v) { return v && v->requires_grad; }

// col[(c*K + k), t] = x[c, t*stride - pad + k]
void im2col(const double* x, std::size_t channels, std::size_t length, std::size_t kernel,
            std::size_t stride, std::size_t pad, std::size_t out_len, double* col) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t k = 0; k < kernel; ++k) {
      double* row = col + (c * kernel + k) * out_len;
      for (std::size_t t = 0; t < out_len; ++t) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + k) -
                                   static_cast<std::ptrdiff_t>(pad);
        row[t] = (src >= 0 && src < static_cast<std::ptrdiff_t>(length)) ? x[c * length + src]
                                                                          : 0.0;
      }
    }
  }
}

void col2im_add(const double* col, std::size_t channels, std::size_t length, std::size_t kernel,
                std::size_t stride, std::size_t pad, std::size_t out_len, double* x) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t k = 0; k < kernel; ++k) {
      const double* row = col + (c * kernel + k) * out_len;
      for (std::size_t t = 0; t < out_len; ++t) {
        const std::ptrdiff_t dst = static_cast<std::ptrdiff_t>(t * stride + k) -
                                   static_cast<std::ptrdiff_t>(pad);
        if (dst >= 0 && dst < static_cast<std::ptrdiff_t>(length)) x[c * length + dst] += row[t];
      }
    }
  }
}

// Shared backward of "normalise groups then affine": given xhat, inv_std and
// dxhat for one group of size m, writes dx.
void norm_group_backward(const double* xhat, const double* dxhat, double inv_std, std::size_t m,
                         std::size_t stride, double* dx) {
  double sum_d = 0.0;
  double sum_dx = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    sum_d += dxhat[i * stride];
    sum_dx += dxhat[i * stride] * xhat[i * stride];
  }
  const double inv_m = 1.0 / static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i) {
    dx[i * stride] +=
        inv_std * (dxhat[i * stride] - inv_m * sum_d - xhat[i * stride] * inv_m * sum_dx);
  }
}

}  // namespace

Tensor& Node::grad_ref() {
  if (grad.size() != value.size()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

Var parameter(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

Var detach(const Var& x) { return constant(x->value); }

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  return make_result(std::move(value), std::move(parents), std::move(backward_fn));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root) {
  require(root->value.size() == 1, "backward: root must be a scalar");
  if (!root->requires_grad) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad_ref()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require(a->value.same_shape(b->value), "add: shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
  return make_result(std::move(out), {a, b}, [a, b](Node& self) {
    for (const Var& p : {a, b}) {
      if (!wants(p)) continue;
      auto& g = p->grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) { return add(a, scale(b, -1.0)); }

Var mul(const Var& a, const Var& b) {
  require(a->value.same_shape(b->value), "mul: shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  return make_result(std::move(out), {a, b}, [a, b](Node& self) {
    if (wants(a)) {
      auto& g = a->grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b->value[i];
    }
    if (wants(b)) {
      auto& g = b->grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a->value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (double& v : out.values()) v *= s;
  return make_result(std::move(out), {a}, [a, s](Node& self) {
    auto& g = a->grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Var square(const Var& a) {
  Tensor out = a->value;
  for (double& v : out.values()) v *= v;
  return make_result(std::move(out), {a}, [a](Node& self) {
    auto& g = a->grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * a->value[i] * self.grad[i];
  });
}

Var exp(const Var& a) {
  Tensor out = a->value;
  for (double& v : out.values()) v = std::exp(v);
  auto res = make_result(out, {a}, nullptr);
  if (res->requires_grad) {
    res->backward_fn = [a, out](Node& self) {
      auto& g = a->grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out[i] * self.grad[i];
    };
  }
  return res;
}

Var relu(const Var& a) {
  Tensor out = a->value;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return make_result(std::move(out), {a}, [a](Node& self) {
    auto& g = a->grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (a->value[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a->value.values()) s += v;
  return make_result(Tensor::scalar(s), {a}, [a](Node& self) {
    auto& g = a->grad_ref();
    const double d = self.grad[0];
    for (double& v : g.values()) v += d;
  });
}

Var mean(const Var& a) {
  require(a->value.size() > 0, "mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a->value.size()));
}

Var row_sum(const Var& a) {
  require(a->value.rank() == 2, "row_sum: expects a matrix");
  const std::size_t n = a->value.dim(0), k = a->value.dim(1);
  Tensor out({n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) out[i] += a->value.at(i, j);
  }
  return make_result(std::move(out), {a}, [a, n, k](Node& self) {
    auto& g = a->grad_ref();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) g.at(i, j) += self.grad[i];
    }
  });
}

Var reshape(const Var& a, std::vector<std::size_t> shape) {
  Tensor out = a->value.reshaped(std::move(shape));
  return make_result(std::move(out), {a}, [a](Node& self) {
    auto& g = a->grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  require(a->value.rank() == 2 && begin <= end && end <= a->value.dim(1),
          "slice_cols: bad range");
  const std::size_t n = a->value.dim(0), k = a->value.dim(1), w = end - begin;
  Tensor out({n, w});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < w; ++j) out.at(i, j) = a->value.at(i, begin + j);
  }
  return make_result(std::move(out), {a}, [a, n, k, w, begin](Node& self) {
    auto& g = a->grad_ref();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < w; ++j) g[i * k + begin + j] += self.grad[i * w + j];
    }
  });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  require(a->value.rank() >= 1 && begin <= end && end <= a->value.dim(0),
          "slice_rows: bad range");
  const std::size_t stride = a->value.size() / std::max<std::size_t>(a->value.dim(0), 1);
  auto shape = a->value.shape();
  shape[0] = end - begin;
  std::vector<double> data(a->value.data() + begin * stride, a->value.data() + end * stride);
  return make_result(Tensor(shape, std::move(data)), {a}, [a, begin, stride](Node& self) {
    auto& g = a->grad_ref();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * stride + i] += self.grad[i];
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  auto shape = parts.front()->value.shape();
  std::size_t rows = 0;
  std::vector<double> data;
  for (const auto& p : parts) {
    auto s = p->value.shape();
    require(s.size() == shape.size() && std::equal(s.begin() + 1, s.end(), shape.begin() + 1),
            "concat_rows: trailing shape mismatch");
    rows += s[0];
    data.insert(data.end(), p->value.storage().begin(), p->value.storage().end());
  }
  shape[0] = rows;
  return make_result(Tensor(shape, std::move(data)), parts, [parts](Node& self) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t n = p->value.size();
      if (wants(p)) {
        auto& g = p->grad_ref();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
      }
      offset += n;
    }
  });
}

Var gather_rows(const Var& a, std::span<const std::size_t> index) {
  const std::size_t stride = a->value.size() / std::max<std::size_t>(a->value.dim(0), 1);
  auto shape = a->value.shape();
  shape[0] = index.size();
  std::vector<double> data;
  data.reserve(index.size() * stride);
  for (std::size_t r : index) {
    require(r < a->value.dim(0), "gather_rows: index out of range");
    data.insert(data.end(), a->value.data() + r * stride, a->value.data() + (r + 1) * stride);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result(Tensor(shape, std::move(data)), {a}, [a, idx, stride](Node& self) {
    auto& g = a->grad_ref();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < stride; ++j) g[idx[i] * stride + j] += self.grad[i * stride + j];
    }
  });
}

// ---------------------------------------------------------------------------

Var linear(const Var& x, const Var& w, const Var& b) {
  require(x->value.rank() == 2 && w->value.rank() == 2 && x->value.dim(1) == w->value.dim(1),
          "linear: shape mismatch");
  const std::size_t n = x->value.dim(0), d = x->value.dim(1), o = w->value.dim(0);
  Tensor out({n, o});
  MatMap(out.data(), n, o).noalias() =
      ConstMatMap(x->value.data(), n, d) * ConstMatMap(w->value.data(), o, d).transpose();
  if (b) {
    require(b->value.size() == o, "linear: bias size");
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < o; ++j) out.at(i, j) += b->value[j];
    }
  }
  std::vector<Var> parents{x, w};
  if (b) parents.push_back(b);
  return make_result(std::move(out), parents, [x, w, b, n, d, o](Node& self) {
    ConstMatMap dy(self.grad.data(), n, o);
    if (wants(x)) {
      MatMap(x->grad_ref().data(), n, d).noalias() += dy * ConstMatMap(w->value.data(), o, d);
    }
    if (wants(w)) {
      MatMap(w->grad_ref().data(), o, d).noalias() +=
          dy.transpose() * ConstMatMap(x->value.data(), n, d);
    }
    if (wants(b)) {
      auto& g = b->grad_ref();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < o; ++j) g[j] += dy(i, j);
      }
    }
  });
}

Var conv1d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t padding) {
  require(x->value.rank() == 3 && w->value.rank() == 3, "conv1d: expects rank-3 tensors");
  const std::size_t n = x->value.dim(0), cin = x->value.dim(1), len = x->value.dim(2);
  const std::size_t cout = w->value.dim(0), k = w->value.dim(2);
  require(w->value.dim(1) == cin, "conv1d: channel mismatch");
  require(stride >= 1 && len + 2 * padding >= k, "conv1d: input shorter than kernel");
  const std::size_t lout = (len + 2 * padding - k) / stride + 1;
  const std::size_t ck = cin * k;
  Tensor out({n, cout, lout});
  std::vector<double> cols(n * ck * lout);
  ConstMatMap wm(w->value.data(), cout, ck);
  for (std::size_t s = 0; s < n; ++s) {
    double* col = cols.data() + s * ck * lout;
    im2col(x->value.data() + s * cin * len, cin, len, k, stride, padding, lout, col);
    MatMap o(out.data() + s * cout * lout, cout, lout);
    o.noalias() = wm * ConstMatMap(col, ck, lout);
    if (b) {
      for (std::size_t c = 0; c < cout; ++c) o.row(c).array() += b->value[c];
    }
  }
  std::vector<Var> parents{x, w};
  if (b) parents.push_back(b);
  auto res = make_result(std::move(out), parents, nullptr);
  if (res->requires_grad) {
    res->backward_fn = [x, w, b, n, cin, len, cout, k, lout, ck, stride, padding,
                        cols = std::move(cols)](Node& self) {
      ConstMatMap wm(w->value.data(), cout, ck);
      std::vector<double> dcol(ck * lout);
      for (std::size_t s = 0; s < n; ++s) {
        ConstMatMap dy(self.grad.data() + s * cout * lout, cout, lout);
        const double* col = cols.data() + s * ck * lout;
        if (wants(w)) {
          MatMap(w->grad_ref().data(), cout, ck).noalias() +=
              dy * ConstMatMap(col, ck, lout).transpose();
        }
        if (wants(b)) {
          auto& g = b->grad_ref();
          for (std::size_t c = 0; c < cout; ++c) g[c] += dy.row(c).sum();
        }
        if (wants(x)) {
          MatMap(dcol.data(), ck, lout).noalias() = wm.transpose() * dy;
          col2im_add(dcol.data(), cin, len, k, stride, padding, lout,
                     x->grad_ref().data() + s * cin * len);
        }
      }
    };
  }
  return res;
}

Var conv_transpose1d(const Var& x, const Var& w, const Var& b, std::size_t stride,
                     std::size_t padding, std::size_t output_padding) {
  require(x->value.rank() == 3 && w->value.rank() == 3, "conv_transpose1d: rank-3 tensors");
  const std::size_t n = x->value.dim(0), cin = x->value.dim(1), lin = x->value.dim(2);
  const std::size_t cout = w->value.dim(1), k = w->value.dim(2);
  require(w->value.dim(0) == cin, "conv_transpose1d: channel mismatch");
  const std::ptrdiff_t lout_signed = static_cast<std::ptrdiff_t>((lin - 1) * stride + k +
                                                                 output_padding) -
                                     static_cast<std::ptrdiff_t>(2 * padding);
  require(lout_signed > 0, "conv_transpose1d: empty output");
  const auto lout = static_cast<std::size_t>(lout_signed);
  const std::size_t ck = cout * k;
  Tensor out({n, cout, lout});
  ConstMatMap wm(w->value.data(), cin, ck);
  std::vector<double> col(ck * lin);
  for (std::size_t s = 0; s < n; ++s) {
    MatMap(col.data(), ck, lin).noalias() =
        wm.transpose() * ConstMatMap(x->value.data() + s * cin * lin, cin, lin);
    double* o = out.data() + s * cout * lout;
    col2im_add(col.data(), cout, lout, k, stride, padding, lin, o);
    if (b) {
      for (std::size_t c = 0; c < cout; ++c) {
        for (std::size_t t = 0; t < lout; ++t) o[c * lout + t] += b->value[c];
      }
    }
  }
  std::vector<Var> parents{x, w};
  if (b) parents.push_back(b);
  return make_result(std::move(out), parents,
                     [x, w, b, n, cin, lin, cout, k, lout, ck, stride, padding](Node& self) {
                       ConstMatMap wm(w->value.data(), cin, ck);
                       std::vector<double> dcol(ck * lin);
                       for (std::size_t s = 0; s < n; ++s) {
                         const double* dy = self.grad.data() + s * cout * lout;
                         im2col(dy, cout, lout, k, stride, padding, lin, dcol.data());
                         ConstMatMap dc(dcol.data(), ck, lin);
                         if (wants(x)) {
                           MatMap(x->grad_ref().data() + s * cin * lin, cin, lin).noalias() +=
                               wm * dc;
                         }
                         if (wants(w)) {
                           MatMap(w->grad_ref().data(), cin, ck).noalias() +=
                               ConstMatMap(x->value.data() + s * cin * lin, cin, lin) *
                               dc.transpose();
                         }
                         if (wants(b)) {
                           auto& g = b->grad_ref();
                           for (std::size_t c = 0; c < cout; ++c) {
                             for (std::size_t t = 0; t < lout; ++t) g[c] += dy[c * lout + t];
                           }
                         }
                       }
                     });
}

Var batch_norm1d(const Var& x, const Var& gamma, const Var& beta, RunningStats& stats,
                 bool training, double momentum, double eps) {
  require(x->value.rank() == 3, "batch_norm1d: expects [N x C x L]");
  const std::size_t n = x->value.dim(0), c = x->value.dim(1), len = x->value.dim(2);
  const std::size_t m = n * len;
  Tensor out(x->value.shape());
  Tensor xhat(x->value.shape());
  std::vector<double> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (training) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t t = 0; t < len; ++t) s += x->value.at(i, ch, t);
      }
      mu = s / static_cast<double>(m);
      double ss = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t t = 0; t < len; ++t) {
          const double d = x->value.at(i, ch, t) - mu;
          ss += d * d;
        }
      }
      var = ss / static_cast<double>(m);
      const double unbiased = m > 1 ? ss / static_cast<double>(m - 1) : var;
      stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * mu;
      stats.var[ch] = (1.0 - momentum) * stats.var[ch] + momentum * unbiased;
    } else {
      mu = stats.mean[ch];
      var = stats.var[ch];
    }
    inv_std[ch] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t t = 0; t < len; ++t) {
        const double h = (x->value.at(i, ch, t) - mu) * inv_std[ch];
        xhat.at(i, ch, t) = h;
        out.at(i, ch, t) = gamma->value[ch] * h + beta->value[ch];
      }
    }
  }
  return make_result(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, n, c, len, m, training, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Node& self) {
        if (wants(gamma) || wants(beta)) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            double dg = 0.0, db = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
              for (std::size_t t = 0; t < len; ++t) {
                dg += self.grad.at(i, ch, t) * xhat.at(i, ch, t);
                db += self.grad.at(i, ch, t);
              }
            }
            if (wants(gamma)) gamma->grad_ref()[ch] += dg;
            if (wants(beta)) beta->grad_ref()[ch] += db;
          }
        }
        if (!wants(x)) return;
        auto& gx = x->grad_ref();
        std::vector<double> dxhat(m), xh(m), dx(m);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double g = gamma->value[ch];
          if (!training) {
            for (std::size_t i = 0; i < n; ++i) {
              for (std::size_t t = 0; t < len; ++t) {
                gx.at(i, ch, t) += self.grad.at(i, ch, t) * g * inv_std[ch];
              }
            }
            continue;
          }
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t t = 0; t < len; ++t) {
              dxhat[i * len + t] = self.grad.at(i, ch, t) * g;
              xh[i * len + t] = xhat.at(i, ch, t);
            }
          }
          std::fill(dx.begin(), dx.end(), 0.0);
          norm_group_backward(xh.data(), dxhat.data(), inv_std[ch], m, 1, dx.data());
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t t = 0; t < len; ++t) gx.at(i, ch, t) += dx[i * len + t];
          }
        }
      });
}

Var layer_norm_cl(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require(x->value.rank() == 3, "layer_norm_cl: expects [N x C x L]");
  const std::size_t n = x->value.dim(0), c = x->value.dim(1), len = x->value.dim(2);
  const std::size_t m = c * len;
  Tensor out(x->value.shape());
  Tensor xhat(x->value.shape());
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* src = x->value.data() + i * m;
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += src[j];
    const double mu = s / static_cast<double>(m);
    double ss = 0.0;
    for (std::size_t j = 0; j < m; ++j) ss += (src[j] - mu) * (src[j] - mu);
    inv_std[i] = 1.0 / std::sqrt(ss / static_cast<double>(m) + eps);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t t = 0; t < len; ++t) {
        const double h = (src[ch * len + t] - mu) * inv_std[i];
        xhat.at(i, ch, t) = h;
        out.at(i, ch, t) = gamma->value[ch] * h + beta->value[ch];
      }
    }
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [x, gamma, beta, n, c, len, m, xhat = std::move(xhat),
                      inv_std = std::move(inv_std)](Node& self) {
                       std::vector<double> dxhat(m);
                       for (std::size_t i = 0; i < n; ++i) {
                         for (std::size_t ch = 0; ch < c; ++ch) {
                           for (std::size_t t = 0; t < len; ++t) {
                             const double dy = self.grad.at(i, ch, t);
                             if (wants(gamma)) gamma->grad_ref()[ch] += dy * xhat.at(i, ch, t);
                             if (wants(beta)) beta->grad_ref()[ch] += dy;
                             dxhat[ch * len + t] = dy * gamma->value[ch];
                           }
                         }
                         if (wants(x)) {
                           norm_group_backward(xhat.data() + i * m, dxhat.data(), inv_std[i], m,
                                               1, x->grad_ref().data() + i * m);
                         }
                       }
                     });
}

Var instance_norm(const Var& x, double eps) {
  require(x->value.rank() == 3, "instance_norm: expects [N x C x L]");
  const std::size_t n = x->value.dim(0), c = x->value.dim(1), len = x->value.dim(2);
  Tensor out(x->value.shape());
  std::vector<double> inv_std(n * c);
  for (std::size_t g = 0; g < n * c; ++g) {
    const double* src = x->value.data() + g * len;
    double s = 0.0;
    for (std::size_t t = 0; t < len; ++t) s += src[t];
    const double mu = s / static_cast<double>(len);
    double ss = 0.0;
    for (std::size_t t = 0; t < len; ++t) ss += (src[t] - mu) * (src[t] - mu);
    inv_std[g] = 1.0 / std::sqrt(ss / static_cast<double>(len) + eps);
    for (std::size_t t = 0; t < len; ++t) out[g * len + t] = (src[t] - mu) * inv_std[g];
  }
  auto res = make_result(out, {x}, nullptr);
  if (res->requires_grad) {
    res->backward_fn = [x, n, c, len, xhat = std::move(out), inv_std = std::move(inv_std)](
                           Node& self) {
      auto& gx = x->grad_ref();
      for (std::size_t g = 0; g < n * c; ++g) {
        norm_group_backward(xhat.data() + g * len, self.grad.data() + g * len, inv_std[g], len,
                            1, gx.data() + g * len);
      }
    };
  }
  return res;
}

Var max_pool1d(const Var& x, std::size_t kernel) {
  require(x->value.rank() == 3 && kernel >= 1, "max_pool1d: expects [N x C x L]");
  const std::size_t n = x->value.dim(0), c = x->value.dim(1), len = x->value.dim(2);
  const std::size_t lout = len / kernel;
  require(lout > 0, "max_pool1d: input shorter than pooling window");
  Tensor out({n, c, lout});
  std::vector<std::size_t> arg(n * c * lout);
  for (std::size_t g = 0; g < n * c; ++g) {
    const double* src = x->value.data() + g * len;
    for (std::size_t t = 0; t < lout; ++t) {
      std::size_t best = t * kernel;
      for (std::size_t j = 1; j < kernel; ++j) {
        if (src[t * kernel + j] > src[best]) best = t * kernel + j;
      }
      out[g * lout + t] = src[best];
      arg[g * lout + t] = g * len + best;
    }
  }
  return make_result(std::move(out), {x}, [x, arg = std::move(arg)](Node& self) {
    auto& g = x->grad_ref();
    for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += self.grad[i];
  });
}

Var dropout(const Var& x, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return x;
  require(p < 1.0, "dropout: p must be < 1");
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x->value.size());
  Tensor out = x->value;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = rng.uniform() < p ? 0.0 : keep_scale;
    out[i] *= mask[i];
  }
  return make_result(std::move(out), {x}, [x, mask = std::move(mask)](Node& self) {
    auto& g = x->grad_ref();
    for (std::size_t i = 0; i < mask.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

Var mean_over_time(const Var& x) {
  require(x->value.rank() == 3, "mean_over_time: expects [N x C x L]");
  const std::size_t n = x->value.dim(0), c = x->value.dim(1), len = x->value.dim(2);
  Tensor out({n, c});
  for (std::size_t g = 0; g < n * c; ++g) {
    double s = 0.0;
    for (std::size_t t = 0; t < len; ++t) s += x->value[g * len + t];
    out[g] = s / static_cast<double>(len);
  }
  return make_result(std::move(out), {x}, [x, n, c, len](Node& self) {
    auto& g = x->grad_ref();
    const double inv = 1.0 / static_cast<double>(len);
    for (std::size_t i = 0; i < n * c; ++i) {
      for (std::size_t t = 0; t < len; ++t) g[i * len + t] += self.grad[i] * inv;
    }
  });
}

// ---------------------------------------------------------------------------

Tensor softmax_rows(const Tensor& logits, double temperature) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor p({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, logits.at(i, j) / temperature);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      p.at(i, j) = std::exp(logits.at(i, j) / temperature - mx);
      z += p.at(i, j);
    }
    for (std::size_t j = 0; j < k; ++j) p.at(i, j) /= z;
  }
  return p;
}

Var cross_entropy(const Var& logits, std::span<const std::size_t> targets,
                  std::vector<double>* per_sample) {
  require(logits->value.rank() == 2 && logits->value.dim(0) == targets.size(),
          "cross_entropy: batch mismatch");
  const std::size_t n = logits->value.dim(0), k = logits->value.dim(1);
  require(n > 0, "cross_entropy: empty batch");
  Tensor p = softmax_rows(logits->value);
  double total = 0.0;
  if (per_sample) per_sample->assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    require(targets[i] < k, "cross_entropy: target out of range");
    const double li = -std::log(std::max(p.at(i, targets[i]), 1e-300));
    if (per_sample) (*per_sample)[i] = li;
    total += li;
  }
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  return make_result(Tensor::scalar(total / static_cast<double>(n)), {logits},
                     [logits, p = std::move(p), tg = std::move(tg), n, k](Node& self) {
                       auto& g = logits->grad_ref();
                       const double s = self.grad[0] / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i) {
                         for (std::size_t j = 0; j < k; ++j) {
                           g.at(i, j) += s * (p.at(i, j) - (j == tg[i] ? 1.0 : 0.0));
                         }
                       }
                     });
}

Var bce_with_logits(const Var& logits, std::span<const std::size_t> targets,
                    std::vector<double>* per_sample) {
  require(logits->value.rank() == 2 && logits->value.dim(0) == targets.size(),
          "bce_with_logits: batch mismatch");
  const std::size_t n = logits->value.dim(0), k = logits->value.dim(1);
  require(n > 0, "bce_with_logits: empty batch");
  double total = 0.0;
  if (per_sample) per_sample->assign(n, 0.0);
  Tensor sig({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    require(targets[i] < k, "bce_with_logits: target out of range");
    double li = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double z = logits->value.at(i, j);
      const double y = j == targets[i] ? 1.0 : 0.0;
      // log(1 + e^z) - y z, stable for both signs.
      li += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
      sig.at(i, j) = 1.0 / (1.0 + std::exp(-z));
    }
    if (per_sample) (*per_sample)[i] = li;
    total += li;
  }
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  return make_result(Tensor::scalar(total / static_cast<double>(n)), {logits},
                     [logits, sig = std::move(sig), tg = std::move(tg), n, k](Node& self) {
                       auto& g = logits->grad_ref();
                       const double s = self.grad[0] / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i) {
                         for (std::size_t j = 0; j < k; ++j) {
                           g.at(i, j) += s * (sig.at(i, j) - (j == tg[i] ? 1.0 : 0.0));
                         }
                       }
                     });
}

Var soft_cross_entropy(const Var& logits, const Tensor& target_probs, double temperature) {
  require(logits->value.same_shape(target_probs) && logits->value.rank() == 2,
          "soft_cross_entropy: shape mismatch");
  require(temperature > 0.0, "soft_cross_entropy: temperature must be positive");
  const std::size_t n = logits->value.dim(0), k = logits->value.dim(1);
  Tensor q = softmax_rows(logits->value, temperature);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      total -= target_probs.at(i, j) * std::log(std::max(q.at(i, j), 1e-300));
    }
  }
  return make_result(Tensor::scalar(total / static_cast<double>(n)), {logits},
                     [logits, q = std::move(q), target_probs, n, k, temperature](Node& self) {
                       auto& g = logits->grad_ref();
                       const double s = self.grad[0] / (static_cast<double>(n) * temperature);
                       for (std::size_t i = 0; i < n; ++i) {
                         double mass = 0.0;
                         for (std::size_t j = 0; j < k; ++j) mass += target_probs.at(i, j);
                         for (std::size_t j = 0; j < k; ++j) {
                           g.at(i, j) += s * (mass * q.at(i, j) - target_probs.at(i, j));
                         }
                       }
                     });
}

Var mse(const Var& a, const Tensor& target) {
  require(a->value.same_shape(target), "mse: shape mismatch");
  const std::size_t n = a->value.size();
  require(n > 0, "mse: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a->value[i] - target[i];
    total += d * d;
  }
  return make_result(Tensor::scalar(total / static_cast<double>(n)), {a},
                     [a, target, n](Node& self) {
                       auto& g = a->grad_ref();
                       const double s = 2.0 * self.grad[0] / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i) g[i] += s * (a->value[i] - target[i]);
                     });
}

Var cosine_logits(const Var& x, const Var& w, const Var& log_eta) {
  require(x->value.rank() == 2 && w->value.rank() == 2 && x->value.dim(1) == w->value.dim(1),
          "cosine_logits: shape mismatch");
  constexpr double kEps = 1e-12;
  const std::size_t n = x->value.dim(0), d = x->value.dim(1), k = w->value.dim(0);
  const double eta = std::exp(log_eta->value[0]);
  Tensor xn = x->value, wn = w->value;
  std::vector<double> xnorm(n), wnorm(k);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += xn.at(i, j) * xn.at(i, j);
    xnorm[i] = std::max(std::sqrt(s), kEps);
    for (std::size_t j = 0; j < d; ++j) xn.at(i, j) /= xnorm[i];
  }
  for (std::size_t i = 0; i < k; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += wn.at(i, j) * wn.at(i, j);
    wnorm[i] = std::max(std::sqrt(s), kEps);
    for (std::size_t j = 0; j < d; ++j) wn.at(i, j) /= wnorm[i];
  }
  Tensor cos({n, k});
  MatMap(cos.data(), n, k).noalias() =
      ConstMatMap(xn.data(), n, d) * ConstMatMap(wn.data(), k, d).transpose();
  Tensor out = cos;
  for (double& v : out.values()) v *= eta;
  return make_result(
      std::move(out), {x, w, log_eta},
      [x, w, log_eta, n, d, k, eta, xn = std::move(xn), wn = std::move(wn),
       xnorm = std::move(xnorm), wnorm = std::move(wnorm), cos = std::move(cos)](Node& self) {
        // d cos / d xhat = w_hat, projected through the normalisation Jacobian.
        Tensor dcos = self.grad;
        if (wants(log_eta)) {
          double s = 0.0;
          for (std::size_t i = 0; i < dcos.size(); ++i) s += dcos[i] * cos[i];
          log_eta->grad_ref()[0] += eta * s;
        }
        for (double& v : dcos.values()) v *= eta;
        ConstMatMap dc(dcos.data(), n, k);
        if (wants(x)) {
          RowMat dxn = dc * ConstMatMap(wn.data(), k, d);
          auto& g = x->grad_ref();
          for (std::size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += dxn(i, j) * xn.at(i, j);
            for (std::size_t j = 0; j < d; ++j) {
              g.at(i, j) += (dxn(i, j) - dot * xn.at(i, j)) / xnorm[i];
            }
          }
        }
        if (wants(w)) {
          RowMat dwn = dc.transpose() * ConstMatMap(xn.data(), n, d);
          auto& g = w->grad_ref();
          for (std::size_t i = 0; i < k; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += dwn(i, j) * wn.at(i, j);
            for (std::size_t j = 0; j < d; ++j) {
              g.at(i, j) += (dwn(i, j) - dot * wn.at(i, j)) / wnorm[i];
            }
          }
        }
      });
}

}  // namespace tscil::ag
