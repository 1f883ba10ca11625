#pragma once

// Minimal reverse-mode differentiation over batches of row-major matrices.
//
// A Tape owns every intermediate value of one forward pass. Ops append a node
// holding the value and, when recording, a closure that pushes the node's
// gradient to its parents. Parameters enter as single-element batches that
// broadcast against sample batches; their gradients are summed over samples
// and added into a caller-owned sink when backward() finishes.

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "mclr/attention.hpp"
#include "mclr/tensor.hpp"

namespace mclr::ag {

struct Var {
  int id = -1;
};

template <class S>
class Tape {
 public:
  using Backward = std::function<void(Tape&, Var)>;

  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const { return record_; }

  Var constant(Batch<S> value) { return push(std::move(value), false, nullptr); }

  Var parameter(const Mat<S>& value, Mat<S>* grad_sink) {
    Var v = push(Batch<S>{value}, grad_sink != nullptr, nullptr);
    node(v).sink = grad_sink;
    return v;
  }

  const Batch<S>& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }

  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

  // Gradient buffer of `v` with every sample slot materialized (missing
  // slots are zero-filled).
  Batch<S>& grad(Var v) {
    Node& n = node(v);
    if (n.grad.empty()) n.grad.resize(n.value.size());
    for (std::size_t i = 0; i < n.value.size(); ++i) {
      if (n.grad[i].size() == 0) n.grad[i] = Mat<S>::Zero(n.value[i].rows(), n.value[i].cols());
    }
    return n.grad;
  }

  // grad(v)[i] += e, assigning instead when the slot has not been touched.
  // Broadcast (single-element) nodes always use slot 0.
  template <class Expr>
  void accumulate(Var v, std::size_t i, const Expr& e) {
    bool fresh = false;
    Mat<S>& g = slot(v, i, fresh);
    if (fresh) {
      g = e;
    } else {
      g += e;
    }
  }

  // grad(v)[i] += a * b without temporaries.
  template <class A, class B>
  void accumulate_product(Var v, std::size_t i, const A& a, const B& b) {
    bool fresh = false;
    Mat<S>& g = slot(v, i, fresh);
    if (fresh) {
      g.noalias() = a * b;
    } else {
      g.noalias() += a * b;
    }
  }

  Var push(Batch<S> value, bool requires_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = record_ && requires_grad;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  // Seeds d(loss)/d(loss) = 1 for a 1x1 loss and runs every recorded closure
  // in reverse creation order.
  void backward(Var loss) {
    if (!record_) throw RangeError("backward on a non-recording tape");
    grad(loss)[0].setOnes();
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, Var{i});
      if (n.sink != nullptr) {
        for (const auto& g : n.grad) {
          if (g.size() != 0) *n.sink += g;
        }
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Batch<S> value;
    Batch<S> grad;
    Backward backward;
    bool requires_grad = false;
    Mat<S>* sink = nullptr;
  };

  Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }

  Mat<S>& slot(Var v, std::size_t i, bool& fresh) {
    Node& n = node(v);
    if (n.grad.empty()) n.grad.resize(n.value.size());
    const std::size_t k = n.value.size() == 1 ? 0 : i;
    fresh = n.grad[k].size() == 0;
    return n.grad[k];
  }

  bool record_;
  std::deque<Node> nodes_;
};

namespace detail {

template <class S>
const Mat<S>& at(const Batch<S>& b, std::size_t i) {
  return b.size() == 1 ? b[0] : b[i];
}

template <class S>
Mat<S>& at(Batch<S>& b, std::size_t i) {
  return b.size() == 1 ? b[0] : b[i];
}

inline std::size_t batch_of(std::size_t a, std::size_t b) { return a > b ? a : b; }

}  // namespace detail

namespace detail {

template <class S>
Mat<S> stack_rows(const Batch<S>& b) {
  Eigen::Index rows = 0;
  for (const auto& m : b) rows += m.rows();
  Mat<S> out(rows, b.front().cols());
  Eigen::Index r = 0;
  for (const auto& m : b) {
    out.middleRows(r, m.rows()) = m;
    r += m.rows();
  }
  return out;
}

}  // namespace detail

// x * w + bias (bias may be omitted with an invalid Var). While recording,
// samples sharing one weight are stacked into a single product.
template <class S>
Var linear(Tape<S>& t, Var x, Var w, Var bias = Var{}) {
  const auto& xv = t.value(x);
  const auto& wv = t.value(w);
  const bool has_bias = bias.id >= 0;
  const std::size_t n = detail::batch_of(xv.size(), wv.size());
  const bool stacked = t.recording() && wv.size() == 1 && xv.size() > 1;
  Batch<S> out(n);
  if (stacked) {
    Mat<S> y = detail::stack_rows(xv) * wv[0];
    if (has_bias) y.rowwise() += t.value(bias)[0].row(0);
    Eigen::Index r = 0;
    for (std::size_t b = 0; b < n; ++b) {
      out[b] = y.middleRows(r, xv[b].rows());
      r += xv[b].rows();
    }
  } else {
    for (std::size_t b = 0; b < n; ++b) {
      out[b].noalias() = detail::at(xv, b) * detail::at(wv, b);
      if (has_bias) out[b].rowwise() += t.value(bias)[0].row(0);
    }
  }
  const bool rg = t.requires_grad(x) || t.requires_grad(w) || (has_bias && t.requires_grad(bias));
  return t.push(std::move(out), rg, [x, w, bias, has_bias, n, stacked](Tape<S>& tp, Var self) {
    const auto& g = tp.grad(self);
    if (stacked) {
      const Mat<S> gs = detail::stack_rows(g);
      if (tp.requires_grad(x)) {
        const Mat<S> gx = gs * tp.value(w)[0].transpose();
        Eigen::Index r = 0;
        for (std::size_t b = 0; b < n; ++b) {
          tp.accumulate(x, b, gx.middleRows(r, g[b].rows()));
          r += g[b].rows();
        }
      }
      if (tp.requires_grad(w)) tp.accumulate_product(w, 0, detail::stack_rows(tp.value(x)).transpose(), gs);
      if (has_bias && tp.requires_grad(bias)) tp.accumulate(bias, 0, gs.colwise().sum());
      return;
    }
    if (tp.requires_grad(x)) {
      const auto& wv = tp.value(w);
      for (std::size_t b = 0; b < n; ++b) tp.accumulate_product(x, b, g[b], detail::at(wv, b).transpose());
    }
    if (tp.requires_grad(w)) {
      const auto& xv = tp.value(x);
      for (std::size_t b = 0; b < n; ++b) tp.accumulate_product(w, b, detail::at(xv, b).transpose(), g[b]);
    }
    if (has_bias && tp.requires_grad(bias)) {
      for (std::size_t b = 0; b < n; ++b) tp.accumulate(bias, b, g[b].colwise().sum());
    }
  });
}

// Elementwise a + b; b may be a single-element batch broadcast over a.
template <class S>
Var add(Tape<S>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  const std::size_t n = detail::batch_of(av.size(), bv.size());
  Batch<S> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = detail::at(av, i) + detail::at(bv, i);
  return t.push(std::move(out), t.requires_grad(a) || t.requires_grad(b), [a, b, n](Tape<S>& tp, Var self) {
    const auto& g = tp.grad(self);
    for (Var p : {a, b}) {
      if (!tp.requires_grad(p)) continue;
      for (std::size_t i = 0; i < n; ++i) tp.accumulate(p, i, g[i]);
    }
  });
}

// skip_scale[b] * skip[b] + out_scale[b] * x[b]; skip is constant.
template <class S>
Var scaled_skip(Tape<S>& t, Var x, const Batch<S>& skip, const std::vector<S>& skip_scale,
                const std::vector<S>& out_scale) {
  const auto& xv = t.value(x);
  const std::size_t n = xv.size();
  if (skip.size() != n || skip_scale.size() != n || out_scale.size() != n) {
    throw RangeError("scaled_skip: batch size mismatch");
  }
  Batch<S> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = skip_scale[i] * skip[i] + out_scale[i] * xv[i];
  return t.push(std::move(out), t.requires_grad(x), [x, out_scale, n](Tape<S>& tp, Var self) {
    const auto& g = tp.grad(self);
    for (std::size_t i = 0; i < n; ++i) tp.accumulate(x, i, out_scale[i] * g[i]);
  });
}

// x[b] + broadcast of the 1 x m row v[b] to every row of x[b].
template <class S>
Var add_row(Tape<S>& t, Var x, Var v) {
  const auto& xv = t.value(x);
  const auto& vv = t.value(v);
  const std::size_t n = xv.size();
  Batch<S> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = xv[i];
    out[i].rowwise() += detail::at(vv, i).row(0);
  }
  return t.push(std::move(out), t.requires_grad(x) || t.requires_grad(v), [x, v, n](Tape<S>& tp, Var self) {
    const auto& g = tp.grad(self);
    for (std::size_t i = 0; i < n; ++i) {
      if (tp.requires_grad(x)) tp.accumulate(x, i, g[i]);
      if (tp.requires_grad(v)) tp.accumulate(v, i, g[i].colwise().sum());
    }
  });
}

template <class S>
Var layer_norm(Tape<S>& t, Var x, Var gamma, Var beta, S eps = S(1e-5)) {
  using Row = Eigen::Array<S, 1, Eigen::Dynamic>;
  const auto& xv = t.value(x);
  const Row gm = t.value(gamma)[0].row(0).array();
  const Row bt = t.value(beta)[0].row(0).array();
  const std::size_t n = xv.size();
  auto xhat = std::make_shared<Batch<S>>(n);
  auto inv_std = std::make_shared<std::vector<Eigen::Matrix<S, Eigen::Dynamic, 1>>>(n);
  Batch<S> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& m = xv[i];
    const Eigen::Index rows = m.rows();
    const auto cols = static_cast<S>(m.cols());
    auto& xh = (*xhat)[i];
    auto& is = (*inv_std)[i];
    xh.resize(rows, m.cols());
    is.resize(rows);
    out[i].resize(rows, m.cols());
    for (Eigen::Index r = 0; r < rows; ++r) {
      const S mean = m.row(r).sum() / cols;
      xh.row(r) = m.row(r).array() - mean;
      const S var = xh.row(r).squaredNorm() / cols;
      is(r) = S(1) / std::sqrt(var + eps);
      xh.row(r) *= is(r);
      out[i].row(r) = xh.row(r).array() * gm + bt;
    }
  }
  const bool rg = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
  return t.push(std::move(out), rg, [x, gamma, beta, n, xhat, inv_std](Tape<S>& tp, Var self) {
    const auto& g = tp.grad(self);
    const Row gm = tp.value(gamma)[0].row(0).array();
    const Eigen::Index cols = gm.cols();
    Row g_gamma = Row::Zero(cols);
    Row g_beta = Row::Zero(cols);
    Row gxh(cols);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& xh = (*xhat)[i];
      const auto& gi = g[i];
      Mat<S> gx;
      if (tp.requires_grad(x)) gx.resize(xh.rows(), cols);
      for (Eigen::Index r = 0; r < xh.rows(); ++r) {
        g_gamma += gi.row(r).array() * xh.row(r).array();
        g_beta += gi.row(r).array();
        if (tp.requires_grad(x)) {
          gxh = gi.row(r).array() * gm;
          const S m1 = gxh.sum() / static_cast<S>(cols);
          const S m2 = (gxh * xh.row(r).array()).sum() / static_cast<S>(cols);
          gx.row(r) = (*inv_std)[i](r) * (gxh - m1 - xh.row(r).array() * m2);
        }
      }
      if (tp.requires_grad(x)) tp.accumulate(x, i, gx);
    }
    if (tp.requires_grad(gamma)) tp.accumulate(gamma, 0, g_gamma.matrix());
    if (tp.requires_grad(beta)) tp.accumulate(beta, 0, g_beta.matrix());
  });
}

template <class S>
Var silu(Tape<S>& t, Var x) {
  const auto& xv = t.value(x);
  const std::size_t n = xv.size();
  auto sig = std::make_shared<Batch<S>>(n);
  Batch<S> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    (*sig)[i] = (S(1) / (S(1) + (-xv[i].array()).exp())).matrix();
    out[i] = (xv[i].array() * (*sig)[i].array()).matrix();
  }
  return t.push(std::move(out), t.requires_grad(x), [x, n, sig](Tape<S>& tp, Var self) {
    const auto& g = tp.grad(self);
    const auto& xv = tp.value(x);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = (*sig)[i].array();
      tp.accumulate(x, i, (g[i].array() * s * (S(1) + xv[i].array() * (S(1) - s))).matrix());
    }
  });
}

// Per-channel temporal convolution with taps (t-1, t, t+1) and zero padding.
// w is 3 x d, bias is 1 x d.
template <class S>
Var depthwise_conv3(Tape<S>& t, Var x, Var w, Var bias) {
  const auto& xv = t.value(x);
  const auto& wv = t.value(w)[0];
  const auto& bv = t.value(bias)[0];
  const std::size_t n = xv.size();
  Batch<S> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& m = xv[i];
    const Eigen::Index f = m.rows();
    Mat<S> y = m.array().rowwise() * wv.row(1).array();
    if (f > 1) {
      y.bottomRows(f - 1).array() += m.topRows(f - 1).array().rowwise() * wv.row(0).array();
      y.topRows(f - 1).array() += m.bottomRows(f - 1).array().rowwise() * wv.row(2).array();
    }
    y.rowwise() += bv.row(0);
    out[i] = std::move(y);
  }
  const bool rg = t.requires_grad(x) || t.requires_grad(w) || t.requires_grad(bias);
  return t.push(std::move(out), rg, [x, w, bias, n](Tape<S>& tp, Var self) {
    const auto& g = tp.grad(self);
    const auto& xv = tp.value(x);
    const auto& wv = tp.value(w)[0];
    Mat<S> gw = Mat<S>::Zero(3, wv.cols());
    for (std::size_t i = 0; i < n; ++i) {
      const Eigen::Index f = xv[i].rows();
      if (tp.requires_grad(x)) {
        Mat<S> gx = g[i].array().rowwise() * wv.row(1).array();
        if (f > 1) {
          gx.topRows(f - 1).array() += g[i].bottomRows(f - 1).array().rowwise() * wv.row(0).array();
          gx.bottomRows(f - 1).array() += g[i].topRows(f - 1).array().rowwise() * wv.row(2).array();
        }
        tp.accumulate(x, i, gx);
      }
      if (tp.requires_grad(w)) {
        gw.row(1) += (g[i].array() * xv[i].array()).colwise().sum().matrix();
        if (f > 1) {
          gw.row(0) += (g[i].bottomRows(f - 1).array() * xv[i].topRows(f - 1).array()).colwise().sum().matrix();
          gw.row(2) += (g[i].topRows(f - 1).array() * xv[i].bottomRows(f - 1).array()).colwise().sum().matrix();
        }
      }
      if (tp.requires_grad(bias)) tp.accumulate(bias, 0, g[i].colwise().sum());
    }
    if (tp.requires_grad(w)) tp.accumulate(w, 0, gw);
  });
}

// Non-overlapping mean of row pairs; row count must be even.
template <class S>
Var avg_pool2(Tape<S>& t, Var x) {
  const auto& xv = t.value(x);
  const std::size_t n = xv.size();
  Batch<S> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Index half = xv[i].rows() / 2;
    out[i].resize(half, xv[i].cols());
    for (Eigen::Index r = 0; r < half; ++r) out[i].row(r) = S(0.5) * (xv[i].row(2 * r) + xv[i].row(2 * r + 1));
  }
  return t.push(std::move(out), t.requires_grad(x), [x, n](Tape<S>& tp, Var self) {
    const auto& g = tp.grad(self);
    for (std::size_t i = 0; i < n; ++i) {
      Mat<S> gx(g[i].rows() * 2, g[i].cols());
      for (Eigen::Index r = 0; r < g[i].rows(); ++r) {
        gx.row(2 * r) = S(0.5) * g[i].row(r);
        gx.row(2 * r + 1) = gx.row(2 * r);
      }
      tp.accumulate(x, i, gx);
    }
  });
}

// Nearest-neighbour doubling along rows.
template <class S>
Var upsample2(Tape<S>& t, Var x) {
  const auto& xv = t.value(x);
  const std::size_t n = xv.size();
  Batch<S> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].resize(xv[i].rows() * 2, xv[i].cols());
    for (Eigen::Index r = 0; r < xv[i].rows(); ++r) {
      out[i].row(2 * r) = xv[i].row(r);
      out[i].row(2 * r + 1) = xv[i].row(r);
    }
  }
  return t.push(std::move(out), t.requires_grad(x), [x, n](Tape<S>& tp, Var self) {
    const auto& g = tp.grad(self);
    for (std::size_t i = 0; i < n; ++i) {
      Mat<S> gx(g[i].rows() / 2, g[i].cols());
      for (Eigen::Index r = 0; r < gx.rows(); ++r) gx.row(r) = g[i].row(2 * r) + g[i].row(2 * r + 1);
      tp.accumulate(x, i, gx);
    }
  });
}

template <class S>
Var concat_cols(Tape<S>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  const std::size_t n = av.size();
  Batch<S> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].resize(av[i].rows(), av[i].cols() + bv[i].cols());
    out[i] << av[i], bv[i];
  }
  return t.push(std::move(out), t.requires_grad(a) || t.requires_grad(b), [a, b, n](Tape<S>& tp, Var self) {
    const auto& g = tp.grad(self);
    for (std::size_t i = 0; i < n; ++i) {
      const Eigen::Index ca = tp.value(a)[i].cols();
      if (tp.requires_grad(a)) tp.accumulate(a, i, g[i].leftCols(ca));
      if (tp.requires_grad(b)) tp.accumulate(b, i, g[i].rightCols(g[i].cols() - ca));
    }
  });
}

// First `rows` rows of every sample.
template <class S>
Var take_rows(Tape<S>& t, Var x, Eigen::Index rows) {
  const auto& xv = t.value(x);
  const std::size_t n = xv.size();
  Batch<S> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[i].topRows(rows);
  return t.push(std::move(out), t.requires_grad(x), [x, n, rows](Tape<S>& tp, Var self) {
    const auto& g = tp.grad(self);
    auto& gx = tp.grad(x);
    for (std::size_t i = 0; i < n; ++i) gx[i].topRows(rows) += g[i];
  });
}

// Rows table[ids[b][i]] + pos[i] for every token of every sample.
template <class S>
Var embed_tokens(Tape<S>& t, Var table, Var pos, const std::vector<std::vector<int>>& ids) {
  const auto& tv = t.value(table)[0];
  const auto& pv = t.value(pos)[0];
  const std::size_t n = ids.size();
  Batch<S> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto len = static_cast<Eigen::Index>(ids[i].size());
    out[i].resize(len, tv.cols());
    for (Eigen::Index r = 0; r < len; ++r) out[i].row(r) = tv.row(ids[i][static_cast<std::size_t>(r)]) + pv.row(r);
  }
  return t.push(std::move(out), t.requires_grad(table) || t.requires_grad(pos),
                [table, pos, ids, n](Tape<S>& tp, Var self) {
                  const auto& g = tp.grad(self);
                  for (std::size_t i = 0; i < n; ++i) {
                    for (Eigen::Index r = 0; r < g[i].rows(); ++r) {
                      if (tp.requires_grad(table)) tp.grad(table)[0].row(ids[i][static_cast<std::size_t>(r)]) += g[i].row(r);
                      if (tp.requires_grad(pos)) tp.grad(pos)[0].row(r) += g[i].row(r);
                    }
                  }
                });
}

// Multi-head scaled dot-product attention. Heads are contiguous column groups
// of q/k/v. When callbacks are supplied, hooks may rewrite q/k/v before the
// similarity and the maps after softmax, and the observer sees the maps.
// Hooked evaluations are not differentiable.
template <class S>
Var multihead_attention(Tape<S>& t, Var q, Var k, Var v, int heads, AttentionCallbacks<S>* callbacks = nullptr) {
  const std::size_t n = t.value(q).size();
  const bool hooked = callbacks != nullptr && !callbacks->hooks.empty();
  Batch<S> qv, kv, vv;
  if (hooked) {
    qv = t.value(q);
    kv = t.value(k);
    vv = t.value(v);
    for (auto* h : callbacks->hooks) h->before_similarity(callbacks->site, qv, kv, vv);
  }
  const Batch<S>& qr = hooked ? qv : t.value(q);
  const Batch<S>& kr = hooked ? kv : t.value(k);
  const Batch<S>& vr = hooked ? vv : t.value(v);

  auto maps = std::make_shared<std::vector<HeadMaps<S>>>(n);
  for (std::size_t b = 0; b < n; ++b) (*maps)[b] = multihead_maps(qr[b], kr[b], heads);

  if (callbacks != nullptr) {
    std::vector<HeadMaps<S>> pre;
    if (hooked) {
      pre = *maps;
      for (auto* h : callbacks->hooks) h->after_softmax(callbacks->site, *maps);
    }
    if (callbacks->observer != nullptr) {
      for (std::size_t b = 0; b < n; ++b) {
        const HeadMaps<S>& before = hooked ? pre[b] : (*maps)[b];
        bool changed = false;
        if (hooked) {
          for (std::size_t h = 0; h < before.size() && !changed; ++h) changed = before[h] != (*maps)[b][h];
        }
        callbacks->observer->observe(callbacks->site, static_cast<int>(b), before, changed ? &(*maps)[b] : nullptr);
      }
    }
  }

  Batch<S> out(n);
  for (std::size_t b = 0; b < n; ++b) out[b] = multihead_output((*maps)[b], vr[b]);

  const bool rg = !hooked && (t.requires_grad(q) || t.requires_grad(k) || t.requires_grad(v));
  return t.push(std::move(out), rg, [q, k, v, heads, n, maps](Tape<S>& tp, Var self) {
    const auto& g = tp.grad(self);
    const auto& qv = tp.value(q);
    const auto& kv = tp.value(k);
    const auto& vv = tp.value(v);
    const Eigen::Index dh = qv[0].cols() / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    Mat<S> dp, ds;
    for (std::size_t b = 0; b < n; ++b) {
      Mat<S> gq(qv[b].rows(), qv[b].cols());
      Mat<S> gk(kv[b].rows(), kv[b].cols());
      Mat<S> gv(vv[b].rows(), vv[b].cols());
      for (int h = 0; h < heads; ++h) {
        const Mat<S>& p = (*maps)[b][static_cast<std::size_t>(h)];
        const auto go = g[b].middleCols(h * dh, dh);
        gv.middleCols(h * dh, dh).noalias() = p.transpose() * go;
        dp.noalias() = go * vv[b].middleCols(h * dh, dh).transpose();
        for (Eigen::Index r = 0; r < p.rows(); ++r) {
          const S inner = p.row(r).dot(dp.row(r));
          dp.row(r) = (p.row(r).array() * (dp.row(r).array() - inner)).matrix() * scale;
        }
        gq.middleCols(h * dh, dh).noalias() = dp * kv[b].middleCols(h * dh, dh);
        gk.middleCols(h * dh, dh).noalias() = dp.transpose() * qv[b].middleCols(h * dh, dh);
      }
      if (tp.requires_grad(q)) tp.accumulate(q, b, gq);
      if (tp.requires_grad(k)) tp.accumulate(k, b, gk);
      if (tp.requires_grad(v)) tp.accumulate(v, b, gv);
    }
    (void)ds;
  });
}

// Mean squared error over every element of every sample; returns a 1x1 node.
template <class S>
Var mse(Tape<S>& t, Var pred, const Batch<S>& target) {
  const auto& pv = t.value(pred);
  S total = 0;
  Eigen::Index count = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    total += (pv[i] - target[i]).squaredNorm();
    count += pv[i].size();
  }
  Mat<S> out(1, 1);
  out(0, 0) = total / static_cast<S>(count);
  auto tgt = std::make_shared<Batch<S>>(target);
  return t.push(Batch<S>{out}, t.requires_grad(pred), [pred, tgt, count](Tape<S>& tp, Var self) {
    const S g = tp.grad(self)[0](0, 0);
    const auto& pv = tp.value(pred);
    for (std::size_t i = 0; i < pv.size(); ++i) {
      tp.accumulate(pred, i, (S(2) * g / static_cast<S>(count)) * (pv[i] - (*tgt)[i]));
    }
  });
}

// sum_b <x_b, r_b>; a linear probe used for gradient checks.
template <class S>
Var inner_product(Tape<S>& t, Var x, const Batch<S>& r) {
  const auto& xv = t.value(x);
  S total = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) total += (xv[i].array() * r[i].array()).sum();
  Mat<S> out(1, 1);
  out(0, 0) = total;
  auto probe = std::make_shared<Batch<S>>(r);
  return t.push(Batch<S>{out}, t.requires_grad(x), [x, probe](Tape<S>& tp, Var self) {
    const S g = tp.grad(self)[0](0, 0);
    for (std::size_t i = 0; i < probe->size(); ++i) tp.accumulate(x, i, g * (*probe)[i]);
  });
}

}  // namespace mclr::ag
