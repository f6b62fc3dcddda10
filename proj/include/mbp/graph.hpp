#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mbp/common.hpp"
#include "mbp/kernels.hpp"
#include "mbp/tensor.hpp"

namespace mbp {

// Reverse-mode tape over CHW tensors. Nodes are created eagerly (the value is
// computed at creation); backward() walks the tape in reverse. Creation order
// is a topological order by construction.
template <typename T>
class Graph {
 public:
  using NodeId = int32_t;

  enum class Op : uint8_t {
    kLeaf,
    kConv2d,          // in: x, w, b
    kRelu,
    kSigmoid,
    kGlobalAvgPool,   // CxHxW -> Cx1x1
    kMulChannels,     // in: x (CxHxW), gate (Cx1x1)
    kAdd,             // 2..4 inputs, same shape
    kConcatCh,        // 2..3 inputs, same spatial size
    kBilinearUp2,     // half-pixel sampling, border-clamped
    kAvgPool2,        // 2x2 mean, even input sizes
    kScale,           // alpha * x
    kCharbonnierSum,  // in: pred, target; alpha = eps; scalar output
  };

  struct Node {
    Op op = Op::kLeaf;
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first touch during backward
    std::array<NodeId, 4> in{-1, -1, -1, -1};
    int8_t n_in = 0;
    bool requires_grad = false;
    int stride = 1;
    int pad = 0;
    T alpha = T(0);
  };

  NodeId leaf(Tensor<T> value, bool requires_grad = false) {
    Node n;
    n.op = Op::kLeaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad && grad_enabled_;
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  NodeId zeros(Shape s) { return leaf(Tensor<T>(s), false); }

  NodeId conv2d(NodeId x, NodeId w, NodeId b, int stride, int pad) {
    const Tensor<T>& xt = value(x);
    const Tensor<T>& wt = value(w);
    const Tensor<T>& bt = value(b);
    if (xt.shape().rank != 3 || wt.shape().rank != 4 || bt.shape().rank != 1)
      throw ContractError("conv2d: expected x CxHxW, w OxCxKxK, b O");
    const int cin = xt.shape()[0];
    const int cout = wt.shape()[0], k = wt.shape()[2];
    if (wt.shape()[1] != cin)
      throw ContractError("conv2d: weight expects " + std::to_string(wt.shape()[1]) +
                          " input channels, got " + std::to_string(cin));
    if (wt.shape()[3] != k || bt.shape()[0] != cout)
      throw ContractError("conv2d: inconsistent weight/bias shapes");
    const Shape os = kernels::conv2d_out_shape<T>(xt.shape(), wt.shape(), stride, pad);
    if (os[1] <= 0 || os[2] <= 0) throw ContractError("conv2d: output would be empty");

    Node n;
    n.op = Op::kConv2d;
    n.stride = stride;
    n.pad = pad;
    n.value = Tensor<T>(os);
    kernels::conv2d_forward(xt, wt, bt, n.value, stride, pad);
    return push(std::move(n), {x, w, b});
  }

  NodeId relu(NodeId x) {
    Node n;
    n.op = Op::kRelu;
    n.value = value(x);
    T* p = n.value.data();
    for (int64_t i = 0, e = n.value.numel(); i < e; ++i)
      if (p[i] < T(0)) p[i] = T(0);
    return push(std::move(n), {x});
  }

  NodeId sigmoid(NodeId x) {
    Node n;
    n.op = Op::kSigmoid;
    n.value = value(x);
    T* p = n.value.data();
    for (int64_t i = 0, e = n.value.numel(); i < e; ++i)
      p[i] = T(1) / (T(1) + std::exp(-p[i]));
    return push(std::move(n), {x});
  }

  NodeId global_avg_pool(NodeId x) {
    const Tensor<T>& xt = value(x);
    if (xt.shape().rank != 3) throw ContractError("global_avg_pool: expected CxHxW");
    const int c = xt.shape()[0];
    const int64_t hw = int64_t(xt.shape()[1]) * xt.shape()[2];
    Node n;
    n.op = Op::kGlobalAvgPool;
    n.value = Tensor<T>(Shape{c, 1, 1});
    for (int ch = 0; ch < c; ++ch) {
      T acc = T(0);
      const T* p = xt.data() + ch * hw;
      for (int64_t i = 0; i < hw; ++i) acc += p[i];
      n.value[ch] = acc / static_cast<T>(hw);
    }
    return push(std::move(n), {x});
  }

  NodeId mul_channels(NodeId x, NodeId gate) {
    const Tensor<T>& xt = value(x);
    const Tensor<T>& gt = value(gate);
    if (gt.shape().rank != 3 || gt.shape()[1] != 1 || gt.shape()[2] != 1 ||
        gt.shape()[0] != xt.shape()[0])
      throw ContractError("mul_channels: gate must be Cx1x1 matching x channels");
    Node n;
    n.op = Op::kMulChannels;
    n.value = xt;
    const int c = xt.shape()[0];
    const int64_t hw = int64_t(xt.shape()[1]) * xt.shape()[2];
    for (int ch = 0; ch < c; ++ch) {
      const T g = gt[ch];
      T* p = n.value.data() + ch * hw;
      for (int64_t i = 0; i < hw; ++i) p[i] *= g;
    }
    return push(std::move(n), {x, gate});
  }

  NodeId add(NodeId a, NodeId b) { return add_impl({a, b}); }
  NodeId add(NodeId a, NodeId b, NodeId c) { return add_impl({a, b, c}); }
  NodeId add(NodeId a, NodeId b, NodeId c, NodeId d) { return add_impl({a, b, c, d}); }

  NodeId concat_channels(NodeId a, NodeId b) { return concat_impl({a, b}); }
  NodeId concat_channels(NodeId a, NodeId b, NodeId c) { return concat_impl({a, b, c}); }

  NodeId bilinear_up2(NodeId x) {
    const Tensor<T>& xt = value(x);
    if (xt.shape().rank != 3) throw ContractError("bilinear_up2: expected CxHxW");
    Node n;
    n.op = Op::kBilinearUp2;
    n.value = Tensor<T>(Shape{xt.shape()[0], 2 * xt.shape()[1], 2 * xt.shape()[2]});
    kernels::bilinear_up2(xt, n.value);
    return push(std::move(n), {x});
  }

  NodeId avg_pool2(NodeId x) {
    const Tensor<T>& xt = value(x);
    if (xt.shape().rank != 3) throw ContractError("avg_pool2: expected CxHxW");
    const int h = xt.shape()[1], w = xt.shape()[2];
    if (h % 2 || w % 2)
      throw ContractError("avg_pool2: spatial size must be even, got " + xt.shape().str());
    Node n;
    n.op = Op::kAvgPool2;
    n.value = Tensor<T>(Shape{xt.shape()[0], h / 2, w / 2});
    kernels::avg_pool2(xt, n.value);
    return push(std::move(n), {x});
  }

  NodeId scale(NodeId x, T alpha) {
    Node n;
    n.op = Op::kScale;
    n.alpha = alpha;
    n.value = value(x);
    T* p = n.value.data();
    for (int64_t i = 0, e = n.value.numel(); i < e; ++i) p[i] *= alpha;
    return push(std::move(n), {x});
  }

  // sum over elements of sqrt((pred - target)^2 + eps^2)
  NodeId charbonnier_sum(NodeId pred, NodeId target, T eps) {
    const Tensor<T>& p = value(pred);
    const Tensor<T>& t = value(target);
    if (p.shape() != t.shape())
      throw ContractError("charbonnier_sum: shape mismatch " + p.shape().str() + " vs " +
                          t.shape().str());
    if (!(eps > T(0))) throw ContractError("charbonnier_sum: eps must be positive");
    Node n;
    n.op = Op::kCharbonnierSum;
    n.alpha = eps;
    T acc = T(0);
    const T e2 = eps * eps;
    for (int64_t i = 0, e = p.numel(); i < e; ++i) {
      const T d = p[i] - t[i];
      acc += std::sqrt(d * d + e2);
    }
    n.value = Tensor<T>::scalar(acc);
    return push(std::move(n), {pred, target});
  }

  const Tensor<T>& value(NodeId id) const { return nodes_[id].value; }

  const Tensor<T>& grad(NodeId id) const {
    const Node& n = nodes_[id];
    if (n.grad.empty()) {
      static const Tensor<T> empty;
      return empty;
    }
    return n.grad;
  }

  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  size_t size() const { return nodes_.size(); }

  // Disables gradient tracking for leaves created afterwards.
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  void backward(NodeId root, T seed = T(1)) {
    Node& rn = nodes_[root];
    if (!rn.requires_grad) throw ContractError("backward: root does not require grad");
    touch_grad(root)[0] += seed;
    for (NodeId id = root; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty()) continue;
      backward_node(n);
    }
  }

 private:
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;

  NodeId push(Node&& n, std::initializer_list<NodeId> inputs) {
    int i = 0;
    for (NodeId id : inputs) {
      n.in[i++] = id;
      n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
    }
    n.n_in = static_cast<int8_t>(i);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  NodeId add_impl(std::initializer_list<NodeId> ids) {
    const Tensor<T>& first = value(*ids.begin());
    Node n;
    n.op = Op::kAdd;
    n.value = first;
    bool is_first = true;
    for (NodeId id : ids) {
      if (is_first) {
        is_first = false;
        continue;
      }
      const Tensor<T>& t = value(id);
      if (t.shape() != first.shape())
        throw ContractError("add: shape mismatch " + t.shape().str() + " vs " + first.shape().str());
      T* out = n.value.data();
      const T* p = t.data();
      for (int64_t i = 0, e = t.numel(); i < e; ++i) out[i] += p[i];
    }
    int i = 0;
    for (NodeId id : ids) {
      n.in[i++] = id;
      n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
    }
    n.n_in = static_cast<int8_t>(i);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  NodeId concat_impl(std::initializer_list<NodeId> ids) {
    int ctot = 0;
    const Tensor<T>& first = value(*ids.begin());
    if (first.shape().rank != 3) throw ContractError("concat_channels: expected CxHxW inputs");
    const int h = first.shape()[1], w = first.shape()[2];
    for (NodeId id : ids) {
      const Tensor<T>& t = value(id);
      if (t.shape().rank != 3 || t.shape()[1] != h || t.shape()[2] != w)
        throw ContractError("concat_channels: spatial mismatch");
      ctot += t.shape()[0];
    }
    Node n;
    n.op = Op::kConcatCh;
    n.value = Tensor<T>(Shape{ctot, h, w});
    int64_t off = 0;
    for (NodeId id : ids) {
      const Tensor<T>& t = value(id);
      std::copy(t.data(), t.data() + t.numel(), n.value.data() + off);
      off += t.numel();
    }
    int i = 0;
    for (NodeId id : ids) {
      n.in[i++] = id;
      n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
    }
    n.n_in = static_cast<int8_t>(i);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  Tensor<T>& touch_grad(NodeId id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  void backward_node(Node& n) {
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kConv2d: {
        Node& x = nodes_[n.in[0]];
        Node& w = nodes_[n.in[1]];
        Node& b = nodes_[n.in[2]];
        kernels::conv2d_backward(x.value, w.value, n.grad, n.stride, n.pad,
                                 x.requires_grad ? &touch_grad(n.in[0]) : nullptr,
                                 w.requires_grad ? &touch_grad(n.in[1]) : nullptr,
                                 b.requires_grad ? &touch_grad(n.in[2]) : nullptr);
        break;
      }
      case Op::kRelu: {
        if (!nodes_[n.in[0]].requires_grad) break;
        Tensor<T>& gx = touch_grad(n.in[0]);
        const T* v = n.value.data();
        const T* g = n.grad.data();
        T* out = gx.data();
        for (int64_t i = 0, e = n.value.numel(); i < e; ++i)
          if (v[i] > T(0)) out[i] += g[i];
        break;
      }
      case Op::kSigmoid: {
        if (!nodes_[n.in[0]].requires_grad) break;
        Tensor<T>& gx = touch_grad(n.in[0]);
        const T* v = n.value.data();
        const T* g = n.grad.data();
        T* out = gx.data();
        for (int64_t i = 0, e = n.value.numel(); i < e; ++i)
          out[i] += g[i] * v[i] * (T(1) - v[i]);
        break;
      }
      case Op::kGlobalAvgPool: {
        if (!nodes_[n.in[0]].requires_grad) break;
        Tensor<T>& gx = touch_grad(n.in[0]);
        const int c = gx.shape()[0];
        const int64_t hw = int64_t(gx.shape()[1]) * gx.shape()[2];
        for (int ch = 0; ch < c; ++ch) {
          const T g = n.grad[ch] / static_cast<T>(hw);
          T* out = gx.data() + ch * hw;
          for (int64_t i = 0; i < hw; ++i) out[i] += g;
        }
        break;
      }
      case Op::kMulChannels: {
        Node& x = nodes_[n.in[0]];
        Node& gate = nodes_[n.in[1]];
        const int c = x.value.shape()[0];
        const int64_t hw = int64_t(x.value.shape()[1]) * x.value.shape()[2];
        if (x.requires_grad) {
          Tensor<T>& gx = touch_grad(n.in[0]);
          for (int ch = 0; ch < c; ++ch) {
            const T gv = gate.value[ch];
            const T* g = n.grad.data() + ch * hw;
            T* out = gx.data() + ch * hw;
            for (int64_t i = 0; i < hw; ++i) out[i] += g[i] * gv;
          }
        }
        if (gate.requires_grad) {
          Tensor<T>& gg = touch_grad(n.in[1]);
          for (int ch = 0; ch < c; ++ch) {
            const T* g = n.grad.data() + ch * hw;
            const T* xv = x.value.data() + ch * hw;
            T acc = T(0);
            for (int64_t i = 0; i < hw; ++i) acc += g[i] * xv[i];
            gg[ch] += acc;
          }
        }
        break;
      }
      case Op::kAdd: {
        for (int i = 0; i < n.n_in; ++i) {
          if (!nodes_[n.in[i]].requires_grad) continue;
          Tensor<T>& gx = touch_grad(n.in[i]);
          const T* g = n.grad.data();
          T* out = gx.data();
          for (int64_t j = 0, e = n.grad.numel(); j < e; ++j) out[j] += g[j];
        }
        break;
      }
      case Op::kConcatCh: {
        int64_t off = 0;
        for (int i = 0; i < n.n_in; ++i) {
          Node& x = nodes_[n.in[i]];
          const int64_t len = x.value.numel();
          if (x.requires_grad) {
            Tensor<T>& gx = touch_grad(n.in[i]);
            const T* g = n.grad.data() + off;
            T* out = gx.data();
            for (int64_t j = 0; j < len; ++j) out[j] += g[j];
          }
          off += len;
        }
        break;
      }
      case Op::kBilinearUp2: {
        if (!nodes_[n.in[0]].requires_grad) break;
        kernels::bilinear_up2_backward(n.grad, touch_grad(n.in[0]));
        break;
      }
      case Op::kAvgPool2: {
        if (!nodes_[n.in[0]].requires_grad) break;
        Tensor<T>& gx = touch_grad(n.in[0]);
        const int c = n.grad.shape()[0], ho = n.grad.shape()[1], wo = n.grad.shape()[2];
        for (int ch = 0; ch < c; ++ch)
          for (int y = 0; y < ho; ++y)
            for (int x2 = 0; x2 < wo; ++x2) {
              const T g = n.grad.at(ch, y, x2) / T(4);
              gx.at(ch, 2 * y, 2 * x2) += g;
              gx.at(ch, 2 * y, 2 * x2 + 1) += g;
              gx.at(ch, 2 * y + 1, 2 * x2) += g;
              gx.at(ch, 2 * y + 1, 2 * x2 + 1) += g;
            }
        break;
      }
      case Op::kScale: {
        if (!nodes_[n.in[0]].requires_grad) break;
        Tensor<T>& gx = touch_grad(n.in[0]);
        const T* g = n.grad.data();
        T* out = gx.data();
        for (int64_t i = 0, e = n.grad.numel(); i < e; ++i) out[i] += g[i] * n.alpha;
        break;
      }
      case Op::kCharbonnierSum: {
        Node& p = nodes_[n.in[0]];
        Node& t = nodes_[n.in[1]];
        const T g = n.grad[0];
        const T e2 = n.alpha * n.alpha;
        Tensor<T>* gp = p.requires_grad ? &touch_grad(n.in[0]) : nullptr;
        Tensor<T>* gt = t.requires_grad ? &touch_grad(n.in[1]) : nullptr;
        for (int64_t i = 0, e = p.value.numel(); i < e; ++i) {
          const T d = p.value[i] - t.value[i];
          const T dd = g * d / std::sqrt(d * d + e2);
          if (gp) (*gp)[i] += dd;
          if (gt) (*gt)[i] -= dd;
        }
        break;
      }
    }
  }
};

}  // namespace mbp
