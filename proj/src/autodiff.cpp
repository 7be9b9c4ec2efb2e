#include "segda/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace segda {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapCM = Eigen::Map<const MatRM>;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

int prod_range(const std::vector<int>& s, int lo, int hi) {
  int p = 1;
  for (int i = lo; i < hi; ++i) p *= s[static_cast<std::size_t>(i)];
  return p;
}

// Output spatial size for kernel 3, padding 1.
int conv_out(int n, int stride) { return (n - 1) / stride + 1; }

}  // namespace

std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::kEncoder: return "encoder";
    case ParamGroup::kPixelDecoder: return "pixel_decoder";
    case ParamGroup::kSegmentDecoder: return "segment_decoder";
    case ParamGroup::kNone: return "none";
  }
  return "none";
}

ParamGroup param_group_from_string(const std::string& s) {
  if (s == "encoder") return ParamGroup::kEncoder;
  if (s == "pixel_decoder") return ParamGroup::kPixelDecoder;
  if (s == "segment_decoder") return ParamGroup::kSegmentDecoder;
  if (s == "none") return ParamGroup::kNone;
  throw std::invalid_argument("unknown parameter group: " + s);
}

void Graph::check_id(int id) const {
  if (id < 0 || id >= num_nodes()) {
    throw std::invalid_argument("Graph: invalid node id " + std::to_string(id));
  }
}

int Graph::push(Node n) {
  const int id = num_nodes();
  nodes_.push_back(std::move(n));
  eval_node(id);
  return id;
}

int Graph::input(Tensor v) {
  Node n;
  n.op = Op::kInput;
  n.value = std::move(v);
  return push(std::move(n));
}

int Graph::param(const std::string& name, Tensor v, ParamGroup group) {
  require(!name.empty(), "Graph::param: empty name");
  require(param_lookup_.find(name) == param_lookup_.end(),
          "Graph::param: duplicate parameter name '" + name + "'");
  Node n;
  n.op = Op::kParam;
  n.value = std::move(v);
  n.name = name;
  n.group = group;
  const int id = push(std::move(n));
  param_lookup_[name] = id;
  param_names_.push_back(name);
  return id;
}

#define BINARY_SAME_SHAPE(fn, opcode)                                            \
  int Graph::fn(int a, int b) {                                                  \
    check_id(a);                                                                 \
    check_id(b);                                                                 \
    require(nodes_[a].value.same_shape(nodes_[b].value),                         \
            std::string("Graph::" #fn ": shape mismatch ") +                     \
                nodes_[a].value.shape_str() + " vs " + nodes_[b].value.shape_str()); \
    Node n;                                                                      \
    n.op = opcode;                                                               \
    n.in = {a, b};                                                               \
    return push(std::move(n));                                                   \
  }

BINARY_SAME_SHAPE(add, Op::kAdd)
BINARY_SAME_SHAPE(sub, Op::kSub)
BINARY_SAME_SHAPE(mul, Op::kMul)
#undef BINARY_SAME_SHAPE

int Graph::scalar_mul(int a, double c) {
  check_id(a);
  Node n;
  n.op = Op::kScalarMul;
  n.in = {a};
  n.scalar = c;
  return push(std::move(n));
}

int Graph::relu(int a) {
  check_id(a);
  Node n;
  n.op = Op::kRelu;
  n.in = {a};
  return push(std::move(n));
}

int Graph::log(int a) {
  check_id(a);
  Node n;
  n.op = Op::kLog;
  n.in = {a};
  return push(std::move(n));
}

int Graph::matmul(int a, int b) {
  check_id(a);
  check_id(b);
  const Tensor& ta = nodes_[a].value;
  const Tensor& tb = nodes_[b].value;
  require(ta.rank() == 2 && tb.rank() == 2,
          "Graph::matmul: operands must be rank 2, got " + ta.shape_str() + " and " + tb.shape_str());
  require(ta.dim(1) == tb.dim(0),
          "Graph::matmul: inner dimensions disagree, " + ta.shape_str() + " x " + tb.shape_str());
  Node n;
  n.op = Op::kMatMul;
  n.in = {a, b};
  return push(std::move(n));
}

int Graph::transpose(int a) {
  check_id(a);
  require(nodes_[a].value.rank() == 2,
          "Graph::transpose: operand must be rank 2, got " + nodes_[a].value.shape_str());
  Node n;
  n.op = Op::kTranspose;
  n.in = {a};
  return push(std::move(n));
}

int Graph::add_bias_col(int x, int bias) {
  check_id(x);
  check_id(bias);
  const Tensor& tx = nodes_[x].value;
  const Tensor& tb = nodes_[bias].value;
  require(tx.rank() == 2 && tb.rank() == 1 && tb.dim(0) == tx.dim(0),
          "Graph::add_bias_col: need x[m,n] and bias[m], got " + tx.shape_str() + " and " +
              tb.shape_str());
  Node n;
  n.op = Op::kAddBiasCol;
  n.in = {x, bias};
  return push(std::move(n));
}

int Graph::reshape(int a, std::vector<int> shape) {
  check_id(a);
  Tensor probe(shape);  // validates dims positive
  require(probe.numel() == nodes_[a].value.numel(),
          "Graph::reshape: element count mismatch, " + nodes_[a].value.shape_str() + " -> " +
              probe.shape_str());
  Node n;
  n.op = Op::kReshape;
  n.in = {a};
  n.indices = std::move(shape);
  return push(std::move(n));
}

int Graph::gather(int a, int axis, std::vector<int> indices) {
  check_id(a);
  const Tensor& t = nodes_[a].value;
  require(axis >= 0 && axis < t.rank(), "Graph::gather: axis out of range");
  require(!indices.empty(), "Graph::gather: empty index list");
  for (int idx : indices) {
    require(idx >= 0 && idx < t.dim(axis),
            "Graph::gather: index " + std::to_string(idx) + " out of range for " + t.shape_str());
  }
  Node n;
  n.op = Op::kGather;
  n.in = {a};
  n.axis = axis;
  n.indices = std::move(indices);
  return push(std::move(n));
}

int Graph::conv2d(int x, int w, int bias, int stride) {
  check_id(x);
  check_id(w);
  check_id(bias);
  const Tensor& tx = nodes_[x].value;
  const Tensor& tw = nodes_[w].value;
  const Tensor& tb = nodes_[bias].value;
  require(stride == 1 || stride == 2, "Graph::conv2d: stride must be 1 or 2");
  require(tx.rank() == 3, "Graph::conv2d: input must be [C,H,W], got " + tx.shape_str());
  require(tw.rank() == 4 && tw.dim(2) == 3 && tw.dim(3) == 3,
          "Graph::conv2d: weight must be [Cout,Cin,3,3], got " + tw.shape_str());
  require(tw.dim(1) == tx.dim(0), "Graph::conv2d: channel mismatch, input " + tx.shape_str() +
                                      " vs weight " + tw.shape_str());
  require(tb.rank() == 1 && tb.dim(0) == tw.dim(0),
          "Graph::conv2d: bias must be [Cout], got " + tb.shape_str());
  Node n;
  n.op = Op::kConv2d;
  n.in = {x, w, bias};
  n.stride = stride;
  return push(std::move(n));
}

int Graph::upsample_nn2(int x) {
  check_id(x);
  require(nodes_[x].value.rank() == 3,
          "Graph::upsample_nn2: input must be [C,H,W], got " + nodes_[x].value.shape_str());
  Node n;
  n.op = Op::kUpsampleNn2;
  n.in = {x};
  return push(std::move(n));
}

int Graph::softmax(int a, int axis) {
  check_id(a);
  require(axis >= 0 && axis < nodes_[a].value.rank(), "Graph::softmax: axis out of range");
  Node n;
  n.op = Op::kSoftmax;
  n.in = {a};
  n.axis = axis;
  return push(std::move(n));
}

int Graph::batchnorm_train(int x, int gamma, int beta) {
  check_id(x);
  check_id(gamma);
  check_id(beta);
  const Tensor& tx = nodes_[x].value;
  require(tx.rank() == 3, "Graph::batchnorm_train: input must be [C,H,W], got " + tx.shape_str());
  const int c = tx.dim(0);
  require(nodes_[gamma].value.rank() == 1 && nodes_[gamma].value.dim(0) == c,
          "Graph::batchnorm_train: gamma must be [C]");
  require(nodes_[beta].value.rank() == 1 && nodes_[beta].value.dim(0) == c,
          "Graph::batchnorm_train: beta must be [C]");
  Node n;
  n.op = Op::kBnTrain;
  n.in = {x, gamma, beta};
  return push(std::move(n));
}

int Graph::batchnorm_infer(int x, int gamma, int beta, int run_mean, int run_var) {
  check_id(x);
  check_id(gamma);
  check_id(beta);
  check_id(run_mean);
  check_id(run_var);
  const Tensor& tx = nodes_[x].value;
  require(tx.rank() == 3, "Graph::batchnorm_infer: input must be [C,H,W], got " + tx.shape_str());
  const int c = tx.dim(0);
  for (int id : {gamma, beta, run_mean, run_var}) {
    require(nodes_[id].value.rank() == 1 && nodes_[id].value.dim(0) == c,
            "Graph::batchnorm_infer: per-channel vectors must be [C]");
  }
  require(nodes_[run_mean].op == Op::kInput && nodes_[run_var].op == Op::kInput,
          "Graph::batchnorm_infer: running statistics must be constant inputs");
  Node n;
  n.op = Op::kBnInfer;
  n.in = {x, gamma, beta, run_mean, run_var};
  return push(std::move(n));
}

int Graph::l2_normalize(int a, int axis) {
  check_id(a);
  require(axis >= 0 && axis < nodes_[a].value.rank(), "Graph::l2_normalize: axis out of range");
  Node n;
  n.op = Op::kL2Normalize;
  n.in = {a};
  n.axis = axis;
  return push(std::move(n));
}

int Graph::reduce_sum(int a, int axis) {
  check_id(a);
  require(axis >= 0 && axis < nodes_[a].value.rank(), "Graph::reduce_sum: axis out of range");
  Node n;
  n.op = Op::kReduceSumAxis;
  n.in = {a};
  n.axis = axis;
  return push(std::move(n));
}

int Graph::reduce_mean(int a, int axis) {
  check_id(a);
  require(axis >= 0 && axis < nodes_[a].value.rank(), "Graph::reduce_mean: axis out of range");
  const double inv = 1.0 / nodes_[a].value.dim(axis);
  return scalar_mul(reduce_sum(a, axis), inv);
}

int Graph::reduce_sum_all(int a) {
  check_id(a);
  Node n;
  n.op = Op::kReduceSumAll;
  n.in = {a};
  return push(std::move(n));
}

int Graph::reduce_mean_all(int a) {
  check_id(a);
  Node n;
  n.op = Op::kReduceMeanAll;
  n.in = {a};
  return push(std::move(n));
}

const Tensor& Graph::value(int id) const {
  check_id(id);
  return nodes_[static_cast<std::size_t>(id)].value;
}

const Tensor& Graph::bn_batch_mean(int id) const {
  check_id(id);
  require(nodes_[static_cast<std::size_t>(id)].op == Op::kBnTrain,
          "Graph::bn_batch_mean: node is not batchnorm_train");
  return nodes_[static_cast<std::size_t>(id)].aux_mean;
}

const Tensor& Graph::bn_batch_var(int id) const {
  check_id(id);
  require(nodes_[static_cast<std::size_t>(id)].op == Op::kBnTrain,
          "Graph::bn_batch_var: node is not batchnorm_train");
  return nodes_[static_cast<std::size_t>(id)].aux_var;
}

bool Graph::has_param(const std::string& name) const {
  return param_lookup_.find(name) != param_lookup_.end();
}

Tensor& Graph::param_value(const std::string& name) {
  auto it = param_lookup_.find(name);
  require(it != param_lookup_.end(), "Graph: unknown parameter '" + name + "'");
  return nodes_[static_cast<std::size_t>(it->second)].value;
}

ParamGroup Graph::param_group(const std::string& name) const {
  auto it = param_lookup_.find(name);
  require(it != param_lookup_.end(), "Graph: unknown parameter '" + name + "'");
  return nodes_[static_cast<std::size_t>(it->second)].group;
}

// ---------------------------------------------------------------------------
// Forward evaluation
// ---------------------------------------------------------------------------

void Graph::eval_node(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  switch (n.op) {
    case Op::kInput:
    case Op::kParam:
      break;
    case Op::kAdd: {
      const Tensor& a = in_val(n, 0);
      const Tensor& b = in_val(n, 1);
      if (!n.value.same_shape(a)) n.value = Tensor(a.shape());
      for (int i = 0; i < a.numel(); ++i) n.value[i] = a[i] + b[i];
      break;
    }
    case Op::kSub: {
      const Tensor& a = in_val(n, 0);
      const Tensor& b = in_val(n, 1);
      if (!n.value.same_shape(a)) n.value = Tensor(a.shape());
      for (int i = 0; i < a.numel(); ++i) n.value[i] = a[i] - b[i];
      break;
    }
    case Op::kMul: {
      const Tensor& a = in_val(n, 0);
      const Tensor& b = in_val(n, 1);
      if (!n.value.same_shape(a)) n.value = Tensor(a.shape());
      for (int i = 0; i < a.numel(); ++i) n.value[i] = a[i] * b[i];
      break;
    }
    case Op::kScalarMul: {
      const Tensor& a = in_val(n, 0);
      if (!n.value.same_shape(a)) n.value = Tensor(a.shape());
      for (int i = 0; i < a.numel(); ++i) n.value[i] = n.scalar * a[i];
      break;
    }
    case Op::kRelu: {
      const Tensor& a = in_val(n, 0);
      if (!n.value.same_shape(a)) n.value = Tensor(a.shape());
      for (int i = 0; i < a.numel(); ++i) n.value[i] = a[i] > 0.0 ? a[i] : 0.0;
      break;
    }
    case Op::kLog: {
      const Tensor& a = in_val(n, 0);
      if (!n.value.same_shape(a)) n.value = Tensor(a.shape());
      for (int i = 0; i < a.numel(); ++i) n.value[i] = std::log(a[i]);
      break;
    }
    case Op::kMatMul: {
      const Tensor& a = in_val(n, 0);
      const Tensor& b = in_val(n, 1);
      const int m = a.dim(0), k = a.dim(1), p = b.dim(1);
      if (n.value.rank() != 2 || n.value.dim(0) != m || n.value.dim(1) != p)
        n.value = Tensor({m, p});
      MapCM ma(a.data(), m, k);
      MapCM mb(b.data(), k, p);
      MapM mo(n.value.data(), m, p);
      mo.noalias() = ma * mb;
      break;
    }
    case Op::kTranspose: {
      const Tensor& a = in_val(n, 0);
      const int m = a.dim(0), k = a.dim(1);
      if (n.value.rank() != 2 || n.value.dim(0) != k || n.value.dim(1) != m)
        n.value = Tensor({k, m});
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j) n.value.at(j, i) = a.at(i, j);
      break;
    }
    case Op::kAddBiasCol: {
      const Tensor& x = in_val(n, 0);
      const Tensor& b = in_val(n, 1);
      if (!n.value.same_shape(x)) n.value = Tensor(x.shape());
      const int m = x.dim(0), cols = x.dim(1);
      for (int i = 0; i < m; ++i) {
        const double bi = b[i];
        for (int j = 0; j < cols; ++j) n.value.at(i, j) = x.at(i, j) + bi;
      }
      break;
    }
    case Op::kReshape: {
      const Tensor& a = in_val(n, 0);
      n.value = Tensor(n.indices, a.values());
      break;
    }
    case Op::kGather: {
      const Tensor& a = in_val(n, 0);
      std::vector<int> oshape = a.shape();
      oshape[static_cast<std::size_t>(n.axis)] = static_cast<int>(n.indices.size());
      if (n.value.shape() != oshape) n.value = Tensor(oshape);
      const int outer = prod_range(a.shape(), 0, n.axis);
      const int len = a.dim(n.axis);
      const int inner = prod_range(a.shape(), n.axis + 1, a.rank());
      const int olen = static_cast<int>(n.indices.size());
      for (int o = 0; o < outer; ++o) {
        for (int k = 0; k < olen; ++k) {
          const double* src = a.data() + (static_cast<long>(o) * len + n.indices[static_cast<std::size_t>(k)]) * inner;
          double* dst = n.value.data() + (static_cast<long>(o) * olen + k) * inner;
          std::copy(src, src + inner, dst);
        }
      }
      break;
    }
    case Op::kConv2d: {
      const Tensor& x = in_val(n, 0);
      const Tensor& w = in_val(n, 1);
      const Tensor& b = in_val(n, 2);
      const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
      const int cout = w.dim(0);
      const int oh = conv_out(h, n.stride), ow = conv_out(wd, n.stride);
      if (n.value.rank() != 3 || n.value.dim(0) != cout || n.value.dim(1) != oh ||
          n.value.dim(2) != ow)
        n.value = Tensor({cout, oh, ow});
      // im2col: [cin*9, oh*ow]
      const int krows = cin * 9;
      const int ocols = oh * ow;
      scratch_.assign(static_cast<std::size_t>(krows) * ocols, 0.0);
      for (int ci = 0; ci < cin; ++ci) {
        for (int ky = 0; ky < 3; ++ky) {
          for (int kx = 0; kx < 3; ++kx) {
            double* row = scratch_.data() + static_cast<std::size_t>((ci * 9 + ky * 3 + kx)) * ocols;
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * n.stride + ky - 1;
              if (iy < 0 || iy >= h) continue;
              for (int ox = 0; ox < ow; ++ox) {
                const int ix = ox * n.stride + kx - 1;
                if (ix < 0 || ix >= wd) continue;
                row[oy * ow + ox] = x.at(ci, iy, ix);
              }
            }
          }
        }
      }
      MapCM mw(w.data(), cout, krows);
      MapCM mc(scratch_.data(), krows, ocols);
      MapM mo(n.value.data(), cout, ocols);
      mo.noalias() = mw * mc;
      for (int co = 0; co < cout; ++co) mo.row(co).array() += b[co];
      break;
    }
    case Op::kUpsampleNn2: {
      const Tensor& x = in_val(n, 0);
      const int c = x.dim(0), h = x.dim(1), wd = x.dim(2);
      if (n.value.rank() != 3 || n.value.dim(0) != c || n.value.dim(1) != 2 * h ||
          n.value.dim(2) != 2 * wd)
        n.value = Tensor({c, 2 * h, 2 * wd});
      for (int ci = 0; ci < c; ++ci)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < wd; ++j) {
            const double v = x.at(ci, i, j);
            n.value.at(ci, 2 * i, 2 * j) = v;
            n.value.at(ci, 2 * i, 2 * j + 1) = v;
            n.value.at(ci, 2 * i + 1, 2 * j) = v;
            n.value.at(ci, 2 * i + 1, 2 * j + 1) = v;
          }
      break;
    }
    case Op::kSoftmax: {
      const Tensor& a = in_val(n, 0);
      if (!n.value.same_shape(a)) n.value = Tensor(a.shape());
      const int outer = prod_range(a.shape(), 0, n.axis);
      const int len = a.dim(n.axis);
      const int inner = prod_range(a.shape(), n.axis + 1, a.rank());
      for (int o = 0; o < outer; ++o) {
        for (int i = 0; i < inner; ++i) {
          const double* src = a.data() + static_cast<long>(o) * len * inner + i;
          double* dst = n.value.data() + static_cast<long>(o) * len * inner + i;
          double mx = src[0];
          for (int k = 1; k < len; ++k) mx = std::max(mx, src[static_cast<long>(k) * inner]);
          double sum = 0.0;
          for (int k = 0; k < len; ++k) {
            const double e = std::exp(src[static_cast<long>(k) * inner] - mx);
            dst[static_cast<long>(k) * inner] = e;
            sum += e;
          }
          const double inv = 1.0 / sum;
          for (int k = 0; k < len; ++k) dst[static_cast<long>(k) * inner] *= inv;
        }
      }
      break;
    }
    case Op::kBnTrain: {
      const Tensor& x = in_val(n, 0);
      const Tensor& gamma = in_val(n, 1);
      const Tensor& beta = in_val(n, 2);
      const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
      if (!n.value.same_shape(x)) n.value = Tensor(x.shape());
      if (n.aux_mean.numel() != c) n.aux_mean = Tensor({c});
      if (n.aux_var.numel() != c) n.aux_var = Tensor({c});
      for (int ci = 0; ci < c; ++ci) {
        const double* xc = x.data() + static_cast<long>(ci) * hw;
        double mu = 0.0;
        for (int i = 0; i < hw; ++i) mu += xc[i];
        mu /= hw;
        double var = 0.0;
        for (int i = 0; i < hw; ++i) {
          const double d = xc[i] - mu;
          var += d * d;
        }
        var /= hw;  // biased, matches the unit-variance contract
        n.aux_mean[ci] = mu;
        n.aux_var[ci] = var;
        const double inv_sigma = 1.0 / std::sqrt(var + kBnEps);
        const double g = gamma[ci], bt = beta[ci];
        double* yc = n.value.data() + static_cast<long>(ci) * hw;
        for (int i = 0; i < hw; ++i) yc[i] = g * (xc[i] - mu) * inv_sigma + bt;
      }
      break;
    }
    case Op::kBnInfer: {
      const Tensor& x = in_val(n, 0);
      const Tensor& gamma = in_val(n, 1);
      const Tensor& beta = in_val(n, 2);
      const Tensor& rm = in_val(n, 3);
      const Tensor& rv = in_val(n, 4);
      const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
      if (!n.value.same_shape(x)) n.value = Tensor(x.shape());
      for (int ci = 0; ci < c; ++ci) {
        const double inv_sigma = 1.0 / std::sqrt(rv[ci] + kBnEps);
        const double g = gamma[ci], bt = beta[ci], mu = rm[ci];
        const double* xc = x.data() + static_cast<long>(ci) * hw;
        double* yc = n.value.data() + static_cast<long>(ci) * hw;
        for (int i = 0; i < hw; ++i) yc[i] = g * (xc[i] - mu) * inv_sigma + bt;
      }
      break;
    }
    case Op::kL2Normalize: {
      const Tensor& a = in_val(n, 0);
      if (!n.value.same_shape(a)) n.value = Tensor(a.shape());
      const int outer = prod_range(a.shape(), 0, n.axis);
      const int len = a.dim(n.axis);
      const int inner = prod_range(a.shape(), n.axis + 1, a.rank());
      for (int o = 0; o < outer; ++o) {
        for (int i = 0; i < inner; ++i) {
          const double* src = a.data() + static_cast<long>(o) * len * inner + i;
          double* dst = n.value.data() + static_cast<long>(o) * len * inner + i;
          double ss = kL2Eps;
          for (int k = 0; k < len; ++k) {
            const double v = src[static_cast<long>(k) * inner];
            ss += v * v;
          }
          const double inv = 1.0 / std::sqrt(ss);
          for (int k = 0; k < len; ++k)
            dst[static_cast<long>(k) * inner] = src[static_cast<long>(k) * inner] * inv;
        }
      }
      break;
    }
    case Op::kReduceSumAxis: {
      const Tensor& a = in_val(n, 0);
      std::vector<int> oshape;
      for (int i = 0; i < a.rank(); ++i)
        if (i != n.axis) oshape.push_back(a.dim(i));
      if (oshape.empty()) oshape.push_back(1);
      if (n.value.shape() != oshape) n.value = Tensor(oshape);
      const int outer = prod_range(a.shape(), 0, n.axis);
      const int len = a.dim(n.axis);
      const int inner = prod_range(a.shape(), n.axis + 1, a.rank());
      for (int o = 0; o < outer; ++o) {
        for (int i = 0; i < inner; ++i) {
          const double* src = a.data() + static_cast<long>(o) * len * inner + i;
          double s = 0.0;
          for (int k = 0; k < len; ++k) s += src[static_cast<long>(k) * inner];
          n.value[o * inner + i] = s;
        }
      }
      break;
    }
    case Op::kReduceSumAll: {
      const Tensor& a = in_val(n, 0);
      if (n.value.numel() != 1) n.value = Tensor({1});
      double s = 0.0;
      for (int i = 0; i < a.numel(); ++i) s += a[i];
      n.value[0] = s;
      break;
    }
    case Op::kReduceMeanAll: {
      const Tensor& a = in_val(n, 0);
      if (n.value.numel() != 1) n.value = Tensor({1});
      double s = 0.0;
      for (int i = 0; i < a.numel(); ++i) s += a[i];
      n.value[0] = s / a.numel();
      break;
    }
  }
  for (int i = 0; i < n.value.numel(); ++i) {
    if (!std::isfinite(n.value[i])) {
      throw std::runtime_error("Graph: non-finite value produced by node " + std::to_string(id));
    }
  }
}

void Graph::recompute() {
  for (int i = 0; i < num_nodes(); ++i) {
    if (nodes_[static_cast<std::size_t>(i)].op == Op::kInput ||
        nodes_[static_cast<std::size_t>(i)].op == Op::kParam)
      continue;
    eval_node(i);
  }
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

GradientMap Graph::backprop(int loss) const {
  check_id(loss);
  const Tensor& lv = nodes_[static_cast<std::size_t>(loss)].value;
  if (lv.numel() != 1) {
    throw std::invalid_argument("Graph::backprop: loss must be scalar, got " + lv.shape_str());
  }

  std::vector<std::vector<double>> adj(nodes_.size());
  adj[static_cast<std::size_t>(loss)].assign(1, 1.0);

  auto grad_of = [&adj, this](int id) -> std::vector<double>& {
    auto& g = adj[static_cast<std::size_t>(id)];
    if (g.empty()) g.assign(static_cast<std::size_t>(nodes_[static_cast<std::size_t>(id)].value.numel()), 0.0);
    return g;
  };

  for (int id = loss; id >= 0; --id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    const auto& g = adj[static_cast<std::size_t>(id)];
    if (g.empty()) continue;  // not on any path to the loss
    switch (n.op) {
      case Op::kInput:
      case Op::kParam:
        break;
      case Op::kAdd: {
        auto& ga = grad_of(n.in[0]);
        auto& gb = grad_of(n.in[1]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i];
          gb[i] += g[i];
        }
        break;
      }
      case Op::kSub: {
        auto& ga = grad_of(n.in[0]);
        auto& gb = grad_of(n.in[1]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i];
          gb[i] -= g[i];
        }
        break;
      }
      case Op::kMul: {
        const Tensor& a = in_val(n, 0);
        const Tensor& b = in_val(n, 1);
        auto& ga = grad_of(n.in[0]);
        auto& gb = grad_of(n.in[1]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i] * b[static_cast<int>(i)];
          gb[i] += g[i] * a[static_cast<int>(i)];
        }
        break;
      }
      case Op::kScalarMul: {
        auto& ga = grad_of(n.in[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += n.scalar * g[i];
        break;
      }
      case Op::kRelu: {
        const Tensor& a = in_val(n, 0);
        auto& ga = grad_of(n.in[0]);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (a[static_cast<int>(i)] > 0.0) ga[i] += g[i];
        break;
      }
      case Op::kLog: {
        const Tensor& a = in_val(n, 0);
        auto& ga = grad_of(n.in[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / a[static_cast<int>(i)];
        break;
      }
      case Op::kMatMul: {
        const Tensor& a = in_val(n, 0);
        const Tensor& b = in_val(n, 1);
        const int m = a.dim(0), k = a.dim(1), p = b.dim(1);
        auto& ga = grad_of(n.in[0]);
        auto& gb = grad_of(n.in[1]);
        MapCM mg(g.data(), m, p);
        MapCM ma(a.data(), m, k);
        MapCM mb(b.data(), k, p);
        MapM mga(ga.data(), m, k);
        MapM mgb(gb.data(), k, p);
        mga.noalias() += mg * mb.transpose();
        mgb.noalias() += ma.transpose() * mg;
        break;
      }
      case Op::kTranspose: {
        const Tensor& a = in_val(n, 0);
        const int m = a.dim(0), k = a.dim(1);
        auto& ga = grad_of(n.in[0]);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < k; ++j) ga[static_cast<std::size_t>(i * k + j)] += g[static_cast<std::size_t>(j * m + i)];
        break;
      }
      case Op::kAddBiasCol: {
        const Tensor& x = in_val(n, 0);
        const int m = x.dim(0), cols = x.dim(1);
        auto& gx = grad_of(n.in[0]);
        auto& gb = grad_of(n.in[1]);
        for (int i = 0; i < m; ++i) {
          double s = 0.0;
          for (int j = 0; j < cols; ++j) {
            const std::size_t idx = static_cast<std::size_t>(i * cols + j);
            gx[idx] += g[idx];
            s += g[idx];
          }
          gb[static_cast<std::size_t>(i)] += s;
        }
        break;
      }
      case Op::kReshape: {
        auto& ga = grad_of(n.in[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        break;
      }
      case Op::kGather: {
        const Tensor& a = in_val(n, 0);
        auto& ga = grad_of(n.in[0]);
        const int outer = prod_range(a.shape(), 0, n.axis);
        const int len = a.dim(n.axis);
        const int inner = prod_range(a.shape(), n.axis + 1, a.rank());
        const int olen = static_cast<int>(n.indices.size());
        for (int o = 0; o < outer; ++o) {
          for (int k = 0; k < olen; ++k) {
            const double* src = g.data() + (static_cast<long>(o) * olen + k) * inner;
            double* dst = ga.data() + (static_cast<long>(o) * len + n.indices[static_cast<std::size_t>(k)]) * inner;
            for (int i = 0; i < inner; ++i) dst[i] += src[i];
          }
        }
        break;
      }
      case Op::kConv2d: {
        const Tensor& x = in_val(n, 0);
        const Tensor& w = in_val(n, 1);
        const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
        const int cout = w.dim(0);
        const int oh = conv_out(h, n.stride), ow = conv_out(wd, n.stride);
        const int krows = cin * 9;
        const int ocols = oh * ow;
        auto& gx = grad_of(n.in[0]);
        auto& gw = grad_of(n.in[1]);
        auto& gb = grad_of(n.in[2]);
        // bias
        for (int co = 0; co < cout; ++co) {
          double s = 0.0;
          const double* gr = g.data() + static_cast<long>(co) * ocols;
          for (int i = 0; i < ocols; ++i) s += gr[i];
          gb[static_cast<std::size_t>(co)] += s;
        }
        // rebuild im2col of the input
        std::vector<double> cols(static_cast<std::size_t>(krows) * ocols, 0.0);
        for (int ci = 0; ci < cin; ++ci)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              double* row = cols.data() + static_cast<std::size_t>((ci * 9 + ky * 3 + kx)) * ocols;
              for (int oy = 0; oy < oh; ++oy) {
                const int iy = oy * n.stride + ky - 1;
                if (iy < 0 || iy >= h) continue;
                for (int ox = 0; ox < ow; ++ox) {
                  const int ix = ox * n.stride + kx - 1;
                  if (ix < 0 || ix >= wd) continue;
                  row[oy * ow + ox] = x.at(ci, iy, ix);
                }
              }
            }
        MapCM mg(g.data(), cout, ocols);
        MapCM mcols(cols.data(), krows, ocols);
        MapM mgw(gw.data(), cout, krows);
        mgw.noalias() += mg * mcols.transpose();
        // dcols = W^T * g, then scatter back (col2im)
        std::vector<double> dcols(static_cast<std::size_t>(krows) * ocols);
        MapCM mw(w.data(), cout, krows);
        MapM mdc(dcols.data(), krows, ocols);
        mdc.noalias() = mw.transpose() * mg;
        for (int ci = 0; ci < cin; ++ci)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const double* row = dcols.data() + static_cast<std::size_t>((ci * 9 + ky * 3 + kx)) * ocols;
              for (int oy = 0; oy < oh; ++oy) {
                const int iy = oy * n.stride + ky - 1;
                if (iy < 0 || iy >= h) continue;
                for (int ox = 0; ox < ow; ++ox) {
                  const int ix = ox * n.stride + kx - 1;
                  if (ix < 0 || ix >= wd) continue;
                  gx[static_cast<std::size_t>((ci * h + iy) * wd + ix)] += row[oy * ow + ox];
                }
              }
            }
        break;
      }
      case Op::kUpsampleNn2: {
        const Tensor& x = in_val(n, 0);
        const int c = x.dim(0), h = x.dim(1), wd = x.dim(2);
        auto& gx = grad_of(n.in[0]);
        for (int ci = 0; ci < c; ++ci)
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < wd; ++j) {
              const long base = (static_cast<long>(ci) * 2 * h + 2 * i) * 2 * wd + 2 * j;
              gx[static_cast<std::size_t>((ci * h + i) * wd + j)] +=
                  g[static_cast<std::size_t>(base)] + g[static_cast<std::size_t>(base + 1)] +
                  g[static_cast<std::size_t>(base + 2 * wd)] + g[static_cast<std::size_t>(base + 2 * wd + 1)];
            }
        break;
      }
      case Op::kSoftmax: {
        const Tensor& y = n.value;
        auto& ga = grad_of(n.in[0]);
        const int outer = prod_range(y.shape(), 0, n.axis);
        const int len = y.dim(n.axis);
        const int inner = prod_range(y.shape(), n.axis + 1, y.rank());
        for (int o = 0; o < outer; ++o) {
          for (int i = 0; i < inner; ++i) {
            const long base = static_cast<long>(o) * len * inner + i;
            double s = 0.0;
            for (int k = 0; k < len; ++k)
              s += g[static_cast<std::size_t>(base + static_cast<long>(k) * inner)] * y[static_cast<int>(base + static_cast<long>(k) * inner)];
            for (int k = 0; k < len; ++k) {
              const long at = base + static_cast<long>(k) * inner;
              ga[static_cast<std::size_t>(at)] += y[static_cast<int>(at)] * (g[static_cast<std::size_t>(at)] - s);
            }
          }
        }
        break;
      }
      case Op::kBnTrain: {
        const Tensor& x = in_val(n, 0);
        const Tensor& gamma = in_val(n, 1);
        const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
        auto& gx = grad_of(n.in[0]);
        auto& ggamma = grad_of(n.in[1]);
        auto& gbeta = grad_of(n.in[2]);
        for (int ci = 0; ci < c; ++ci) {
          const double mu = n.aux_mean[ci];
          const double inv_sigma = 1.0 / std::sqrt(n.aux_var[ci] + kBnEps);
          const double* xc = x.data() + static_cast<long>(ci) * hw;
          const double* gc = g.data() + static_cast<long>(ci) * hw;
          double sum_g = 0.0, sum_gx = 0.0;
          for (int i = 0; i < hw; ++i) {
            const double xhat = (xc[i] - mu) * inv_sigma;
            sum_g += gc[i];
            sum_gx += gc[i] * xhat;
          }
          ggamma[static_cast<std::size_t>(ci)] += sum_gx;
          gbeta[static_cast<std::size_t>(ci)] += sum_g;
          const double mean_g = sum_g / hw;
          const double mean_gx = sum_gx / hw;
          const double scale = gamma[ci] * inv_sigma;
          double* gxc = gx.data() + static_cast<long>(ci) * hw;
          for (int i = 0; i < hw; ++i) {
            const double xhat = (xc[i] - mu) * inv_sigma;
            gxc[i] += scale * (gc[i] - mean_g - xhat * mean_gx);
          }
        }
        break;
      }
      case Op::kBnInfer: {
        const Tensor& x = in_val(n, 0);
        const Tensor& gamma = in_val(n, 1);
        const Tensor& rm = in_val(n, 3);
        const Tensor& rv = in_val(n, 4);
        const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
        auto& gx = grad_of(n.in[0]);
        auto& ggamma = grad_of(n.in[1]);
        auto& gbeta = grad_of(n.in[2]);
        for (int ci = 0; ci < c; ++ci) {
          const double inv_sigma = 1.0 / std::sqrt(rv[ci] + kBnEps);
          const double mu = rm[ci];
          const double scale = gamma[ci] * inv_sigma;
          const double* xc = x.data() + static_cast<long>(ci) * hw;
          const double* gc = g.data() + static_cast<long>(ci) * hw;
          double* gxc = gx.data() + static_cast<long>(ci) * hw;
          double sum_g = 0.0, sum_gx = 0.0;
          for (int i = 0; i < hw; ++i) {
            gxc[i] += scale * gc[i];
            sum_g += gc[i];
            sum_gx += gc[i] * (xc[i] - mu) * inv_sigma;
          }
          ggamma[static_cast<std::size_t>(ci)] += sum_gx;
          gbeta[static_cast<std::size_t>(ci)] += sum_g;
        }
        break;
      }
      case Op::kL2Normalize: {
        const Tensor& a = in_val(n, 0);
        auto& ga = grad_of(n.in[0]);
        const int outer = prod_range(a.shape(), 0, n.axis);
        const int len = a.dim(n.axis);
        const int inner = prod_range(a.shape(), n.axis + 1, a.rank());
        for (int o = 0; o < outer; ++o) {
          for (int i = 0; i < inner; ++i) {
            const long base = static_cast<long>(o) * len * inner + i;
            double ss = kL2Eps, dot = 0.0;
            for (int k = 0; k < len; ++k) {
              const long at = base + static_cast<long>(k) * inner;
              ss += a[static_cast<int>(at)] * a[static_cast<int>(at)];
              dot += g[static_cast<std::size_t>(at)] * a[static_cast<int>(at)];
            }
            const double r = std::sqrt(ss);
            const double inv_r = 1.0 / r;
            const double inv_r3 = inv_r * inv_r * inv_r;
            for (int k = 0; k < len; ++k) {
              const long at = base + static_cast<long>(k) * inner;
              ga[static_cast<std::size_t>(at)] +=
                  g[static_cast<std::size_t>(at)] * inv_r - a[static_cast<int>(at)] * dot * inv_r3;
            }
          }
        }
        break;
      }
      case Op::kReduceSumAxis: {
        const Tensor& a = in_val(n, 0);
        auto& ga = grad_of(n.in[0]);
        const int outer = prod_range(a.shape(), 0, n.axis);
        const int len = a.dim(n.axis);
        const int inner = prod_range(a.shape(), n.axis + 1, a.rank());
        for (int o = 0; o < outer; ++o)
          for (int k = 0; k < len; ++k)
            for (int i = 0; i < inner; ++i)
              ga[static_cast<std::size_t>((static_cast<long>(o) * len + k) * inner + i)] +=
                  g[static_cast<std::size_t>(o * inner + i)];
        break;
      }
      case Op::kReduceSumAll: {
        auto& ga = grad_of(n.in[0]);
        for (auto& v : ga) v += g[0];
        break;
      }
      case Op::kReduceMeanAll: {
        auto& ga = grad_of(n.in[0]);
        const double s = g[0] / static_cast<double>(ga.size());
        for (auto& v : ga) v += s;
        break;
      }
    }
  }

  GradientMap out;
  for (const auto& name : param_names_) {
    const int id = param_lookup_.at(name);
    const Node& pn = nodes_[static_cast<std::size_t>(id)];
    const auto& g = adj[static_cast<std::size_t>(id)];
    if (g.empty()) {
      out.emplace(name, Tensor::zeros(pn.value.shape()));
    } else {
      out.emplace(name, Tensor(pn.value.shape(), g));
    }
  }
  return out;
}

double Graph::finite_diff_check(int loss, double eps) {
  check_id(loss);
  if (!(eps > 0.0 && eps <= 1e-2)) {
    throw std::invalid_argument("Graph::finite_diff_check: eps must be in (0, 1e-2]");
  }
  if (nodes_[static_cast<std::size_t>(loss)].value.numel() != 1) {
    throw std::invalid_argument("Graph::finite_diff_check: loss must be scalar");
  }
  const GradientMap grads = backprop(loss);

  double worst = 0.0;
  for (const auto& name : param_names_) {
    const int pid = param_lookup_.at(name);
    if (pid > loss) continue;  // cannot influence the loss
    // Nodes downstream of this parameter, up to the loss.
    std::vector<char> affected(static_cast<std::size_t>(loss) + 1, 0);
    affected[static_cast<std::size_t>(pid)] = 1;
    for (int i = pid + 1; i <= loss; ++i) {
      const Node& n = nodes_[static_cast<std::size_t>(i)];
      for (int in_id : n.in) {
        if (in_id <= loss && affected[static_cast<std::size_t>(in_id)]) {
          affected[static_cast<std::size_t>(i)] = 1;
          break;
        }
      }
    }
    auto eval_affected = [&]() {
      for (int i = pid + 1; i <= loss; ++i)
        if (affected[static_cast<std::size_t>(i)]) eval_node(i);
    };
    Tensor& pv = nodes_[static_cast<std::size_t>(pid)].value;
    const Tensor& pg = grads.at(name);
    for (int i = 0; i < pv.numel(); ++i) {
      const double v0 = pv[i];
      pv[i] = v0 + eps;
      eval_affected();
      const double lp = nodes_[static_cast<std::size_t>(loss)].value[0];
      pv[i] = v0 - eps;
      eval_affected();
      const double lm = nodes_[static_cast<std::size_t>(loss)].value[0];
      pv[i] = v0;
      const double fd = (lp - lm) / (2.0 * eps);
      const double denom = std::max({std::abs(fd), std::abs(pg[i]), 1e-12});
      worst = std::max(worst, std::abs(fd - pg[i]) / denom);
    }
    eval_affected();  // restore values downstream of this parameter
  }
  recompute();
  return worst;
}

}  // namespace segda
