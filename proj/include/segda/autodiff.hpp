#pragma once

#include <map>
#include <string>
#include <vector>

#include "segda/tensor.hpp"

namespace segda {

enum class ParamGroup { kEncoder, kPixelDecoder, kSegmentDecoder, kNone };

std::string to_string(ParamGroup g);
ParamGroup param_group_from_string(const std::string& s);

using GradientMap = std::map<std::string, Tensor>;

// Reverse-mode autodiff tape with eager evaluation. Node values are computed
// at construction time; recompute() re-runs the forward pass after parameter
// values change (used by the finite-difference checker and the optimizer is
// never applied in place - training rebuilds graphs per step).
//
// Single-threaded per instance. All primitives validate shapes at build time
// and reject non-finite outputs.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  static constexpr double kBnEps = 1e-5;
  static constexpr double kL2Eps = 1e-24;  // added to the squared norm

  // Leaves.
  int input(Tensor v);
  int param(const std::string& name, Tensor v, ParamGroup group);

  // Elementwise; shapes must match exactly.
  int add(int a, int b);
  int sub(int a, int b);
  int mul(int a, int b);
  int scalar_mul(int a, double c);
  int relu(int a);
  int log(int a);

  // Linear algebra (rank 2).
  int matmul(int a, int b);
  int transpose(int a);
  int add_bias_col(int x, int bias);  // x[m,n] + bias[m] broadcast over columns

  // Shape plumbing.
  int reshape(int a, std::vector<int> shape);
  int gather(int a, int axis, std::vector<int> indices);

  // Convolution stack; x[C,H,W], w[Cout,Cin,3,3], bias[Cout], zero padding 1.
  int conv2d(int x, int w, int bias, int stride);
  int upsample_nn2(int x);

  // Normalizations and reductions.
  int softmax(int a, int axis);
  int batchnorm_train(int x, int gamma, int beta);  // x[C,H,W], stats over H,W
  int batchnorm_infer(int x, int gamma, int beta, int run_mean, int run_var);
  int l2_normalize(int a, int axis);
  int reduce_sum(int a, int axis);
  int reduce_mean(int a, int axis);
  int reduce_sum_all(int a);
  int reduce_mean_all(int a);

  const Tensor& value(int id) const;
  int num_nodes() const { return static_cast<int>(nodes_.size()); }

  // Batch statistics of a batchnorm_train node (per channel).
  const Tensor& bn_batch_mean(int id) const;
  const Tensor& bn_batch_var(int id) const;

  const std::vector<std::string>& param_names() const { return param_names_; }
  bool has_param(const std::string& name) const;
  Tensor& param_value(const std::string& name);
  ParamGroup param_group(const std::string& name) const;

  // d(loss)/d(param) for every registered parameter; parameters with no path
  // to the loss get zero tensors. The loss node must be scalar.
  GradientMap backprop(int loss) const;

  // Re-runs the forward pass over all nodes (after parameter edits).
  void recompute();

  // Central finite differences over every parameter coordinate. Returns the
  // worst relative error against backprop, with a 1e-12 floor in the
  // denominator. eps must lie in (0, 1e-2].
  double finite_diff_check(int loss, double eps);

 private:
  enum class Op {
    kInput, kParam, kAdd, kSub, kMul, kScalarMul, kRelu, kLog,
    kMatMul, kTranspose, kAddBiasCol, kReshape, kGather,
    kConv2d, kUpsampleNn2, kSoftmax, kBnTrain, kBnInfer,
    kL2Normalize, kReduceSumAxis, kReduceSumAll, kReduceMeanAll,
  };

  struct Node {
    Op op;
    std::vector<int> in;
    Tensor value;
    int axis = -1;
    int stride = 1;
    double scalar = 0.0;
    std::vector<int> indices;
    Tensor aux_mean, aux_var;  // batchnorm_train batch statistics
    std::string name;          // parameters only
    ParamGroup group = ParamGroup::kNone;
  };

  int push(Node n);
  void eval_node(int id);
  void check_id(int id) const;
  const Tensor& in_val(const Node& n, int k) const { return nodes_[static_cast<std::size_t>(n.in[static_cast<std::size_t>(k)])].value; }

  std::vector<Node> nodes_;
  std::vector<std::string> param_names_;
  std::map<std::string, int> param_lookup_;
  std::vector<double> scratch_;  // im2col buffer
};

}  // namespace segda
