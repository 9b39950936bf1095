#pragma once

#include <functional>
#include <string>
#include <vector>

#include "acme/param_store.hpp"
#include "acme/tensor.hpp"

namespace acme {

struct NodeRef {
  int i = -1;
  bool valid() const { return i >= 0; }
};

// Eager op recorder. Each op computes its output immediately and pushes a
// hand-derived backward closure; backward() runs the closures in reverse and
// flushes parameter-leaf gradients into their stores. The op set is closed.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  // leaves
  NodeRef input(const TensorBuf& x);  // data; no grad flows out
  NodeRef constant(TensorBuf x) { return input(x); }
  NodeRef param(ParamStore& store, const std::string& path);

  // arithmetic
  NodeRef matmul(NodeRef a, NodeRef b);
  // batched: a [N,r,c]; b [N,c,k] (or [N,k,c] when trans_b) -> [N,r,k]
  NodeRef bmm(NodeRef a, NodeRef b, bool trans_b = false);
  NodeRef add(NodeRef a, NodeRef b);
  NodeRef sub(NodeRef a, NodeRef b);
  NodeRef hadamard(NodeRef a, NodeRef b);
  NodeRef scale(NodeRef a, double c);
  NodeRef add_rowvec(NodeRef x, NodeRef v);  // v: [C], broadcast over rows
  NodeRef mul_rowvec(NodeRef x, NodeRef v);
  // broadcast multiply by a fixed (non-differentiated) per-column mask
  NodeRef colmask(NodeRef x, const Eigen::VectorXd& mask);

  // activations / nonlinearities
  NodeRef relu(NodeRef x);
  NodeRef gelu(NodeRef x);
  NodeRef tanh_(NodeRef x);
  NodeRef sigmoid_(NodeRef x);
  NodeRef log_(NodeRef x);

  // normalization
  NodeRef row_softmax(NodeRef x);    // softmax over the last dim
  NodeRef layer_norm_raw(NodeRef x); // per-row standardize, pre-affine

  // structure
  NodeRef reshape(NodeRef x, std::vector<int> shape);
  NodeRef transpose2d(NodeRef x);
  NodeRef slice_cols(NodeRef x, int begin, int len);
  NodeRef concat_cols(const std::vector<NodeRef>& xs);
  NodeRef tile_rows(NodeRef v, int rows);  // v: [1,C] -> [rows,C]
  // [B*S, H*Dh] -> [B*H, S, Dh] and back
  NodeRef to_heads(NodeRef x, int B, int S, int H, int Dh);
  NodeRef from_heads(NodeRef x, int B, int S, int H, int Dh);
  NodeRef gather_rows(NodeRef table, const std::vector<int>& idx);

  // sequence plumbing
  NodeRef prepend_cls(NodeRef cls, NodeRef tokens, int B, int P);  // cls [B,C], tokens [B*P,C]
  NodeRef add_posemb(NodeRef x, NodeRef pos, int B, int S);        // pos [S,C]
  NodeRef take_seq_pos(NodeRef x, int B, int S, int pos);          // -> [B,C]
  NodeRef drop_cls_to_grid(NodeRef x, int B, int S, int gh, int gw);  // -> [B,C,gh,gw]

  // conv / pooling on [B,C,H,W]
  NodeRef conv2d(NodeRef x, NodeRef w, NodeRef b, int k);  // same padding, stride 1
  NodeRef avg_pool3(NodeRef x);                            // 3x3 stride 1, border-clipped
  NodeRef max_pool3(NodeRef x);
  NodeRef downsample_avg2(NodeRef x);                      // 2x2 stride 2
  NodeRef global_avg_pool(NodeRef x);                      // -> [B,C]
  NodeRef channel_mask(NodeRef x, const Eigen::VectorXd& mask);  // fixed per-channel mask

  // losses / reductions (scalar nodes have shape {1})
  NodeRef cross_entropy(NodeRef logits, const std::vector<int>& labels);
  NodeRef mse(NodeRef a, NodeRef b);
  NodeRef mean_all(NodeRef x);
  NodeRef weighted_sum(const std::vector<std::pair<double, NodeRef>>& terms);

  void backward(NodeRef root);
  void backward(NodeRef root, const Eigen::VectorXd& seed);
  bool backward_done() const { return backward_done_; }

  const TensorBuf& val(NodeRef n) const { return node(n).value; }
  const std::vector<int>& shape(NodeRef n) const { return node(n).value.shape; }
  // zero vector if backward never reached the node
  const Eigen::VectorXd& grad(NodeRef n) const;
  void set_label(NodeRef n, std::string label) { node(n).label = std::move(label); }

  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    TensorBuf value;
    Eigen::VectorXd grad;
    ParamStore* store = nullptr;
    std::string label;
  };

  Node& node(NodeRef r);
  const Node& node(NodeRef r) const;
  NodeRef push(TensorBuf value, const char* op);
  Eigen::VectorXd& grad_buf(int i);
  MatMap val2d(int i);

  [[noreturn]] void shape_fail(const char* op, const std::string& detail) const;
  std::string describe(NodeRef n) const;

  std::vector<Node> nodes_;
  std::vector<std::function<void()>> back_ops_;
  bool backward_done_ = false;
  Eigen::VectorXd empty_grad_;
};

}  // namespace acme
