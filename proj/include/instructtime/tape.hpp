#pragma once

#include <functional>
#include <vector>

#include "instructtime/tensor.hpp"

namespace instructtime::nn {

// Reverse-mode autodiff over whole tensors. A Tape lives for one forward/
// backward pass; Parameters persist across tapes and collect gradients in
// their own buffers. Nodes are processed in reverse creation order, which is
// a valid topological order because every op only consumes existing nodes.
class Tape {
  public:
    using NodeId = int;

    NodeId constant(Tensor t);               // leaf, no gradient flow
    NodeId param(Parameter& p);              // leaf, backward adds into p.grad

    NodeId add(NodeId a, NodeId b);          // same shape
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);          // elementwise
    NodeId scale(NodeId a, Real s);
    NodeId axpy(NodeId a, NodeId b, Real alpha);  // a + alpha * b, same shape
    NodeId add_rowvec(NodeId a, NodeId bias);     // [m,n] + [n]
    NodeId matmul(NodeId a, NodeId b);            // [m,k] x [k,n]
    NodeId gelu(NodeId a);
    NodeId reshape(NodeId a, std::vector<int> shape);
    NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, Real eps = 1e-5);

    // Rows of `table` selected by ids; backward scatter-adds.
    NodeId gather_rows(NodeId table, std::vector<int> ids);

    // Builds a [rows, d] matrix from two row sources: row a_pos[i] comes from
    // row i of `a`, row b_pos[j] from row j of `b`. Positions must partition
    // [0, rows). Either source may be empty (id -1).
    NodeId interleave_rows(int rows, NodeId a, std::vector<int> a_pos, NodeId b, std::vector<int> b_pos);

    // Pre-norm causal multi-head self-attention over x:[T,d].
    NodeId causal_self_attention(NodeId x, NodeId wq, NodeId bq, NodeId wk, NodeId bk, NodeId wv,
                                 NodeId bv, NodeId wo, NodeId bo, int n_heads);

    // Dilated causal 1-D convolution: x:[T,Cin], w:[k,Cin,Cout], b:[Cout].
    NodeId conv1d_causal(NodeId x, NodeId w, NodeId b, int dilation);

    // Scalar losses (shape [1]).
    NodeId mse(NodeId a, Tensor target);                  // mean over all elements
    NodeId row_sqnorm_mean(NodeId a, Tensor reference);   // mean_r ||a_r - ref_r||^2

    // Straight-through: forward emits `quantized`, backward passes the
    // gradient to `a` unchanged.
    NodeId ste(NodeId a, Tensor quantized);

    // Sum over positions i>=1 with target_mask[i]=1 of -log softmax(logits
    // row i-1)[ids[i]]. Caller divides by the target count (seed scaling).
    NodeId cross_entropy_next_token(NodeId logits, std::vector<int> ids, std::vector<uint8_t> target_mask);

    void backward(NodeId root, Real seed = 1.0);

    const Tensor& val(NodeId id) const { return nodes_[id].val; }
    Tensor& grad(NodeId id) { return nodes_[id].grad; }
    Real scalar(NodeId id) const { return nodes_[id].val.v[0]; }
    size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Tensor val;
        Tensor grad;
        std::function<void(Tape&)> back;  // empty for leaves/constants
    };

    NodeId push_(Tensor val, std::function<void(Tape&)> back);

    std::vector<Node> nodes_;
};

// Exact GELU and its derivative, shared with the op implementations.
Real gelu_fn(Real x);
Real gelu_grad(Real x);

}  // namespace instructtime::nn
