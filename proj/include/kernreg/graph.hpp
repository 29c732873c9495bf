#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kernreg/tensor.hpp"

namespace kernreg {

// Primitive operations. The set is closed under reverse-mode differentiation:
// every VJP below is expressed with these same primitives, so a differentiated
// graph can be differentiated again (double backpropagation).
enum class Op : std::uint8_t {
    kParam, kInput, kConst,
    kAdd, kSub, kMul, kScale, kAddC,
    kMatMul, kTranspose,
    kConv2d, kConv2dInputGrad, kConv2dWeightGrad,
    kAvgPool2, kAvgPool2Grad,
    kRelu, kStep, kSoftplus, kSigmoid,
    kSquare, kSqrt, kRecip, kExp, kLog,
    kReshape, kSumAll, kBroadcast,
    kSumAxis, kMaxAxis, kScatterMaxAxis, kGatherMaxAxis, kExpand,
    kCol, kColScatter,
};

const char* op_name(Op op);

enum class LeafKind { param, input };

struct Node {
    Op op;
    std::int32_t a = -1;
    std::int32_t b = -1;
    Shape shape;
    double c = 0.0;                  // scale factor / added constant / softplus-sigmoid beta
    std::vector<std::int64_t> attr;  // op-specific integers (stride, pads, axis, column, ...)
    Tensor value;                    // kConst payload
    std::string name;                // leaf name
};

using Bindings = std::map<std::string, Tensor>;

// Recorded computation over tensors. Nodes are appended in topological order
// (parents always precede children) and never mutated, so evaluation of a
// built graph is safe to share across threads. backward() appends the adjoint
// computation to the same node list; the result is again a plain graph over
// the same leaves and can be differentiated once more.
class Graph {
public:
    // leaves
    int param(std::string name, Shape s);
    int input(std::string name, Shape s);
    int constant(Tensor t);

    // primitives
    int add(int a, int b);
    int sub(int a, int b);
    int mul(int a, int b);
    int scale(int a, double c);
    int add_const(int a, double c);
    int matmul(int a, int b);
    int transpose(int a);
    int conv2d(int x, int w, std::int64_t stride, std::int64_t ph, std::int64_t pw);
    int avgpool2(int x);
    int relu(int a);
    int step_mask(int a);  // 1 where input > 0; treated as constant by backward
    int softplus(int a, double beta);
    int sigmoid(int a, double beta);
    int square(int a);
    int sqrt_node(int a);
    int recip(int a);
    int exp_node(int a);
    int log_node(int a);
    int reshape(int a, Shape s);
    int sum_all(int a);
    int broadcast(int a, Shape s);  // scalar -> s
    int sum_axis(int a, int axis);  // keeps the axis with size 1
    int max_axis(int a, int axis);  // ties resolve to the first maximum
    int expand(int a, int axis, std::int64_t n);
    int col(int a, std::int64_t j);  // (n,K) -> (n,1)

    // composites
    int neg(int a) { return scale(a, -1.0); }
    int abs_node(int a) { return add(relu(a), relu(neg(a))); }
    int sq_l2(int a) { return sum_all(square(a)); }
    int l2norm(int a) { return sqrt_node(sq_l2(a)); }
    int l1norm(int a) { return sum_all(abs_node(a)); }
    int mean_all(int a);
    int global_maxpool(int x);                            // (n,c,h,w) -> (n,c)
    int maxpool2d(int x, std::int64_t kh, std::int64_t kw);  // dims must divide
    int logsumexp_rows(int z);                            // (n,K) -> (n,1)

    int n_nodes() const { return static_cast<int>(nodes_.size()); }
    const Node& at(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
    std::vector<int> leaves(LeafKind kind) const;

    Tensor eval(int root, const Bindings& b) const;
    std::vector<Tensor> eval_many(std::span<const int> roots, const Bindings& b) const;

    // Reverse mode from a scalar root. Appends adjoint nodes and returns one
    // gradient node per requested tensor, or -1 where the derivative is
    // structurally zero. Non-differentiable primitives use fixed subgradients
    // (relu'(0)=0, ties-to-first argmax); this is never an error.
    std::vector<int> backward(int root, std::span<const int> wrt);
    // Single-output convenience; returns -1 for a structural zero.
    int grad_node(int root, int wrt);

private:
    std::vector<Node> nodes_;

    int push(Node n);
    const Node& n(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
    void check_valid(int i, const char* who) const;

    // gradient-only primitives
    int conv2d_igrad(int g, int w, std::int64_t stride, std::int64_t ph, std::int64_t pw,
                     std::int64_t in_h, std::int64_t in_w);
    int conv2d_wgrad(int g, int x, std::int64_t stride, std::int64_t ph, std::int64_t pw,
                     std::int64_t kh, std::int64_t kw);
    int avgpool2_grad(int g, std::int64_t in_h, std::int64_t in_w);
    int scatter_max_axis(int g, int x, int axis);
    int gather_max_axis(int h, int x, int axis);
    int col_scatter(int s, std::int64_t j, std::int64_t ncols);
};

// Evaluates the gradient of a scalar node with respect to the given leaves,
// materializing zero tensors for leaves the root does not depend on.
std::vector<Tensor> eval_gradients(Graph& g, int root, std::span<const int> wrt, const Bindings& b);

}  // namespace kernreg
