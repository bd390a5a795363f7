#pragma once

// Eager reverse-mode differentiation over a recorded tape.
//
// Nodes are appended in evaluation order, so every node's inputs have smaller
// ids than the node itself. Forward values are computed when a node is
// applied; backward walks the tape once in reverse.

#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "decomp/tensor.hpp"

namespace decomp {

using NodeId = std::size_t;

enum class Op {
    input,
    parameter,
    add,
    sub,
    mul,
    matmul,
    conv2d,
    softmax,
    silu,
    group_norm,
    reshape,
    mean,
    sum,
    broadcast_add,
    square,
    scale,
    avg_pool2,
    upsample2,
    column,
    gather_rows,
    concat_rows,
    minmax_normalize,
};

std::string_view op_name(Op op) noexcept;
// Throws UnknownOpError for names outside the supported set.
Op op_from_name(std::string_view name);

class UnknownOpError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct OpAttrs {
    int axis = -1;                     // softmax
    bool trans_a = false;              // matmul
    bool trans_b = false;              // matmul
    double factor = 1.0;               // scale
    std::size_t groups = 4;            // group_norm
    double eps = 1e-5;                 // group_norm
    Shape shape;                       // reshape
    std::size_t index = 0;             // column
    std::vector<std::size_t> indices;  // gather_rows
};

class Graph {
public:
    NodeId input(Tensor value);
    NodeId parameter(Tensor value);

    NodeId apply(Op op, std::vector<NodeId> inputs, const OpAttrs& attrs = {});

    const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
    Op op(NodeId id) const { return nodes_.at(id).op; }
    std::size_t size() const noexcept { return nodes_.size(); }
    const std::vector<NodeId>& parameters() const noexcept { return params_; }
    bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }

    // Gradient of a scalar node with respect to every parameter node.
    // Parameters that the loss does not depend on receive zero tensors.
    std::map<NodeId, Tensor> backward(NodeId loss) const;

    // Overwrites a leaf value and re-evaluates every derived node in order.
    void set_leaf(NodeId id, Tensor value);
    void replay();

private:
    struct Node {
        Op op;
        std::vector<NodeId> inputs;
        OpAttrs attrs;
        Tensor value;
        bool requires_grad = false;
    };

    Tensor evaluate(const Node& node) const;

    std::vector<Node> nodes_;
    std::vector<NodeId> params_;
};

// Maximum over entries of |analytic - central difference| / (|central difference| + 1e-8)
// for the given parameter. Leaves the graph with its original values.
double fd_check(Graph& graph, NodeId loss, NodeId param, double h);

namespace ops {

NodeId add(Graph& g, NodeId a, NodeId b);
NodeId sub(Graph& g, NodeId a, NodeId b);
NodeId mul(Graph& g, NodeId a, NodeId b);
NodeId matmul(Graph& g, NodeId a, NodeId b, bool trans_a = false, bool trans_b = false);
NodeId conv2d(Graph& g, NodeId x, NodeId w);
NodeId softmax(Graph& g, NodeId x, int axis);
NodeId silu(Graph& g, NodeId x);
NodeId group_norm(Graph& g, NodeId x, NodeId gamma, NodeId beta, std::size_t groups = 4, double eps = 1e-5);
NodeId reshape(Graph& g, NodeId x, Shape shape);
NodeId mean(Graph& g, NodeId x);
NodeId sum(Graph& g, NodeId x);
NodeId broadcast_add(Graph& g, NodeId x, NodeId b);
NodeId square(Graph& g, NodeId x);
NodeId scale(Graph& g, NodeId x, double factor);
NodeId avg_pool2(Graph& g, NodeId x);
NodeId upsample2(Graph& g, NodeId x);
NodeId column(Graph& g, NodeId x, std::size_t index);
NodeId gather_rows(Graph& g, NodeId table, std::vector<std::size_t> rows);
NodeId concat_rows(Graph& g, std::vector<NodeId> parts);
NodeId minmax_normalize(Graph& g, NodeId x);

}  // namespace ops

}  // namespace decomp
