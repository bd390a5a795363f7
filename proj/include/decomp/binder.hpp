#pragma once

#include <functional>
#include <map>
#include <string>
#include <string_view>

#include "decomp/graph.hpp"

namespace decomp {

// Registers named model tensors in a graph exactly once. Tensors selected by
// the predicate become parameter nodes (they receive gradients); everything
// else enters as a constant input.
class Binder {
public:
    using Predicate = std::function<bool(std::string_view)>;

    explicit Binder(Graph& graph, Predicate trainable = [](std::string_view) { return false; })
        : graph_(graph), trainable_(std::move(trainable)) {}

    NodeId operator()(const std::string& name, const Tensor& value) {
        if (auto it = bound_.find(name); it != bound_.end()) {
            return it->second;
        }
        const bool train = trainable_(name);
        const NodeId id = train ? graph_.parameter(value) : graph_.input(value);
        bound_.emplace(name, id);
        if (train) {
            params_.emplace(name, id);
        }
        return id;
    }

    Graph& graph() noexcept { return graph_; }
    // Trainable tensors bound so far, keyed by name.
    const std::map<std::string, NodeId>& parameters() const noexcept { return params_; }

private:
    Graph& graph_;
    Predicate trainable_;
    std::map<std::string, NodeId> bound_;
    std::map<std::string, NodeId> params_;
};

}  // namespace decomp
