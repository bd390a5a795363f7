#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>

#include "decomp/tensor.hpp"

namespace decomp {

struct AdamHyper {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double weight_decay = 1e-8;
    double eps = 1e-8;
    bool decoupled = true;  // theta -= lr*wd*theta before the moment step
};

struct AdamMoments {
    Tensor m, v;
};

// One bias-corrected Adam step for a single tensor. step counts from 1.
void adam_update(std::span<double> param, std::span<const double> grad, AdamMoments& moments, const AdamHyper& h,
                 std::size_t step);

// Adam state for a set of named tensors sharing one step counter.
class Adam {
public:
    explicit Adam(AdamHyper hyper) : hyper_(hyper) {}

    // Advances the step counter; call once per optimizer step before update().
    void begin_step() { ++step_; }
    void update(const std::string& name, Tensor& param, const Tensor& grad);

    std::size_t step() const noexcept { return step_; }
    const AdamHyper& hyper() const noexcept { return hyper_; }

private:
    AdamHyper hyper_;
    std::size_t step_ = 0;
    std::map<std::string, AdamMoments> moments_;
};

}  // namespace decomp
