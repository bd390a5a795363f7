#include "decomp/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace decomp {

void adam_update(std::span<double> param, std::span<const double> grad, AdamMoments& mo, const AdamHyper& h,
                 std::size_t step) {
    if (param.size() != grad.size()) {
        throw ShapeError("adam_update: " + std::to_string(param.size()) + " params vs " +
                         std::to_string(grad.size()) + " gradients");
    }
    if (step == 0) {
        throw std::invalid_argument("adam_update: step counts from 1");
    }
    if (mo.m.numel() != param.size()) {
        mo.m = Tensor(Shape{param.size()});
        mo.v = Tensor(Shape{param.size()});
    }
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        double g = grad[i];
        if (h.decoupled) {
            param[i] -= h.lr * h.weight_decay * param[i];
        } else {
            g += h.weight_decay * param[i];
        }
        mo.m[i] = h.beta1 * mo.m[i] + (1.0 - h.beta1) * g;
        mo.v[i] = h.beta2 * mo.v[i] + (1.0 - h.beta2) * g * g;
        const double mhat = mo.m[i] / bc1;
        const double vhat = mo.v[i] / bc2;
        param[i] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
    }
}

void Adam::update(const std::string& name, Tensor& param, const Tensor& grad) {
    if (step_ == 0) {
        throw std::logic_error("Adam::update before begin_step");
    }
    if (param.shape() != grad.shape()) {
        throw ShapeError("Adam: " + name + " is " + shape_str(param.shape()) + ", gradient is " +
                         shape_str(grad.shape()));
    }
    adam_update(param.data(), grad.data(), moments_[name], hyper_, step_);
}

}  // namespace decomp
