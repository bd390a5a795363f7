#include "decomp/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "decomp/denoiser.hpp"

namespace decomp {

NoiseSchedule NoiseSchedule::linear(std::size_t steps, double beta_start, double beta_end) {
    if (steps == 0 || !(beta_start > 0.0) || !(beta_end < 1.0) || (steps > 1 && !(beta_end > beta_start))) {
        throw std::invalid_argument("noise schedule needs steps >= 1 and 0 < beta_start < beta_end < 1");
    }
    NoiseSchedule s;
    s.steps = steps;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.beta.resize(steps);
    s.alpha.resize(steps);
    s.alpha_bar.resize(steps);
    double prod = 1.0;
    for (std::size_t t = 0; t < steps; ++t) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(steps - 1);
        s.beta[t] = beta_start + (beta_end - beta_start) * frac;
        s.alpha[t] = 1.0 - s.beta[t];
        prod *= s.alpha[t];
        s.alpha_bar[t] = prod;
    }
    return s;
}

void NoiseSchedule::check_timestep(std::size_t t) const {
    if (t >= steps) {
        throw TimestepError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps) + ")");
    }
}

Tensor add_noise(const Tensor& z0, std::size_t t, const Tensor& eps, const NoiseSchedule& sched) {
    sched.check_timestep(t);
    if (z0.shape() != eps.shape()) {
        throw ShapeError("add_noise: shape mismatch " + shape_str(z0.shape()) + " vs " + shape_str(eps.shape()));
    }
    const double a = std::sqrt(sched.alpha_bar[t]);
    const double b = std::sqrt(1.0 - sched.alpha_bar[t]);
    Tensor out(z0.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

namespace {

Tensor expand_mask(const Tensor& mask, const Shape& target) {
    if (mask.shape() == target) return mask;
    const Shape& ms = mask.shape();
    if (ms.size() == 2 && target.size() == 3 && ms[0] == target[1] && ms[1] == target[2]) {
        Tensor out(target);
        for (std::size_t c = 0; c < target[0]; ++c) {
            std::copy(mask.data().begin(), mask.data().end(), out.ptr() + c * mask.numel());
        }
        return out;
    }
    throw ShapeError("rec_loss: mask " + shape_str(ms) + " does not match " + shape_str(target));
}

}  // namespace

NodeId rec_loss(Graph& g, NodeId eps, NodeId eps_hat, const Tensor& mask, RecNormalization norm) {
    if (g.value(eps).shape() != g.value(eps_hat).shape()) {
        throw ShapeError("rec_loss: shape mismatch " + shape_str(g.value(eps).shape()) + " vs " +
                         shape_str(g.value(eps_hat).shape()));
    }
    const Tensor full = expand_mask(mask, g.value(eps).shape());
    const NodeId residual = ops::mul(g, ops::sub(g, eps, eps_hat), g.input(full));
    const NodeId sq = ops::square(g, residual);
    if (norm == RecNormalization::all_elements) {
        return ops::mean(g, sq);
    }
    double covered = 0.0;
    for (double v : full.data()) covered += v;
    return ops::scale(g, ops::sum(g, sq), covered > 0.0 ? 1.0 / covered : 0.0);
}

double rec_loss(const Tensor& eps, const Tensor& eps_hat, const Tensor& mask, RecNormalization norm) {
    Graph g;
    return g.value(rec_loss(g, g.input(eps), g.input(eps_hat), mask, norm))[0];
}

Tensor downsample_mask(const Tensor& mask, std::size_t res) {
    if (mask.rank() != 2 || res == 0 || mask.dim(0) % res != 0 || mask.dim(1) % res != 0) {
        throw ShapeError("downsample_mask: " + shape_str(mask.shape()) + " is not divisible into " +
                         std::to_string(res) + "x" + std::to_string(res) + " cells");
    }
    const std::size_t fy = mask.dim(0) / res, fx = mask.dim(1) / res;
    const double inv = 1.0 / static_cast<double>(fy * fx);
    Tensor out(Shape{res, res});
    for (std::size_t y = 0; y < mask.dim(0); ++y) {
        for (std::size_t x = 0; x < mask.dim(1); ++x) {
            out[(y / fy) * res + x / fx] += mask[y * mask.dim(1) + x] * inv;
        }
    }
    return out;
}

NodeId attn_loss(Graph& g, const std::vector<NodeId>& maps, const std::vector<Tensor>& masks) {
    if (maps.size() != masks.size() || maps.empty()) {
        throw std::invalid_argument("attn_loss: " + std::to_string(maps.size()) + " maps vs " +
                                    std::to_string(masks.size()) + " masks");
    }
    NodeId acc = 0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        if (g.value(maps[i]).shape() != masks[i].shape()) {
            throw ShapeError("attn_loss: map " + shape_str(g.value(maps[i]).shape()) + " vs mask " +
                             shape_str(masks[i].shape()));
        }
        const NodeId mse = ops::mean(g, ops::square(g, ops::sub(g, maps[i], g.input(masks[i]))));
        acc = i == 0 ? mse : ops::add(g, acc, mse);
    }
    return maps.size() == 1 ? acc : ops::scale(g, acc, 1.0 / static_cast<double>(maps.size()));
}

double attn_loss(const std::vector<Tensor>& maps, const std::vector<Tensor>& masks) {
    Graph g;
    std::vector<NodeId> ids;
    for (const Tensor& m : maps) ids.push_back(g.input(m));
    return g.value(attn_loss(g, ids, masks))[0];
}

LossBreakdown total_loss(double rec, double attn, double lambda_attn) {
    if (!(lambda_attn >= 0.0)) {
        throw std::invalid_argument("lambda_attn must be nonnegative");
    }
    return LossBreakdown{rec, attn, rec + lambda_attn * attn};
}

std::vector<std::size_t> sampling_timesteps(std::size_t total, std::size_t steps) {
    if (steps == 0 || steps > total) {
        throw std::invalid_argument("sampler steps must be in [1, " + std::to_string(total) + "]");
    }
    std::vector<std::size_t> out(steps);
    for (std::size_t i = 0; i < steps; ++i) out[i] = ((i + 1) * total) / steps - 1;
    return out;
}

Tensor ancestral_sample(const NoiseSchedule& sched, std::size_t steps, const Shape& shape,
                        const EpsPredictor& predict, std::uint64_t seed) {
    const auto stops = sampling_timesteps(sched.steps, steps);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    Tensor x(shape);
    for (double& v : x.data()) v = nd(rng);

    for (std::size_t i = stops.size(); i-- > 0;) {
        const std::size_t t = stops[i];
        const double ab = sched.alpha_bar[t];
        const double ab_prev = i > 0 ? sched.alpha_bar[stops[i - 1]] : 1.0;
        const double beta = 1.0 - ab / ab_prev;
        const Tensor eps = predict(x, t);
        if (eps.shape() != shape) {
            throw ShapeError("sampler: predictor returned " + shape_str(eps.shape()));
        }
        const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
        const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
        const double sd = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
        for (std::size_t j = 0; j < x.numel(); ++j) {
            const double x0 = std::clamp((x[j] - std::sqrt(1.0 - ab) * eps[j]) / std::sqrt(ab), -1.0, 1.0);
            x[j] = i > 0 ? c0 * x0 + ct * x[j] : x0;
        }
        if (i > 0) {
            for (double& v : x.data()) v += sd * nd(rng);
        }
    }
    return x;
}

Tensor to_model_space(const Tensor& image) {
    Tensor out(image.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = 2.0 * image[i] - 1.0;
    return out;
}

Tensor to_image_space(const Tensor& z) {
    Tensor out(z.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::clamp(0.5 * (z[i] + 1.0), 0.0, 1.0);
    return out;
}

}  // namespace decomp
