#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "decomp/graph.hpp"
#include "decomp/tensor.hpp"

namespace decomp {

// DDPM variance schedule. alpha_bar[t] is the cumulative product of alpha up to t.
struct NoiseSchedule {
    std::size_t steps = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::vector<double> beta, alpha, alpha_bar;

    static NoiseSchedule linear(std::size_t steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);
    void check_timestep(std::size_t t) const;  // throws TimestepError
};

// sqrt(alpha_bar[t]) * z0 + sqrt(1 - alpha_bar[t]) * eps
Tensor add_noise(const Tensor& z0, std::size_t t, const Tensor& eps, const NoiseSchedule& sched);

enum class RecNormalization {
    all_elements,  // mean over every element, zeros outside the mask
    mask_count,    // sum over the mask divided by the number of covered elements
};

// ((eps - eps_hat) * mask)^2 reduced per `norm`. The mask matches eps or its
// trailing [H, W] dims, in which case it is broadcast over channels.
NodeId rec_loss(Graph& g, NodeId eps, NodeId eps_hat, const Tensor& mask,
                RecNormalization norm = RecNormalization::all_elements);
double rec_loss(const Tensor& eps, const Tensor& eps_hat, const Tensor& mask,
                RecNormalization norm = RecNormalization::all_elements);

// Area-average pooling of an [H, W] mask to [res, res].
Tensor downsample_mask(const Tensor& mask, std::size_t res);

// Mean over pairs of the per-pair mean squared deviation.
NodeId attn_loss(Graph& g, const std::vector<NodeId>& maps, const std::vector<Tensor>& masks);
double attn_loss(const std::vector<Tensor>& maps, const std::vector<Tensor>& masks);

struct LossBreakdown {
    double rec = 0.0;
    double attn = 0.0;
    double total = 0.0;
};

LossBreakdown total_loss(double rec, double attn, double lambda_attn);

// Timesteps visited by a sampler with `steps` evenly spaced stops, ascending.
std::vector<std::size_t> sampling_timesteps(std::size_t total, std::size_t steps);

using EpsPredictor = std::function<Tensor(const Tensor& z_t, std::size_t t)>;

// Ancestral DDPM sampling from unit Gaussian noise in model space ([-1, 1]).
// The denoised estimate is clipped to [-1, 1] at every step; the final step is
// deterministic and returns that estimate.
Tensor ancestral_sample(const NoiseSchedule& sched, std::size_t steps, const Shape& shape,
                        const EpsPredictor& predict, std::uint64_t seed);

// [0,1] image <-> [-1,1] model space.
Tensor to_model_space(const Tensor& image);
Tensor to_image_space(const Tensor& z);

}  // namespace decomp
