#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>

#include "decomp/denoiser.hpp"
#include "decomp/diffusion.hpp"
#include "decomp/textenc.hpp"

namespace decomp {

// Everything needed to run the noise predictor on a prompt.
struct Model {
    Vocabulary vocab;
    TextEncoderParams text;
    HandleTable handles;
    DenoiserParams unet;
    NoiseSchedule schedule;

    static Model create(const DenoiserConfig& unet_cfg, const NoiseSchedule& schedule, std::uint64_t seed);

    // Visits every named tensor: text.*, unet.*, then handle.[name] in table order.
    template <class F>
    void visit(F&& f) {
        text.visit(f);
        unet.visit(f);
        handles.visit_embeddings(f);
    }
    template <class F>
    void visit(F&& f) const {
        text.visit(f);
        unet.visit(f);
        handles.visit_embeddings(f);
    }

    // Raw little-endian bytes of every tensor whose name starts with prefix.
    std::string tensor_bytes(std::string_view prefix) const;
};

struct Forward {
    TokenizedPrompt tokens;
    NodeId text;
    NoisePrediction prediction;
};

// Tokenizes, encodes and predicts noise for z_t (model space) at timestep t.
Forward forward(const Model& model, std::string_view prompt, NodeId z_t, std::size_t t, Binder& bind);

// Called with (t, z_t) before each denoising step.
using SampleObserver = std::function<void(std::size_t, const Tensor&)>;

// Generates one image in [0,1] by ancestral sampling. Deterministic in seed.
Tensor sample(const Model& model, std::string_view prompt, std::size_t steps, std::uint64_t seed,
              const SampleObserver& observe = {});

}  // namespace decomp
