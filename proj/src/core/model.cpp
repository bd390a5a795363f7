#include "decomp/model.hpp"

#include <bit>
#include <cstring>

namespace decomp {

Model Model::create(const DenoiserConfig& unet_cfg, const NoiseSchedule& schedule, std::uint64_t seed) {
    Model m;
    TextEncoderConfig text_cfg;
    text_cfg.dim = unet_cfg.d_text;
    m.text = TextEncoderParams::init(m.vocab, text_cfg, seed * 2 + 1);
    m.unet = DenoiserParams::init(unet_cfg, seed * 2 + 2);
    m.schedule = schedule;
    return m;
}

std::string Model::tensor_bytes(std::string_view prefix) const {
    static_assert(std::endian::native == std::endian::little, "checkpoint byte order assumes little-endian host");
    std::string out;
    visit([&](const std::string& name, const Tensor& t) {
        if (name.compare(0, prefix.size(), prefix) != 0) return;
        const std::size_t off = out.size();
        out.resize(off + t.numel() * sizeof(double));
        std::memcpy(out.data() + off, t.ptr(), t.numel() * sizeof(double));
    });
    return out;
}

Forward forward(const Model& model, std::string_view prompt, NodeId z_t, std::size_t t, Binder& bind) {
    TokenizedPrompt tokens = tokenize(prompt, model.vocab, model.handles);
    const NodeId text = encode(tokens, model.text, model.handles, bind);
    NoisePrediction pred = predict_noise(model.unet, z_t, t, model.schedule.steps, text, bind);
    return Forward{std::move(tokens), text, std::move(pred)};
}

Tensor sample(const Model& model, std::string_view prompt, std::size_t steps, std::uint64_t seed,
              const SampleObserver& observe) {
    const TokenizedPrompt tokens = tokenize(prompt, model.vocab, model.handles);
    Tensor text_value;
    {
        Graph g;
        Binder bind(g);
        text_value = g.value(encode(tokens, model.text, model.handles, bind));
    }
    const auto& cfg = model.unet.config;
    const Shape shape{cfg.channels, cfg.image_size, cfg.image_size};
    auto predict = [&](const Tensor& z, std::size_t t) {
        if (observe) observe(t, z);
        Graph g;
        Binder bind(g);
        const NoisePrediction p =
            predict_noise(model.unet, g.input(z), t, model.schedule.steps, g.input(text_value), bind);
        return g.value(p.eps_hat);
    };
    return to_image_space(ancestral_sample(model.schedule, steps, shape, predict, seed));
}

}  // namespace decomp
