#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "decomp/binder.hpp"
#include "decomp/tensor.hpp"
#include "decomp/textenc.hpp"

namespace decomp {

struct DenoiserConfig {
    std::size_t image_size = 32;  // attention runs at image_size / 2
    std::size_t channels = 3;
    std::size_t d_model = 32;
    std::size_t d_text = kTextDim;
    std::size_t time_dim = 32;
    std::size_t groups = 4;
    double norm_eps = 1e-5;

    std::size_t attention_side() const noexcept { return image_size / 2; }
};

// Weights of the miniature noise predictor:
//   conv_in -> res32a -> res32b -> avgpool -> cross-attention -> res16 -> upsample (+skip) -> conv_out
struct DenoiserParams {
    struct Res {
        Tensor gn1_g, gn1_b, conv1_w, conv1_b, gn2_g, gn2_b, conv2_w, conv2_b;
    };

    DenoiserConfig config;
    Tensor time_w, time_b;
    Tensor conv_in_w, conv_in_b;
    Res res32a, res32b, res16;
    Tensor attn_gn_g, attn_gn_b, to_q, to_k, to_v, to_out, out_b;
    Tensor out_gn_g, out_gn_b, conv_out_w, conv_out_b;

    static DenoiserParams init(const DenoiserConfig& cfg, std::uint64_t seed);

    template <class F>
    void visit(F&& f) { visit_fields(*this, f); }
    template <class F>
    void visit(F&& f) const { visit_fields(*this, f); }

    // Names of the cross-attention projection weights.
    static bool is_cross_attention(const std::string& name);

private:
    template <class R, class F>
    static void visit_res(const std::string& p, R& r, F& f) {
        f(p + ".gn1.gamma", r.gn1_g);
        f(p + ".gn1.beta", r.gn1_b);
        f(p + ".conv1.weight", r.conv1_w);
        f(p + ".conv1.bias", r.conv1_b);
        f(p + ".gn2.gamma", r.gn2_g);
        f(p + ".gn2.beta", r.gn2_b);
        f(p + ".conv2.weight", r.conv2_w);
        f(p + ".conv2.bias", r.conv2_b);
    }
    template <class Self, class F>
    static void visit_fields(Self& s, F& f) {
        f(std::string("unet.time.weight"), s.time_w);
        f(std::string("unet.time.bias"), s.time_b);
        f(std::string("unet.conv_in.weight"), s.conv_in_w);
        f(std::string("unet.conv_in.bias"), s.conv_in_b);
        visit_res("unet.res32a", s.res32a, f);
        visit_res("unet.res32b", s.res32b, f);
        f(std::string("unet.attn.norm.gamma"), s.attn_gn_g);
        f(std::string("unet.attn.norm.beta"), s.attn_gn_b);
        f(std::string("unet.attn.to_q"), s.to_q);
        f(std::string("unet.attn.to_k"), s.to_k);
        f(std::string("unet.attn.to_v"), s.to_v);
        f(std::string("unet.attn.to_out"), s.to_out);
        f(std::string("unet.attn.out_bias"), s.out_b);
        visit_res("unet.res16", s.res16, f);
        f(std::string("unet.out.norm.gamma"), s.out_gn_g);
        f(std::string("unet.out.norm.beta"), s.out_gn_b);
        f(std::string("unet.conv_out.weight"), s.conv_out_w);
        f(std::string("unet.conv_out.bias"), s.conv_out_b);
    }
};

class TimestepError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

// Attention probabilities of one cross-attention layer: [side*side, tokens].
struct AttentionRecord {
    NodeId probs;
    std::size_t layer;
    std::size_t side;
};

struct NoisePrediction {
    NodeId eps_hat;  // same shape as z_t
    std::vector<AttentionRecord> records;
};

// Sinusoidal embedding of an integer timestep, [1, dim].
Tensor timestep_embedding(std::size_t t, std::size_t dim);

// z_t is [channels, image_size, image_size]; token_embs is [length, d_text].
// Throws TimestepError unless t < num_timesteps.
NoisePrediction predict_noise(const DenoiserParams& params, NodeId z_t, std::size_t t, std::size_t num_timesteps,
                              NodeId token_embs, Binder& bind);

// Layer-averaged, min-max normalized attention onto the token at handle_position,
// reshaped to [side, side]. Constant maps normalize to zeros.
NodeId attention_map(Graph& g, const std::vector<AttentionRecord>& records, const TokenizedPrompt& prompt,
                     std::size_t handle_position);

}  // namespace decomp
