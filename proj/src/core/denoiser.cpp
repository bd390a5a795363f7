#include "decomp/denoiser.hpp"

#include <cmath>
#include <random>

namespace decomp {

namespace {

class Init {
public:
    explicit Init(std::uint64_t seed) : rng_(seed) {}

    Tensor normal(Shape s, double sd) {
        std::normal_distribution<double> nd(0.0, sd);
        Tensor t(std::move(s));
        for (double& v : t.data()) v = nd(rng_);
        return t;
    }
    Tensor conv(std::size_t out, std::size_t in, double gain = 1.0) {
        return normal({out, in, 3, 3}, gain * std::sqrt(2.0 / static_cast<double>(in * 9)));
    }

private:
    std::mt19937_64 rng_;
};

DenoiserParams::Res make_res(Init& init, std::size_t c) {
    return DenoiserParams::Res{Tensor(Shape{c}, 1.0), Tensor(Shape{c}), init.conv(c, c),
                               Tensor(Shape{c, 1, 1}),  Tensor(Shape{c}, 1.0), Tensor(Shape{c}),
                               init.conv(c, c, 0.3),    Tensor(Shape{c, 1, 1})};
}

NodeId res_block(Binder& bind, const DenoiserParams& p, const std::string& prefix, const DenoiserParams::Res& r,
                 NodeId x, NodeId temb) {
    Graph& g = bind.graph();
    const auto& cfg = p.config;
    NodeId h = ops::group_norm(g, x, bind(prefix + ".gn1.gamma", r.gn1_g), bind(prefix + ".gn1.beta", r.gn1_b),
                               cfg.groups, cfg.norm_eps);
    h = ops::conv2d(g, ops::silu(g, h), bind(prefix + ".conv1.weight", r.conv1_w));
    h = ops::broadcast_add(g, h, bind(prefix + ".conv1.bias", r.conv1_b));
    h = ops::broadcast_add(g, h, temb);
    h = ops::group_norm(g, h, bind(prefix + ".gn2.gamma", r.gn2_g), bind(prefix + ".gn2.beta", r.gn2_b), cfg.groups,
                        cfg.norm_eps);
    h = ops::conv2d(g, ops::silu(g, h), bind(prefix + ".conv2.weight", r.conv2_w));
    h = ops::broadcast_add(g, h, bind(prefix + ".conv2.bias", r.conv2_b));
    return ops::add(g, x, h);
}

}  // namespace

DenoiserParams DenoiserParams::init(const DenoiserConfig& cfg, std::uint64_t seed) {
    if (cfg.image_size % 2 != 0 || cfg.d_model % cfg.groups != 0) {
        throw std::invalid_argument("denoiser config: image size must be even and d_model divisible by groups");
    }
    Init init(seed);
    const std::size_t c = cfg.d_model;
    DenoiserParams p;
    p.config = cfg;
    p.time_w = init.normal({cfg.time_dim, c}, 1.0 / std::sqrt(static_cast<double>(cfg.time_dim)));
    p.time_b = Tensor(Shape{1, c});
    p.conv_in_w = init.conv(c, cfg.channels);
    p.conv_in_b = Tensor(Shape{c, 1, 1});
    p.res32a = make_res(init, c);
    p.res32b = make_res(init, c);
    p.attn_gn_g = Tensor(Shape{c}, 1.0);
    p.attn_gn_b = Tensor(Shape{c});
    p.to_q = init.normal({c, c}, 1.0 / std::sqrt(static_cast<double>(c)));
    p.to_k = init.normal({cfg.d_text, c}, 1.0 / std::sqrt(static_cast<double>(cfg.d_text)));
    p.to_v = init.normal({cfg.d_text, c}, 1.0 / std::sqrt(static_cast<double>(cfg.d_text)));
    p.to_out = init.normal({c, c}, 1.0 / std::sqrt(static_cast<double>(c)));
    p.out_b = Tensor(Shape{c, 1, 1});
    p.res16 = make_res(init, c);
    p.out_gn_g = Tensor(Shape{c}, 1.0);
    p.out_gn_b = Tensor(Shape{c});
    p.conv_out_w = init.conv(cfg.channels, c, 0.3);
    p.conv_out_b = Tensor(Shape{cfg.channels, 1, 1});
    return p;
}

bool DenoiserParams::is_cross_attention(const std::string& name) {
    return name == "unet.attn.to_k" || name == "unet.attn.to_v";
}

Tensor timestep_embedding(std::size_t t, std::size_t dim) {
    Tensor e(Shape{1, dim});
    const std::size_t half = dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        e[i] = std::sin(static_cast<double>(t) * freq);
        e[half + i] = std::cos(static_cast<double>(t) * freq);
    }
    return e;
}

NoisePrediction predict_noise(const DenoiserParams& p, NodeId z_t, std::size_t t, std::size_t num_timesteps,
                              NodeId token_embs, Binder& bind) {
    if (t >= num_timesteps) {
        throw TimestepError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(num_timesteps) + ")");
    }
    Graph& g = bind.graph();
    const auto& cfg = p.config;
    const std::size_t c = cfg.d_model;
    const std::size_t side = cfg.attention_side();
    const std::size_t spatial = side * side;
    const Shape image{cfg.channels, cfg.image_size, cfg.image_size};
    if (g.value(z_t).shape() != image) {
        throw ShapeError("predict_noise: expected z_t " + shape_str(image) + ", got " + shape_str(g.value(z_t).shape()));
    }

    NodeId temb = ops::matmul(g, g.input(timestep_embedding(t, cfg.time_dim)), bind("unet.time.weight", p.time_w));
    temb = ops::silu(g, ops::broadcast_add(g, temb, bind("unet.time.bias", p.time_b)));
    temb = ops::reshape(g, temb, {c, 1, 1});

    NodeId h = ops::conv2d(g, z_t, bind("unet.conv_in.weight", p.conv_in_w));
    h = ops::broadcast_add(g, h, bind("unet.conv_in.bias", p.conv_in_b));
    h = res_block(bind, p, "unet.res32a", p.res32a, h, temb);
    const NodeId skip = res_block(bind, p, "unet.res32b", p.res32b, h, temb);
    const NodeId down = ops::avg_pool2(g, skip);

    // Cross-attention: queries from image positions, keys/values from tokens.
    NodeId n = ops::group_norm(g, down, bind("unet.attn.norm.gamma", p.attn_gn_g),
                               bind("unet.attn.norm.beta", p.attn_gn_b), cfg.groups, cfg.norm_eps);
    n = ops::reshape(g, n, {c, spatial});
    const NodeId q = ops::matmul(g, n, bind("unet.attn.to_q", p.to_q), true, false);     // [S, C]
    const NodeId k = ops::matmul(g, token_embs, bind("unet.attn.to_k", p.to_k));         // [L, C]
    const NodeId v = ops::matmul(g, token_embs, bind("unet.attn.to_v", p.to_v));         // [L, C]
    const NodeId scores = ops::scale(g, ops::matmul(g, q, k, false, true), 1.0 / std::sqrt(static_cast<double>(c)));
    const NodeId probs = ops::softmax(g, scores, 1);                                     // [S, L]
    const NodeId mixed = ops::matmul(g, probs, v);                                       // [S, C]
    NodeId attn = ops::matmul(g, bind("unet.attn.to_out", p.to_out), mixed, true, true); // [C, S]
    attn = ops::reshape(g, attn, {c, side, side});
    attn = ops::broadcast_add(g, attn, bind("unet.attn.out_bias", p.out_b));
    h = ops::add(g, down, attn);

    h = res_block(bind, p, "unet.res16", p.res16, h, temb);
    h = ops::add(g, ops::upsample2(g, h), skip);
    h = ops::group_norm(g, h, bind("unet.out.norm.gamma", p.out_gn_g), bind("unet.out.norm.beta", p.out_gn_b),
                        cfg.groups, cfg.norm_eps);
    h = ops::conv2d(g, ops::silu(g, h), bind("unet.conv_out.weight", p.conv_out_w));
    h = ops::broadcast_add(g, h, bind("unet.conv_out.bias", p.conv_out_b));

    return NoisePrediction{h, {AttentionRecord{probs, 0, side}}};
}

NodeId attention_map(Graph& g, const std::vector<AttentionRecord>& records, const TokenizedPrompt& prompt,
                     std::size_t handle_position) {
    if (records.empty()) {
        throw std::invalid_argument("attention_map: no attention records");
    }
    if (!prompt.is_handle_position(handle_position)) {
        throw HandleError("token position " + std::to_string(handle_position) + " is not a handle");
    }
    const std::size_t side = records.front().side;
    NodeId acc = ops::column(g, records.front().probs, handle_position);
    for (std::size_t i = 1; i < records.size(); ++i) {
        if (records[i].side != side) {
            throw ShapeError("attention_map: records at different resolutions");
        }
        acc = ops::add(g, acc, ops::column(g, records[i].probs, handle_position));
    }
    if (records.size() > 1) {
        acc = ops::scale(g, acc, 1.0 / static_cast<double>(records.size()));
    }
    return ops::minmax_normalize(g, ops::reshape(g, acc, {side, side}));
}

}  // namespace decomp
