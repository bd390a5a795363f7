#include <cmath>

#include "decomp/model.hpp"
#include "decomp/trainer.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace decomp;

namespace {

struct Tiny {
    Model model;
    Tensor mask_left{Shape{8, 8}}, mask_right{Shape{8, 8}};

    Tiny() : model(Model::create(test::shrunken_denoiser(), NoiseSchedule::linear(), 3)) {
        add_handle(model.handles, "[v1]", "object", model.vocab, model.text);
        add_handle(model.handles, "[v2]", "object", model.vocab, model.text);
        for (std::size_t i = 0; i < 64; ++i) (i % 8 < 4 ? mask_left : mask_right)[i] = 1.0;
    }
};

}  // namespace

TEST_CASE("every parameter group of the shrunken denoiser passes finite differences under the total loss") {
    Tiny tiny;
    std::mt19937_64 rng(5);
    const Tensor z0 = test::uniform_tensor(rng, {3, 8, 8}, -1.0, 1.0);
    const Tensor eps = test::random_tensor(rng, {3, 8, 8});
    const std::size_t t = 300;
    Graph g;
    Binder bind(g, [](std::string_view) { return true; });
    const Forward f = forward(tiny.model, "a photo of [v1] and [v2]", g.input(add_noise(z0, t, eps, tiny.model.schedule)),
                              t, bind);
    const NodeId rec = rec_loss(g, g.input(eps), f.prediction.eps_hat, mask_union({tiny.mask_left, tiny.mask_right}, {0, 1}));
    const std::vector<NodeId> maps{attention_map(g, f.prediction.records, f.tokens, f.tokens.position_of(0)),
                                   attention_map(g, f.prediction.records, f.tokens, f.tokens.position_of(1))};
    const NodeId attn = attn_loss(g, maps, {downsample_mask(tiny.mask_left, 4), downsample_mask(tiny.mask_right, 4)});
    const NodeId loss = ops::add(g, rec, ops::scale(g, attn, 0.01));
    CHECK(bind.parameters().size() >= 40);
    for (const auto& [name, id] : bind.parameters()) {
        INFO(name);
        CHECK(fd_check(g, loss, id, 1e-5) < 1e-4);
    }
}

TEST_CASE("noise prediction has the latent shape and one attention record per layer") {
    Tiny tiny;
    std::mt19937_64 rng(1);
    Graph g;
    Binder bind(g);
    const Forward f = forward(tiny.model, "a photo of [v1]", g.input(test::random_tensor(rng, {3, 8, 8})), 10, bind);
    CHECK(g.value(f.prediction.eps_hat).shape() == Shape{3, 8, 8});
    REQUIRE_FALSE(f.prediction.records.empty());
    for (const AttentionRecord& r : f.prediction.records) {
        const Tensor& p = g.value(r.probs);
        REQUIRE(p.shape() == Shape{r.side * r.side, kPromptLength});
        for (std::size_t q = 0; q < p.dim(0); ++q) {
            double s = 0.0;
            for (std::size_t k = 0; k < p.dim(1); ++k) {
                CHECK(p[q * p.dim(1) + k] >= 0.0);
                s += p[q * p.dim(1) + k];
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("attention maps are min-max normalized at the attention side") {
    Tiny tiny;
    std::mt19937_64 rng(2);
    const AttentionMaps am =
        attention_maps(tiny.model, "a photo of [v1] and [v2]", test::random_tensor(rng, {3, 8, 8}), 50);
    REQUIRE(am.maps.size() == 2);
    CHECK(am.handles == std::vector<std::size_t>{0, 1});
    for (const Tensor& m : am.maps) {
        REQUIRE(m.shape() == Shape{4, 4});
        double lo = 1e9, hi = -1e9;
        for (double v : m.data()) lo = std::min(lo, v), hi = std::max(hi, v);
        CHECK(lo == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(hi == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("timesteps outside the schedule are rejected") {
    Tiny tiny;
    Graph g;
    Binder bind(g);
    CHECK_THROWS_AS(forward(tiny.model, "a photo of [v1]", g.input(Tensor(Shape{3, 8, 8})), 1000, bind), TimestepError);
    CHECK_THROWS_AS(tiny.model.schedule.check_timestep(1000), TimestepError);
    CHECK_NOTHROW(tiny.model.schedule.check_timestep(999));
}

TEST_CASE("sinusoidal timestep embedding oracle") {
    const Tensor e = timestep_embedding(7, 8);
    REQUIRE(e.shape() == Shape{1, 8});
    for (std::size_t i = 0; i < 4; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / 4.0);
        CHECK(e[i] == doctest::Approx(std::sin(7.0 * freq)).epsilon(1e-12));
        CHECK(e[4 + i] == doctest::Approx(std::cos(7.0 * freq)).epsilon(1e-12));
    }
    const Tensor z = timestep_embedding(0, 8);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(z[i] == 0.0);
        CHECK(z[4 + i] == 1.0);
    }
}

TEST_CASE("denoiser init is deterministic and names every tensor once") {
    const DenoiserConfig cfg = test::shrunken_denoiser();
    const auto a = DenoiserParams::init(cfg, 9);
    const auto b = DenoiserParams::init(cfg, 9);
    std::vector<std::string> names;
    std::vector<std::vector<double>> va, vb;
    a.visit([&](const std::string& n, const Tensor& t) {
        names.push_back(n);
        va.push_back(t.values());
    });
    b.visit([&](const std::string&, const Tensor& t) { vb.push_back(t.values()); });
    CHECK(va == vb);
    std::vector<std::string> sorted = names;
    std::sort(sorted.begin(), sorted.end());
    CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
    CHECK(DenoiserParams::is_cross_attention("unet.attn.to_k"));
    CHECK(DenoiserParams::is_cross_attention("unet.attn.to_v"));
    CHECK_FALSE(DenoiserParams::is_cross_attention("unet.conv_in.weight"));
}

TEST_CASE("forward is bit-identical on repeat") {
    Tiny tiny;
    std::mt19937_64 rng(4);
    const Tensor z = test::random_tensor(rng, {3, 8, 8});
    auto run = [&] {
        Graph g;
        Binder bind(g);
        return g.value(forward(tiny.model, "a photo of [v2] and [v1]", g.input(z), 123, bind).prediction.eps_hat).values();
    };
    CHECK(run() == run());
}
