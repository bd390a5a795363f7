#include <array>
#include <bit>
#include <cmath>
#include <map>
#include <optional>
#include <regex>
#include <set>

#include "decomp/concepts.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace decomp;

namespace {

HandleTable handles_for(std::size_t n) {
    static const Vocabulary vocab;
    HandleTable h;
    for (std::size_t i = 0; i < n; ++i) h.insert(vocab, "[v" + std::to_string(i + 1) + "]", Tensor(Shape{1}), false);
    return h;
}

std::uint32_t bits_of(const std::vector<std::size_t>& s) {
    std::uint32_t b = 0;
    for (std::size_t i : s) b |= 1u << i;
    return b;
}

// Probability of a subset under the two-stage law: size uniform on 1..n, then
// a uniform subset of that size.
double two_stage_probability(std::uint32_t bits, std::size_t n) {
    const std::size_t k = static_cast<std::size_t>(std::popcount(bits));
    double choose = 1.0;
    for (std::size_t i = 0; i < k; ++i) choose = choose * static_cast<double>(n - i) / static_cast<double>(i + 1);
    return 1.0 / (static_cast<double>(n) * choose);
}

const std::regex kCaption(R"(a photo of \[v[0-9]+\]( and \[v[0-9]+\])*)");

}  // namespace

TEST_CASE("two-stage union law: all 7 subsets observed within 3 sigma") {
    Rng rng(42);
    constexpr std::size_t n = 3, draws = 100000;
    std::map<std::uint32_t, std::size_t> counts;
    for (std::size_t i = 0; i < draws; ++i) ++counts[bits_of(union_sample(rng, n))];
    CHECK(counts.size() == 7);
    double total_p = 0.0;
    for (std::uint32_t b = 1; b < 8; ++b) {
        const double p = two_stage_probability(b, n);
        total_p += p;
        const double sigma = std::sqrt(draws * p * (1 - p));
        INFO("subset bits " << b);
        CHECK(std::abs(static_cast<double>(counts[b]) - draws * p) < 3.0 * sigma);
    }
    CHECK(total_p == doctest::Approx(1.0));
}

TEST_CASE("uniform-subset law: each nonempty subset with probability 1/7") {
    Rng rng(43);
    constexpr std::size_t draws = 70000;
    std::map<std::uint32_t, std::size_t> counts;
    for (std::size_t i = 0; i < draws; ++i) ++counts[bits_of(union_sample(rng, 3, SubsetLaw::uniform_subset))];
    CHECK(counts.size() == 7);
    const double p = 1.0 / 7.0;
    for (const auto& [b, c] : counts) CHECK(std::abs(c - draws * p) < 3.0 * std::sqrt(draws * p * (1 - p)));
}

TEST_CASE("union samples are nonempty, ascending and in range") {
    Rng rng(1);
    for (std::size_t n = 1; n <= 6; ++n) {
        for (int i = 0; i < 500; ++i) {
            for (SubsetLaw law : {SubsetLaw::uniform_size, SubsetLaw::uniform_subset}) {
                const auto s = union_sample(rng, n, law);
                REQUIRE_FALSE(s.empty());
                CHECK(std::is_sorted(s.begin(), s.end()));
                CHECK(std::adjacent_find(s.begin(), s.end()) == s.end());
                CHECK(s.back() < n);
            }
        }
    }
    CHECK_THROWS_AS(union_sample(rng, 0), std::invalid_argument);
}

TEST_CASE("prompts follow the template grammar in ascending handle order") {
    const HandleTable h = handles_for(3);
    CHECK(build_prompt({0}, h) == "a photo of [v1]");
    CHECK(build_prompt({2, 0}, h) == "a photo of [v1] and [v3]");
    CHECK(build_prompt({0, 1, 2}, h) == "a photo of [v1] and [v2] and [v3]");
    CHECK_THROWS_AS(build_prompt(std::vector<std::size_t>{}, h), std::invalid_argument);
    CHECK_THROWS_AS(build_prompt({3}, h), std::out_of_range);
}

TEST_CASE("mask union and background complement") {
    const Scene s = synthetic_two_concept_scene();
    const Tensor u = mask_union(s.masks, {0, 1});
    const Tensor bg = background_mask(s);
    for (std::size_t i = 0; i < u.numel(); ++i) {
        CHECK(u[i] == std::max(s.masks[0][i], s.masks[1][i]));
        CHECK(bg[i] == 1.0 - u[i]);
    }
    CHECK(mask_union(s.masks, {1}).values() == s.masks[1].values());
}

TEST_CASE("synthetic scene: two disjoint textured concepts on a 32x32 canvas") {
    const Scene s = synthetic_two_concept_scene();
    CHECK_NOTHROW(s.validate());
    CHECK(s.image.shape() == Shape{3, 32, 32});
    CHECK(s.names == std::vector<std::string>{"square", "disc"});
    double overlap = 0.0, a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < 32 * 32; ++i) {
        overlap += s.masks[0][i] * s.masks[1][i];
        a += s.masks[0][i];
        b += s.masks[1][i];
    }
    CHECK(overlap == 0.0);
    CHECK(a == 196.0);
    CHECK(b > 100.0);
    // Red inside the square, blue inside the disc, and both are textured.
    std::set<double> square_reds, disc_blues;
    for (std::size_t i = 0; i < 32 * 32; ++i) {
        if (s.masks[0][i] == 1.0) {
            CHECK(s.image[i] > 0.7);
            square_reds.insert(s.image[i]);
        }
        if (s.masks[1][i] == 1.0) {
            CHECK(s.image[2 * 1024 + i] > 0.7);
            disc_blues.insert(s.image[2 * 1024 + i]);
        }
    }
    CHECK(square_reds.size() == 2);
    CHECK(disc_blues.size() == 2);
}

TEST_CASE("scene validation") {
    Scene s = synthetic_two_concept_scene();
    s.names.pop_back();
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    s = synthetic_two_concept_scene();
    s.masks[1] = Tensor(Shape{32, 32});
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    s = synthetic_two_concept_scene();
    s.masks[0][0] = 0.5;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    s = synthetic_two_concept_scene();
    s.masks[0] = Tensor(Shape{16, 16}, 1.0);
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

TEST_CASE("baseline collection: constant color outside the union mask and template captions") {
    const Scene s = synthetic_two_concept_scene();
    const HandleTable h = handles_for(2);
    Rng rng(5);
    const auto samples = synthesize_baseline_collection(s, h, 200, rng);
    REQUIRE(samples.size() == 200);
    std::size_t flipped = 0;
    const std::size_t hw = 32 * 32;
    for (const BaselineSample& b : samples) {
        CHECK(std::regex_match(b.prompt, kCaption));
        CHECK(b.prompt == build_prompt(b.subset, h));
        const Tensor expected_mask = b.flipped ? flip_horizontal(mask_union(s.masks, b.subset)) : mask_union(s.masks, b.subset);
        CHECK(b.mask.values() == expected_mask.values());
        const Tensor unflipped = b.flipped ? flip_horizontal(b.image) : b.image;
        std::optional<std::array<double, 3>> bg;
        for (std::size_t i = 0; i < hw; ++i) {
            const std::array<double, 3> px{b.image[i], b.image[hw + i], b.image[2 * hw + i]};
            if (b.mask[i] == 0.0) {
                if (!bg) bg = px;
                CHECK(px == *bg);
            }
        }
        // Pixels inside the mask are the scene's, after undoing the flip.
        const Tensor m = mask_union(s.masks, b.subset);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < hw; ++i)
                if (m[i] == 1.0) CHECK(unflipped[c * hw + i] == s.image[c * hw + i]);
        flipped += b.flipped;
    }
    CHECK(flipped > 70);
    CHECK(flipped < 130);
    CHECK_THROWS_AS(synthesize_baseline_collection(s, h, 0, rng), std::invalid_argument);
}

TEST_CASE("flip_horizontal is an involution that mirrors columns") {
    std::mt19937_64 rng(3);
    const Tensor t = test::random_tensor(rng, {2, 3, 5});
    CHECK(flip_horizontal(flip_horizontal(t)).values() == t.values());
    const Tensor f = flip_horizontal(t);
    CHECK(f[0] == t[4]);
    CHECK(f[5 * 3 + 1] == t[5 * 3 + 3]);
}
