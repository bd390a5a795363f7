#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "decomp/tensor.hpp"
#include "decomp/textenc.hpp"

namespace decomp {

// One input image with N concept masks. image is [3,H,W] in [0,1]; masks are
// [H,W] with entries in {0,1}; names are the class words used at evaluation.
struct Scene {
    Tensor image;
    std::vector<Tensor> masks;
    std::vector<std::string> names;

    std::size_t size() const noexcept { return masks.size(); }
    std::size_t height() const { return image.dim(1); }
    std::size_t width() const { return image.dim(2); }
    void validate() const;  // throws std::invalid_argument
};

using Rng = std::mt19937_64;

enum class SubsetLaw {
    uniform_size,    // k uniform on {1..N}, then a uniform k-subset
    uniform_subset,  // uniform over the 2^N - 1 nonempty subsets
};

// Nonempty subset of {0..n-1}, ascending.
std::vector<std::size_t> union_sample(Rng& rng, std::size_t n, SubsetLaw law = SubsetLaw::uniform_size);

// "a photo of [h_i1] and ... [h_ik]" with indices in ascending order.
std::string build_prompt(std::vector<std::size_t> subset, const HandleTable& handles);
// Same grammar over arbitrary handle names.
std::string build_prompt(const std::vector<std::string>& handle_names);

Tensor mask_union(const std::vector<Tensor>& masks, const std::vector<std::size_t>& subset);
Tensor background_mask(const Scene& scene);

struct BaselineSample {
    Tensor image;
    std::vector<std::size_t> subset;
    std::string prompt;
    Tensor mask;  // union mask after the flip
    bool flipped = false;
};

// Pastes the masked pixels of a random concept subset onto a random solid
// background and flips horizontally with probability 1/2.
std::vector<BaselineSample> synthesize_baseline_collection(const Scene& scene, const HandleTable& handles,
                                                           std::size_t count, Rng& rng,
                                                           SubsetLaw law = SubsetLaw::uniform_size);

Tensor flip_horizontal(const Tensor& t);

// 32x32 scene with a red striped square ("square") and a blue checkered disc ("disc")
// on a muted green background.
Scene synthetic_two_concept_scene();

}  // namespace decomp
