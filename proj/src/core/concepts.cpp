#include "decomp/concepts.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace decomp {

void Scene::validate() const {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw std::invalid_argument("scene image must be [3,H,W], got " + shape_str(image.shape()));
    }
    if (masks.empty()) {
        throw std::invalid_argument("scene needs at least one concept mask");
    }
    if (names.size() != masks.size()) {
        throw std::invalid_argument("scene has " + std::to_string(masks.size()) + " masks but " +
                                    std::to_string(names.size()) + " names");
    }
    const Shape hw{image.dim(1), image.dim(2)};
    for (std::size_t i = 0; i < masks.size(); ++i) {
        if (masks[i].shape() != hw) {
            throw std::invalid_argument("mask " + std::to_string(i + 1) + " is " + shape_str(masks[i].shape()) +
                                        ", image is " + shape_str(hw));
        }
        bool any = false;
        for (double v : masks[i].data()) {
            if (v != 0.0 && v != 1.0) throw std::invalid_argument("mask " + std::to_string(i + 1) + " is not binary");
            any = any || v == 1.0;
        }
        if (!any) throw std::invalid_argument("mask " + std::to_string(i + 1) + " is empty");
    }
}

std::vector<std::size_t> union_sample(Rng& rng, std::size_t n, SubsetLaw law) {
    if (n == 0) {
        throw std::invalid_argument("union_sample: no concepts to sample from");
    }
    std::vector<std::size_t> out;
    if (law == SubsetLaw::uniform_subset) {
        if (n >= 63) throw std::invalid_argument("union_sample: too many concepts for subset enumeration");
        std::uniform_int_distribution<std::uint64_t> pick(1, (std::uint64_t{1} << n) - 1);
        const std::uint64_t bits = pick(rng);
        for (std::size_t i = 0; i < n; ++i) {
            if (bits >> i & 1u) out.push_back(i);
        }
        return out;
    }
    std::uniform_int_distribution<std::size_t> size(1, n);
    const std::size_t k = size(rng);
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(pool[i], pool[pick(rng)]);
    }
    out.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(out.begin(), out.end());
    return out;
}

std::string build_prompt(const std::vector<std::string>& handle_names) {
    if (handle_names.empty()) {
        throw std::invalid_argument("build_prompt: empty concept subset");
    }
    std::string p = "a photo of " + handle_names.front();
    for (std::size_t i = 1; i < handle_names.size(); ++i) p += " and " + handle_names[i];
    return p;
}

std::string build_prompt(std::vector<std::size_t> subset, const HandleTable& handles) {
    std::sort(subset.begin(), subset.end());
    std::vector<std::string> names;
    for (std::size_t i : subset) {
        if (i >= handles.size()) {
            throw std::out_of_range("build_prompt: concept index " + std::to_string(i) + " has no handle");
        }
        names.push_back(handles.at(i).name);
    }
    return build_prompt(names);
}

Tensor mask_union(const std::vector<Tensor>& masks, const std::vector<std::size_t>& subset) {
    if (subset.empty()) {
        throw std::invalid_argument("mask_union: empty subset");
    }
    Tensor out = masks.at(subset.front());
    for (std::size_t j = 1; j < subset.size(); ++j) {
        const Tensor& m = masks.at(subset[j]);
        if (m.shape() != out.shape()) throw ShapeError("mask_union: masks differ in shape");
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], m[i]);
    }
    return out;
}

Tensor background_mask(const Scene& scene) {
    std::vector<std::size_t> all(scene.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    Tensor u = mask_union(scene.masks, all);
    for (double& v : u.data()) v = 1.0 - v;
    return u;
}

Tensor flip_horizontal(const Tensor& t) {
    Tensor out(t.shape());
    const std::size_t w = t.shape().back();
    const std::size_t rows = t.numel() / w;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t x = 0; x < w; ++x) out[r * w + x] = t[r * w + (w - 1 - x)];
    }
    return out;
}

std::vector<BaselineSample> synthesize_baseline_collection(const Scene& scene, const HandleTable& handles,
                                                           std::size_t count, Rng& rng, SubsetLaw law) {
    if (count == 0) {
        throw std::invalid_argument("baseline collection size must be at least 1");
    }
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    const std::size_t hw = scene.height() * scene.width();
    std::vector<BaselineSample> out;
    out.reserve(count);
    for (std::size_t n = 0; n < count; ++n) {
        BaselineSample s;
        s.subset = union_sample(rng, scene.size(), law);
        s.prompt = build_prompt(s.subset, handles);
        const double bg[3] = {unit(rng), unit(rng), unit(rng)};
        s.mask = mask_union(scene.masks, s.subset);
        s.image = Tensor(scene.image.shape());
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t i = 0; i < hw; ++i) {
                s.image[c * hw + i] = s.mask[i] > 0.5 ? scene.image[c * hw + i] : bg[c];
            }
        }
        s.flipped = coin(rng);
        if (s.flipped) {
            s.image = flip_horizontal(s.image);
            s.mask = flip_horizontal(s.mask);
        }
        out.push_back(std::move(s));
    }
    return out;
}

Scene synthetic_two_concept_scene() {
    constexpr std::size_t n = 32;
    Scene s;
    s.image = Tensor(Shape{3, n, n});
    Tensor square(Shape{n, n});
    Tensor disc(Shape{n, n});
    const double cy = 16.0, cx = 23.5, radius = 6.6;
    for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
            const std::size_t i = y * n + x;
            double r = 0.42, g = 0.55, b = 0.40;
            if (y >= 9 && y < 23 && x >= 2 && x < 16) {
                square[i] = 1.0;
                const double stripe = (x + y) % 4 < 2 ? 0.1 : -0.1;
                r = 0.85 + stripe;
                g = 0.12;
                b = 0.10;
            } else if (std::hypot(static_cast<double>(y) + 0.5 - cy, static_cast<double>(x) + 0.5 - cx) <= radius) {
                disc[i] = 1.0;
                const double check = ((x / 2) + (y / 2)) % 2 == 0 ? 0.1 : -0.1;
                r = 0.12;
                g = 0.18;
                b = 0.85 + check;
            }
            s.image[i] = r;
            s.image[n * n + i] = g;
            s.image[2 * n * n + i] = b;
        }
    }
    s.masks = {square, disc};
    s.names = {"square", "disc"};
    return s;
}

}  // namespace decomp
