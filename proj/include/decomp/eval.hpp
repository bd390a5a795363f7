#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "decomp/concepts.hpp"
#include "decomp/model.hpp"
#include "decomp/tensor.hpp"

namespace decomp {

class Embedder {
public:
    virtual ~Embedder() = default;
    // Unit vectors in a shared space.
    virtual std::vector<double> embed_image(const Tensor& image) const = 0;
    virtual std::vector<double> embed_text(std::string_view text) const = 0;
};

class Segmenter {
public:
    virtual ~Segmenter() = default;
    // [H,W] binary mask of `class_word` in a [3,H,W] image.
    virtual Tensor segment(const Tensor& image, std::string_view class_word) const = 0;
};

class EmptySegmentation : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class UnknownClass : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Color class of the synthetic shape corpus: a canonical color plus an
// axis-aligned acceptance box in RGB.
struct ColorClass {
    std::array<double, 3> color{};
    std::array<double, 3> lo{}, hi{};
};

// Word -> color class. The default palette covers the two-concept scene:
// red/square and blue/disc/circle, plus green.
class Palette {
public:
    Palette();
    void add(std::string word, ColorClass cls);
    const ColorClass* find(std::string_view word) const;
    const ColorClass& at(std::string_view word) const;  // throws UnknownClass

private:
    std::map<std::string, ColorClass, std::less<>> classes_;
};

// Color histogram + 2x2 patch luminance statistics over the non-black pixels,
// with one extra coordinate that is set only for all-black images.
class ToyEmbedder : public Embedder {
public:
    static constexpr std::size_t bins = 8;
    static constexpr double bin_sigma = 0.15;
    static constexpr std::size_t dim = 3 * bins + 2 + 1;

    explicit ToyEmbedder(Palette palette = {}) : palette_(std::move(palette)) {}

    std::vector<double> embed_image(const Tensor& image) const override;
    // Sum of the features of uniform canonical-color images, one per palette
    // word found in the text; the empty direction when none is found.
    std::vector<double> embed_text(std::string_view text) const override;

private:
    Palette palette_;
};

class ColorThresholdSegmenter : public Segmenter {
public:
    explicit ColorThresholdSegmenter(Palette palette = {}) : palette_(std::move(palette)) {}
    Tensor segment(const Tensor& image, std::string_view class_word) const override;

private:
    Palette palette_;
};

double cosine(const std::vector<double>& a, const std::vector<double>& b);

double prompt_similarity(const Tensor& image, std::string_view class_prompt, const Embedder& embedder);

// Black-fills outside the mask. mask is [H,W].
Tensor apply_mask(const Tensor& image, const Tensor& mask);

// Throws EmptySegmentation when the segmenter finds nothing in gen_image.
double identity_similarity(const Tensor& input_image, const Tensor& input_mask, const Tensor& gen_image,
                           std::string_view class_word, const Segmenter& segmenter, const Embedder& embedder);

// Fraction of pixels set in an [H,W] mask.
double mask_fraction(const Tensor& mask);

// ---- evaluation suite ----

const std::vector<std::string>& default_templates();

struct NamedScene {
    std::string id;
    Scene scene;
};

struct EvalPair {
    std::size_t id = 0;
    std::size_t scene = 0;  // index into the scene list
    std::string scene_id;
    std::string template_text;
    std::vector<std::size_t> subset;
    std::string handle_prompt;  // "[v1] and [v2]" substituted for {tokens}
    std::string class_prompt;   // "a cat and a dog" substituted for {tokens}
};

// Handle name used for concept i during extraction: "[v{i+1}]".
std::string concept_handle(std::size_t i);

// Every scene x template x nonempty concept subset.
std::vector<EvalPair> build_eval_suite(const std::vector<NamedScene>& scenes,
                                       const std::vector<std::string>& templates = default_templates());

struct SamplerConfig {
    std::size_t steps = 50;
    std::uint64_t seed = 0;
};

struct PairResult {
    EvalPair pair;
    std::optional<double> prompt_similarity;
    std::vector<std::optional<double>> identity;  // per concept in subset; nullopt = empty segmentation
    std::optional<double> identity_mean;          // empty segmentations count as 0
    std::size_t empty_segmentations = 0;
    std::string error;
};

struct EvalSummary {
    std::size_t pairs = 0;
    std::size_t scored = 0;
    std::size_t errors = 0;
    std::size_t empty_segmentations = 0;
    std::optional<double> mean_prompt_similarity;
    std::optional<double> mean_identity_similarity;
};

struct EvalReport {
    std::vector<PairResult> results;
    EvalSummary summary;
};

// Generates one image per pair from the handle prompt and scores it. The pair
// seed is sampler.seed + pair.id, so results do not depend on evaluation order.
// Pairs must refer to `scene`; failures are recorded per pair.
EvalReport evaluate_run(const Model& model, const Scene& scene, const std::vector<EvalPair>& suite,
                        const Embedder& embedder, const Segmenter& segmenter, const SamplerConfig& sampler);

EvalSummary summarize(const std::vector<PairResult>& results);

void write_report_jsonl(std::ostream& out, const EvalReport& report);
void write_summary_table(std::ostream& out, const EvalSummary& summary);

// ---- COCO harvesting ----

class HarvestError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct HarvestOptions {
    std::filesystem::path images_dir;
    std::filesystem::path panoptic_dir;  // PNG segment maps for panoptic files
    std::size_t size = 32;
    double min_fraction = 0.15;
    std::size_t min_concepts = 2;
    std::vector<std::string> excluded{"orange", "banana", "broccoli", "carrot", "zebra", "giraffe"};
};

struct HarvestedScene {
    NamedScene scene;
    std::vector<double> fractions;  // per concept, of the square crop
};

// Accepts COCO instance ("segmentation" polygons or RLE) and panoptic
// ("segments_info" + PNG) annotation files.
std::vector<HarvestedScene> harvest_scenes(const std::filesystem::path& annotations, const HarvestOptions& opts);

// COCO RLE helpers. Masks are [H,W], counts run over column-major order.
Tensor decode_rle(const std::vector<std::uint32_t>& counts, std::size_t height, std::size_t width);
std::vector<std::uint32_t> decode_rle_string(std::string_view s);
Tensor rasterize_polygons(const std::vector<std::vector<double>>& polygons, std::size_t height, std::size_t width);

// Area-averaging resize of [C,H,W] or [H,W].
Tensor resize_area(const Tensor& t, std::size_t out_h, std::size_t out_w);

}  // namespace decomp
