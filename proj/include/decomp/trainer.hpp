#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "decomp/concepts.hpp"
#include "decomp/diffusion.hpp"
#include "decomp/model.hpp"
#include "decomp/optimizer.hpp"

namespace decomp {

enum class Method { ours, ti_m, db_m, cd_m };

std::string_view method_name(Method m) noexcept;
Method method_from_name(std::string_view name);

struct PhaseSchedule {
    double lr = 0.0;
    std::size_t steps = 0;
};

struct TrainConfig {
    PhaseSchedule phase1{5e-4, 400};
    PhaseSchedule phase2{2e-6, 400};
    double beta1 = 0.9;
    double beta2 = 0.99;
    double weight_decay = 1e-8;
    double adam_eps = 1e-8;
    bool decoupled_weight_decay = true;
    double lambda_attn = 0.01;
    std::size_t batch_size = 4;
    bool use_two_phases = true;
    bool use_masked_loss = true;
    bool use_attn_loss = true;
    bool use_union_sampling = true;
    Method method = Method::ours;
    SubsetLaw subset_law = SubsetLaw::uniform_size;
    RecNormalization rec_normalization = RecNormalization::all_elements;
    std::string initializer_word = "object";
    bool background_handle = false;
    std::size_t baseline_collection_size = 32;
    std::uint64_t seed = 0;

    void validate() const;  // throws ConfigError
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Hyperparameter presets. "paper" restores the defaults above. "desk" is
// calibrated for a randomly initialized miniature denoiser: phase1.lr 3e-2,
// phase2.lr 1e-3, lambda_attn 1, background handle on. Apply before variants.
void apply_preset(TrainConfig& cfg, std::string_view preset);
const std::vector<std::string>& preset_names();

// Named method/ablation presets: ours, no-phases, no-mask-loss, no-attn-loss,
// no-union, ti-m, db-m, cd-m.
void apply_variant(TrainConfig& cfg, std::string_view variant);
const std::vector<std::string>& variant_names();

// Tensor of independent N(0,1) draws in row-major order.
Tensor standard_normal(Rng& rng, const Shape& shape);

enum class Phase { one = 1, two = 2 };

struct StepLog {
    std::size_t step;  // 1-based over the whole run
    Phase phase;
    LossBreakdown loss;
};

struct TrainingState {
    Model model;
    Scene scene;
    TrainConfig config;
    Rng rng;
    std::vector<Tensor> concept_masks;  // scene masks, plus the background complement when enabled
    Tensor z0;                          // scene image in model space
    std::vector<BaselineSample> collection;
    Phase phase = Phase::one;
    std::optional<Adam> optimizer;
    std::size_t singleton_cursor = 0;
    std::size_t steps_done = 0;
    std::size_t phase1_done = 0;
    std::size_t phase2_done = 0;
};

// Builds the model and one handle per concept ("[v1]".."[vN]", plus "[vbg]").
TrainingState init_training(const Scene& scene, const TrainConfig& config, const DenoiserConfig& unet = {},
                            const NoiseSchedule& schedule = NoiseSchedule::linear());

// Resets the optimizer with the phase learning rate.
void begin_phase(TrainingState& state, Phase phase);

// Which named tensors train in a phase under a method.
bool is_trainable(Method method, Phase phase, std::string_view name);

// One optimizer step over a batch of independently drawn (subset, t, noise) samples.
LossBreakdown training_step(TrainingState& state);

struct Checkpoint {
    static constexpr std::uint32_t version = 1;
    Model model;
    TrainConfig config;
    std::vector<std::string> concept_names;
    std::size_t phase1_steps = 0;
    std::size_t phase2_steps = 0;
};

using StepCallback = std::function<void(const StepLog&)>;

// Runs phase 1 then phase 2 (or only phase 2, for phase1.steps + phase2.steps
// steps, when use_two_phases is off).
Checkpoint train(const Scene& scene, const TrainConfig& config, const StepCallback& on_step = {},
                 const DenoiserConfig& unet = {}, const NoiseSchedule& schedule = NoiseSchedule::linear());
Checkpoint train(TrainingState& state, const StepCallback& on_step = {});

// Per-handle normalized attention maps for a prompt on a given model-space z_t.
struct AttentionMaps {
    TokenizedPrompt tokens;
    std::vector<std::size_t> handles;  // handle indices in prompt order
    std::vector<Tensor> maps;          // [side, side]
};
AttentionMaps attention_maps(const Model& model, std::string_view prompt, const Tensor& z_t, std::size_t t);

double iou(const Tensor& a, const Tensor& b, double threshold = 0.5);

// Mean IoU between thresholded attention maps of the full-scene prompt and the
// downsampled concept masks, over the input image noised at each timestep.
double attention_iou(const Model& model, const Scene& scene, const std::vector<std::size_t>& timesteps,
                     std::uint64_t seed);

// Timesteps used for attention IoU reporting: 0, 50, ..., 450.
std::vector<std::size_t> default_iou_timesteps();

}  // namespace decomp
