#include "decomp/trainer.hpp"

#include <algorithm>
#include <array>
#include <numeric>

namespace decomp {

Tensor standard_normal(Rng& rng, const Shape& shape) {
    std::normal_distribution<double> nd;
    Tensor t(shape);
    for (double& v : t.data()) v = nd(rng);
    return t;
}

namespace {

constexpr std::array<std::string_view, 4> kMethodNames{"ours", "ti-m", "db-m", "cd-m"};

bool starts_with(std::string_view s, std::string_view prefix) { return s.substr(0, prefix.size()) == prefix; }

struct Draw {
    std::string prompt;
    Tensor z0;
    Tensor mask;
    std::vector<std::size_t> subset;  // concept indices whose maps are supervised
};

Draw draw_sample(TrainingState& s) {
    const TrainConfig& cfg = s.config;
    Draw d;
    if (cfg.method != Method::ours) {
        std::uniform_int_distribution<std::size_t> pick(0, s.collection.size() - 1);
        const BaselineSample& b = s.collection[pick(s.rng)];
        d.prompt = b.prompt;
        d.z0 = to_model_space(b.image);
        d.mask = Tensor(b.mask.shape(), 1.0);
        return d;
    }
    const std::size_t n = s.concept_masks.size();
    if (cfg.use_union_sampling) {
        d.subset = union_sample(s.rng, n, cfg.subset_law);
    } else {
        d.subset = {s.singleton_cursor++ % n};
    }
    d.prompt = build_prompt(d.subset, s.model.handles);
    d.z0 = s.z0;
    d.mask = cfg.use_masked_loss ? mask_union(s.concept_masks, d.subset) : Tensor(s.concept_masks.front().shape(), 1.0);
    return d;
}

}  // namespace

std::string_view method_name(Method m) noexcept { return kMethodNames[static_cast<std::size_t>(m)]; }

Method method_from_name(std::string_view name) {
    for (std::size_t i = 0; i < kMethodNames.size(); ++i) {
        if (kMethodNames[i] == name) return static_cast<Method>(i);
    }
    throw ConfigError("unknown method '" + std::string(name) + "' (expected ours, ti-m, db-m or cd-m)");
}

void TrainConfig::validate() const {
    if (!(phase1.lr > 0.0) || !(phase2.lr > 0.0)) throw ConfigError("learning rates must be positive");
    if (!(lambda_attn >= 0.0)) throw ConfigError("lambda_attn must be nonnegative");
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam betas must lie in [0,1)");
    if (!(weight_decay >= 0.0) || !(adam_eps > 0.0)) throw ConfigError("weight_decay must be >= 0 and adam_eps > 0");
    if (method != Method::ours) {
        if (use_attn_loss) throw ConfigError("baseline methods do not use the cross-attention loss");
        if (background_handle) throw ConfigError("baseline methods do not learn a background handle");
        if (baseline_collection_size == 0) throw ConfigError("baseline_collection_size must be at least 1");
    }
}

const std::vector<std::string>& variant_names() {
    static const std::vector<std::string> names{"ours",  "no-phases", "no-mask-loss", "no-attn-loss",
                                                "no-union", "ti-m",   "db-m",         "cd-m"};
    return names;
}

const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names{"paper", "desk"};
    return names;
}

void apply_preset(TrainConfig& cfg, std::string_view preset) {
    if (preset == "paper") {
        const TrainConfig d;
        cfg.phase1.lr = d.phase1.lr;
        cfg.phase2.lr = d.phase2.lr;
        cfg.lambda_attn = d.lambda_attn;
        cfg.background_handle = d.background_handle;
    } else if (preset == "desk") {
        cfg.phase1.lr = 3e-2;
        cfg.phase2.lr = 1e-3;
        cfg.lambda_attn = 1.0;
        cfg.background_handle = true;
    } else {
        throw ConfigError("unknown preset '" + std::string(preset) + "' (expected paper or desk)");
    }
}

void apply_variant(TrainConfig& cfg, std::string_view variant) {
    if (variant == "ours") {
        cfg.method = Method::ours;
    } else if (variant == "no-phases") {
        cfg.use_two_phases = false;
    } else if (variant == "no-mask-loss") {
        cfg.use_masked_loss = false;
    } else if (variant == "no-attn-loss") {
        cfg.use_attn_loss = false;
    } else if (variant == "no-union") {
        cfg.use_union_sampling = false;
    } else if (variant == "ti-m" || variant == "db-m" || variant == "cd-m") {
        cfg.method = method_from_name(variant);
        cfg.use_attn_loss = false;
        cfg.background_handle = false;
    } else {
        throw ConfigError("unknown variant '" + std::string(variant) + "'");
    }
}

bool is_trainable(Method method, Phase phase, std::string_view name) {
    const bool handle = starts_with(name, "handle.");
    switch (method) {
        case Method::ours:
            return phase == Phase::one ? handle : true;
        case Method::ti_m:
            return handle;
        case Method::db_m:
            return true;
        case Method::cd_m:
            return handle || DenoiserParams::is_cross_attention(std::string(name));
    }
    return false;
}

TrainingState init_training(const Scene& scene, const TrainConfig& config, const DenoiserConfig& unet,
                            const NoiseSchedule& schedule) {
    config.validate();
    scene.validate();
    if (scene.height() != unet.image_size || scene.width() != unet.image_size) {
        throw ConfigError("scene is " + std::to_string(scene.height()) + "x" + std::to_string(scene.width()) +
                          " but the denoiser expects " + std::to_string(unet.image_size) + "x" +
                          std::to_string(unet.image_size));
    }
    TrainingState s{Model::create(unet, schedule, config.seed), scene, config, Rng(config.seed), {}, {}, {}, Phase::one, std::nullopt};
    for (std::size_t i = 0; i < scene.size(); ++i) {
        add_handle(s.model.handles, "[v" + std::to_string(i + 1) + "]", config.initializer_word, s.model.vocab,
                   s.model.text);
    }
    s.concept_masks = scene.masks;
    if (config.background_handle) {
        add_handle(s.model.handles, "[vbg]", "background", s.model.vocab, s.model.text, true);
        s.concept_masks.push_back(background_mask(scene));
    }
    s.z0 = to_model_space(scene.image);
    if (config.method != Method::ours) {
        s.collection = synthesize_baseline_collection(scene, s.model.handles, config.baseline_collection_size, s.rng,
                                                      config.subset_law);
    }
    return s;
}

void begin_phase(TrainingState& state, Phase phase) {
    const TrainConfig& c = state.config;
    AdamHyper h;
    h.lr = phase == Phase::one ? c.phase1.lr : c.phase2.lr;
    h.beta1 = c.beta1;
    h.beta2 = c.beta2;
    h.weight_decay = c.weight_decay;
    h.eps = c.adam_eps;
    h.decoupled = c.decoupled_weight_decay;
    state.phase = phase;
    state.optimizer.emplace(h);
}

LossBreakdown training_step(TrainingState& s) {
    if (!s.optimizer) {
        begin_phase(s, s.phase);
    }
    const TrainConfig& cfg = s.config;
    const Method method = cfg.method;
    const Phase phase = s.phase;
    Graph g;
    Binder bind(g, [method, phase](std::string_view name) { return is_trainable(method, phase, name); });

    const std::size_t side = s.model.unet.config.attention_side();
    std::uniform_int_distribution<std::size_t> pick_t(0, s.model.schedule.steps - 1);
    double rec_sum = 0.0, attn_sum = 0.0;
    NodeId objective = 0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        const Draw d = draw_sample(s);
        const std::size_t t = pick_t(s.rng);
        const Tensor eps = standard_normal(s.rng, d.z0.shape());
        const Tensor z_t = add_noise(d.z0, t, eps, s.model.schedule);

        const Forward fwd = forward(s.model, d.prompt, g.input(z_t), t, bind);
        const NodeId rec = rec_loss(g, g.input(eps), fwd.prediction.eps_hat, d.mask, cfg.rec_normalization);
        rec_sum += g.value(rec)[0];

        NodeId sample_loss = rec;
        if (!d.subset.empty()) {
            std::vector<NodeId> maps;
            std::vector<Tensor> targets;
            for (std::size_t concept_index : d.subset) {
                const std::size_t pos = fwd.tokens.position_of(concept_index);
                maps.push_back(attention_map(g, fwd.prediction.records, fwd.tokens, pos));
                targets.push_back(downsample_mask(s.concept_masks[concept_index], side));
            }
            const NodeId attn = attn_loss(g, maps, targets);
            attn_sum += g.value(attn)[0];
            if (cfg.use_attn_loss) {
                sample_loss = ops::add(g, rec, ops::scale(g, attn, cfg.lambda_attn));
            }
        }
        objective = b == 0 ? sample_loss : ops::add(g, objective, sample_loss);
    }
    const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);
    objective = ops::scale(g, objective, inv_batch);

    if (bind.parameters().empty()) throw ConfigError("no trainable parameters in this phase");
    const auto grads = g.backward(objective);
    s.optimizer->begin_step();
    s.model.visit([&](const std::string& name, Tensor& tensor) {
        const auto it = bind.parameters().find(name);
        if (it != bind.parameters().end()) {
            s.optimizer->update(name, tensor, grads.at(it->second));
        }
    });

    ++s.steps_done;
    if (phase == Phase::one) {
        ++s.phase1_done;
    } else {
        ++s.phase2_done;
    }
    const double lambda = cfg.use_attn_loss ? cfg.lambda_attn : 0.0;
    return total_loss(rec_sum * inv_batch, attn_sum * inv_batch, lambda);
}

Checkpoint train(TrainingState& state, const StepCallback& on_step) {
    const TrainConfig& cfg = state.config;
    struct Stage {
        Phase phase;
        std::size_t steps;
    };
    std::vector<Stage> stages;
    if (cfg.use_two_phases) {
        stages = {{Phase::one, cfg.phase1.steps}, {Phase::two, cfg.phase2.steps}};
    } else {
        stages = {{Phase::two, cfg.phase1.steps + cfg.phase2.steps}};
    }
    for (const Stage& st : stages) {
        begin_phase(state, st.phase);
        for (std::size_t i = 0; i < st.steps; ++i) {
            const LossBreakdown loss = training_step(state);
            if (on_step) on_step(StepLog{state.steps_done, st.phase, loss});
        }
    }
    return Checkpoint{state.model, state.config, state.scene.names, state.phase1_done, state.phase2_done};
}

Checkpoint train(const Scene& scene, const TrainConfig& config, const StepCallback& on_step,
                 const DenoiserConfig& unet, const NoiseSchedule& schedule) {
    TrainingState state = init_training(scene, config, unet, schedule);
    return train(state, on_step);
}

AttentionMaps attention_maps(const Model& model, std::string_view prompt, const Tensor& z_t, std::size_t t) {
    Graph g;
    Binder bind(g);
    const Forward fwd = forward(model, prompt, g.input(z_t), t, bind);
    AttentionMaps out;
    out.tokens = fwd.tokens;
    for (const auto& [handle, pos] : fwd.tokens.handle_positions) {
        out.handles.push_back(handle);
        out.maps.push_back(g.value(attention_map(g, fwd.prediction.records, fwd.tokens, pos)));
    }
    return out;
}

double iou(const Tensor& a, const Tensor& b, double threshold) {
    if (a.shape() != b.shape()) {
        throw ShapeError("iou: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const bool x = a[i] >= threshold;
        const bool y = b[i] >= threshold;
        inter += x && y;
        uni += x || y;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double attention_iou(const Model& model, const Scene& scene, const std::vector<std::size_t>& timesteps,
                     std::uint64_t seed) {
    std::vector<std::size_t> all(scene.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    const std::string prompt = build_prompt(all, model.handles);
    const std::size_t side = model.unet.config.attention_side();
    const Tensor z0 = to_model_space(scene.image);
    Rng rng(seed);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t t : timesteps) {
        const Tensor z_t = add_noise(z0, t, standard_normal(rng, z0.shape()), model.schedule);
        const AttentionMaps am = attention_maps(model, prompt, z_t, t);
        for (std::size_t i = 0; i < am.maps.size(); ++i) {
            total += iou(am.maps[i], downsample_mask(scene.masks.at(am.handles[i]), side));
            ++count;
        }
    }
    return count == 0 ? 0.0 : total / static_cast<double>(count);
}

std::vector<std::size_t> default_iou_timesteps() {
    std::vector<std::size_t> ts;
    for (std::size_t t = 0; t < 500; t += 50) ts.push_back(t);
    return ts;
}

}  // namespace decomp
