#include "decomp/cli.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"

#include "decomp/image_io.hpp"
#include "decomp/serialize.hpp"

namespace decomp::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <class T>
void take(const json& doc, const char* key, T& out, std::set<std::string>& seen) {
    seen.insert(key);
    auto it = doc.find(key);
    if (it == doc.end()) return;
    try {
        out = it->template get<T>();
    } catch (const json::exception&) {
        throw ValidationError(std::string("config.") + key + ": wrong type");
    }
}

void reject_unknown(const json& doc, const std::set<std::string>& seen, const std::string& where) {
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        if (!seen.count(it.key())) throw ValidationError(where + ": unknown key '" + it.key() + "'");
    }
}

json read_json_file(const fs::path& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw ValidationError(std::string("cannot open ") + what + " " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

void echo_config(const fs::path& dir, const RunConfig& cfg) { write_text(dir / "config.json", cfg.to_json().dump(2) + "\n"); }

fs::path prepare_out(const RunConfig& cfg) {
    if (cfg.out.empty()) throw ValidationError("--out is required");
    fs::path dir(cfg.out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
    return dir;
}

// "[v1]" -> "v1"
std::string bare(const std::string& handle) {
    if (handle.size() >= 2 && handle.front() == '[' && handle.back() == ']') return handle.substr(1, handle.size() - 2);
    return handle;
}

Checkpoint read_checkpoint(const RunConfig& cfg) {
    if (cfg.checkpoint.empty()) throw ValidationError("--checkpoint is required");
    try {
        return load_checkpoint(cfg.checkpoint);
    } catch (const CheckpointError& e) {
        throw ValidationError(e.what());
    }
}

std::string require_prompt(const RunConfig& cfg) {
    if (cfg.prompt.empty()) throw ValidationError("--prompt is required");
    return cfg.prompt;
}

void write_attention_png(const fs::path& path, const Tensor& map, std::size_t target) {
    const std::size_t factor = std::max<std::size_t>(1, target / map.dim(0));
    write_png(path, upscale_nearest(map, factor));
}

// ---- commands ----

int cmd_extract(const RunConfig& cfg, std::ostream& out) {
    const NamedScene named = load_scene(cfg.scene);
    const fs::path dir = prepare_out(cfg);
    echo_config(dir, cfg);

    const NoiseSchedule schedule = schedule_from_json(cfg.schedule);
    schedule.check_timestep(cfg.timestep);
    TrainingState state = init_training(named.scene, cfg.train, cfg.denoiser, schedule);

    std::ofstream log(dir / "loss.csv");
    log << "step,phase,rec,attn,total\n";
    char line[160];
    const Checkpoint ck = train(state, [&](const StepLog& s) {
        std::snprintf(line, sizeof line, "%zu,%d,%.17g,%.17g,%.17g\n", s.step, static_cast<int>(s.phase), s.loss.rec,
                      s.loss.attn, s.loss.total);
        log << line;
    });
    log.close();
    if (!log) throw std::runtime_error("cannot write loss.csv");
    save_checkpoint(dir / "checkpoint.bin", ck);

    // Final maps: full-scene prompt on the input image noised at `timestep`.
    std::vector<std::size_t> all(named.scene.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const std::string prompt = build_prompt(all, ck.model.handles);
    Rng rng(cfg.seed);
    const Tensor z0 = to_model_space(named.scene.image);
    const Tensor z_t = add_noise(z0, cfg.timestep, standard_normal(rng, z0.shape()), ck.model.schedule);
    const AttentionMaps am = attention_maps(ck.model, prompt, z_t, cfg.timestep);
    for (std::size_t i = 0; i < am.maps.size(); ++i) {
        write_attention_png(dir / ("attn_" + bare(ck.model.handles.at(am.handles[i]).name) + ".png"), am.maps[i], 256);
    }

    const double miou = attention_iou(ck.model, named.scene, default_iou_timesteps(), cfg.seed);
    json metrics{{"attention_iou", miou}, {"phase1_steps", ck.phase1_steps}, {"phase2_steps", ck.phase2_steps}};
    write_text(dir / "metrics.json", metrics.dump(2) + "\n");
    out << "extracted " << named.scene.size() << " concepts from " << named.id << "; attention IoU " << miou << "\n"
        << "wrote " << (dir / "checkpoint.bin").string() << "\n";
    return ok;
}

int cmd_generate(const RunConfig& cfg, std::ostream& out) {
    const Checkpoint ck = read_checkpoint(cfg);
    const std::string prompt = require_prompt(cfg);
    // Surface tokenize errors before anything is written.
    tokenize(prompt, ck.model.vocab, ck.model.handles);
    if (cfg.count == 0) throw ValidationError("--count must be positive");
    const fs::path dir = prepare_out(cfg);
    echo_config(dir, cfg);
    const std::uint64_t hash = fnv1a(prompt);
    for (std::size_t i = 0; i < cfg.count; ++i) {
        const std::uint64_t seed = cfg.seed + i;
        char name[64];
        std::snprintf(name, sizeof name, "gen_%016" PRIx64 "_seed%" PRIu64 ".png", hash, seed);
        write_png(dir / name, sample(ck.model, prompt, cfg.sampler_steps, seed));
        out << (dir / name).string() << "\n";
    }
    return ok;
}

int cmd_visualize_attn(const RunConfig& cfg, std::ostream& out) {
    const Checkpoint ck = read_checkpoint(cfg);
    const std::string prompt = require_prompt(cfg);
    const TokenizedPrompt tokens = tokenize(prompt, ck.model.vocab, ck.model.handles);
    if (tokens.handle_positions.empty()) throw ValidationError("prompt contains no handle");
    ck.model.schedule.check_timestep(cfg.timestep);

    // The sampler only visits its own stops; use the one nearest the request.
    const auto stops = sampling_timesteps(ck.model.schedule.steps, cfg.sampler_steps);
    std::size_t stop = stops.front();
    for (std::size_t s : stops) {
        const auto d = [&](std::size_t a) { return a > cfg.timestep ? a - cfg.timestep : cfg.timestep - a; };
        if (d(s) < d(stop)) stop = s;
    }
    std::optional<Tensor> captured;
    const Tensor image = sample(ck.model, prompt, cfg.sampler_steps, cfg.seed, [&](std::size_t t, const Tensor& z) {
        if (t == stop) captured = z;
    });
    if (!captured) throw std::runtime_error("sampler never reached timestep " + std::to_string(stop));

    const fs::path dir = prepare_out(cfg);
    echo_config(dir, cfg);
    const AttentionMaps am = attention_maps(ck.model, prompt, *captured, stop);
    json info{{"prompt", prompt}, {"requested_t", cfg.timestep}, {"t", stop}, {"maps", json::array()}};
    for (std::size_t i = 0; i < am.maps.size(); ++i) {
        const std::string file = "attn_" + bare(ck.model.handles.at(am.handles[i]).name) + ".png";
        write_attention_png(dir / file, am.maps[i], 256);
        info["maps"].push_back({{"handle", ck.model.handles.at(am.handles[i]).name}, {"file", file}});
        out << (dir / file).string() << "\n";
    }
    json overlap = json::array();
    for (std::size_t i = 0; i < am.maps.size(); ++i)
        for (std::size_t j = i + 1; j < am.maps.size(); ++j)
            overlap.push_back({{"a", ck.model.handles.at(am.handles[i]).name},
                               {"b", ck.model.handles.at(am.handles[j]).name},
                               {"iou", iou(am.maps[i], am.maps[j])}});
    info["pairwise_iou"] = overlap;
    write_text(dir / "maps.json", info.dump(2) + "\n");
    write_png(dir / "image.png", image);
    return ok;
}

int cmd_evaluate(const RunConfig& cfg, std::ostream& out) {
    const Checkpoint ck = read_checkpoint(cfg);
    const NamedScene named = load_scene(cfg.scene);
    if (ck.concept_names.size() != named.scene.size()) {
        throw ValidationError("checkpoint has " + std::to_string(ck.concept_names.size()) + " concepts but scene " +
                              named.id + " has " + std::to_string(named.scene.size()));
    }
    const fs::path dir = prepare_out(cfg);
    echo_config(dir, cfg);
    const auto suite = build_eval_suite({named}, cfg.templates);
    const EvalReport report =
        evaluate_run(ck.model, named.scene, suite, ToyEmbedder{}, ColorThresholdSegmenter{}, {cfg.sampler_steps, cfg.seed});
    std::ostringstream jsonl, table;
    write_report_jsonl(jsonl, report);
    write_summary_table(table, report.summary);
    write_text(dir / "report.jsonl", jsonl.str());
    write_text(dir / "summary.txt", table.str());
    out << table.str();
    return ok;
}

int cmd_harvest(const RunConfig& cfg, std::ostream& out) {
    const HarvestSection& h = cfg.harvest;
    if (h.annotations.empty()) throw ValidationError("harvest needs an annotation file (--annotations)");
    HarvestOptions opts;
    opts.images_dir = h.images.empty() ? fs::path(h.annotations).parent_path() : fs::path(h.images);
    opts.panoptic_dir = h.panoptic;
    opts.size = h.size;
    opts.min_fraction = h.min_fraction;
    std::vector<HarvestedScene> scenes;
    try {
        scenes = harvest_scenes(h.annotations, opts);
    } catch (const HarvestError& e) {
        throw ValidationError(e.what());
    } catch (const ImageError& e) {
        throw ValidationError(e.what());
    }
    const fs::path dir = prepare_out(cfg);
    echo_config(dir, cfg);
    json manifest{{"scenes", json::array()}};
    for (const HarvestedScene& hs : scenes) {
        write_scene(dir / hs.scene.id, hs.scene);
        manifest["scenes"].push_back({{"id", hs.scene.id},
                                      {"manifest", (fs::path(hs.scene.id) / "scene.json").string()},
                                      {"names", hs.scene.scene.names},
                                      {"fractions", hs.fractions}});
    }
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    out << "accepted " << scenes.size() << " scenes\n";
    return ok;
}

int cmd_synth_baseline(const RunConfig& cfg, std::ostream& out) {
    const NamedScene named = load_scene(cfg.scene);
    const fs::path dir = prepare_out(cfg);
    echo_config(dir, cfg);
    const Vocabulary vocab;
    HandleTable handles;
    for (std::size_t i = 0; i < named.scene.size(); ++i) {
        handles.insert(vocab, concept_handle(i), Tensor(Shape{1}), false);
    }
    Rng rng(cfg.seed);
    const auto samples = synthesize_baseline_collection(named.scene, handles, cfg.count, rng, cfg.train.subset_law);
    std::ostringstream captions;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        char image[32], mask[32];
        std::snprintf(image, sizeof image, "baseline_%04zu.png", i);
        std::snprintf(mask, sizeof mask, "mask_%04zu.png", i);
        write_png(dir / image, samples[i].image);
        write_png(dir / mask, samples[i].mask);
        captions << json{{"image", image},         {"mask", mask},
                         {"caption", samples[i].prompt}, {"subset", samples[i].subset},
                         {"flipped", samples[i].flipped}}
                        .dump()
                 << "\n";
    }
    write_text(dir / "captions.jsonl", captions.str());
    out << "wrote " << samples.size() << " baseline images\n";
    return ok;
}

int cmd_make_scene(const RunConfig& cfg, std::ostream& out) {
    const NamedScene named = load_scene(cfg.scene);
    const fs::path dir = prepare_out(cfg);
    echo_config(dir, cfg);
    write_scene(dir, named);
    out << (dir / "scene.json").string() << "\n";
    return ok;
}

}  // namespace

// ---- configuration ----

void RunConfig::resolve() {
    TrainConfig t;
    try {
        apply_preset(t, preset);
        apply_variant(t, variant);
        t = train_config_from_json(train_overrides, t);
    } catch (const ConfigError& e) {
        throw ValidationError(e.what());
    }
    t.seed = seed;
    try {
        t.validate();
        schedule_from_json(schedule);
    } catch (const std::invalid_argument& e) {
        throw ValidationError(e.what());
    }
    if (sampler_steps == 0) throw ValidationError("--steps must be positive");
    train = t;
}

json RunConfig::to_json() const {
    json j{{"command", command},
           {"scene", scene},
           {"out", out},
           {"seed", seed},
           {"preset", preset},
           {"variant", variant},
           {"train", decomp::to_json(train)},
           {"denoiser", decomp::to_json(denoiser)},
           {"schedule", schedule_to_json(schedule_from_json(schedule))},
           {"sampler_steps", sampler_steps},
           {"checkpoint", checkpoint},
           {"prompt", prompt},
           {"count", count},
           {"timestep", timestep},
           {"templates", templates},
           {"harvest",
            {{"annotations", harvest.annotations},
             {"images", harvest.images},
             {"panoptic", harvest.panoptic},
             {"size", harvest.size},
             {"min_fraction", harvest.min_fraction}}}};
    return j;
}

void merge_config(RunConfig& cfg, const json& doc) {
    if (!doc.is_object()) throw ValidationError("config: expected an object");
    std::set<std::string> seen;
    take(doc, "scene", cfg.scene, seen);
    take(doc, "out", cfg.out, seen);
    take(doc, "seed", cfg.seed, seen);
    take(doc, "preset", cfg.preset, seen);
    take(doc, "variant", cfg.variant, seen);
    take(doc, "sampler_steps", cfg.sampler_steps, seen);
    take(doc, "checkpoint", cfg.checkpoint, seen);
    take(doc, "prompt", cfg.prompt, seen);
    take(doc, "count", cfg.count, seen);
    take(doc, "timestep", cfg.timestep, seen);
    take(doc, "templates", cfg.templates, seen);
    seen.insert("command");  // echoed configs carry it
    try {
        for (const char* key : {"train", "denoiser", "schedule"}) {
            seen.insert(key);
            if (!doc.contains(key)) continue;
            const json& v = doc.at(key);
            if (!v.is_object()) throw ValidationError(std::string("config.") + key + ": expected an object");
            if (std::string_view(key) == "train") {
                train_config_from_json(v);  // reject unknown keys now
                cfg.train_overrides.merge_patch(v);
            } else if (std::string_view(key) == "denoiser") {
                cfg.denoiser = denoiser_config_from_json(v, cfg.denoiser);
            } else {
                cfg.schedule.merge_patch(v);
            }
        }
    } catch (const ConfigError& e) {
        throw ValidationError(e.what());
    }
    seen.insert("harvest");
    if (doc.contains("harvest")) {
        const json& h = doc.at("harvest");
        if (!h.is_object()) throw ValidationError("config.harvest: expected an object");
        std::set<std::string> hs;
        take(h, "annotations", cfg.harvest.annotations, hs);
        take(h, "images", cfg.harvest.images, hs);
        take(h, "panoptic", cfg.harvest.panoptic, hs);
        take(h, "size", cfg.harvest.size, hs);
        take(h, "min_fraction", cfg.harvest.min_fraction, hs);
        reject_unknown(h, hs, "config.harvest");
    }
    reject_unknown(doc, seen, "config");
}

NamedScene load_scene(const std::string& manifest) {
    if (manifest == "synthetic") return {"synthetic", synthetic_two_concept_scene()};
    const fs::path path(manifest);
    const json doc = read_json_file(path, "scene manifest");
    const fs::path base = path.parent_path();
    auto image_at = [&](const json& v, const char* what) {
        if (!v.is_string()) throw ValidationError(path.string() + ": " + what + " must be a path string");
        const fs::path p = base / v.get<std::string>();
        if (!fs::exists(p)) throw ValidationError("missing " + std::string(what) + " file " + p.string());
        return p;
    };
    NamedScene out;
    out.id = doc.value("id", path.parent_path().filename().string());
    if (out.id.empty()) out.id = path.stem().string();
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        if (it.key() != "id" && it.key() != "image" && it.key() != "masks")
            throw ValidationError(path.string() + ": unknown key '" + it.key() + "'");
    }
    if (!doc.contains("image") || !doc.contains("masks") || !doc["masks"].is_array())
        throw ValidationError(path.string() + ": needs \"image\" and a \"masks\" array");
    try {
        out.scene.image = read_image(image_at(doc["image"], "image"));
        for (const json& m : doc["masks"]) {
            if (!m.is_object() || !m.contains("name") || !m.contains("path") || !m["name"].is_string())
                throw ValidationError(path.string() + ": each mask needs \"name\" and \"path\"");
            out.scene.masks.push_back(read_mask(image_at(m["path"], "mask")));
            out.scene.names.push_back(m["name"].get<std::string>());
        }
    } catch (const ImageError& e) {
        throw ValidationError(e.what());
    }
    out.scene.validate();
    return out;
}

void write_scene(const fs::path& dir, const NamedScene& named) {
    fs::create_directories(dir);
    write_png(dir / "image.png", named.scene.image);
    json doc{{"id", named.id}, {"image", "image.png"}, {"masks", json::array()}};
    for (std::size_t i = 0; i < named.scene.size(); ++i) {
        const std::string file = "mask_" + std::to_string(i) + ".png";
        write_png(dir / file, named.scene.masks[i]);
        doc["masks"].push_back({{"name", named.scene.names[i]}, {"path", file}});
    }
    write_text(dir / "scene.json", doc.dump(2) + "\n");
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// ---- entry point ----

namespace {

struct Flags {
    std::optional<std::string> config, scene, out, variant, preset, prompt, checkpoint;
    std::optional<std::string> annotations, images, panoptic;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> count, steps, timestep, size;
    std::optional<double> min_fraction;
};

int dispatch(RunConfig& cfg, std::ostream& out) {
    const std::string& c = cfg.command;
    if (c == "extract") return cmd_extract(cfg, out);
    if (c == "generate") return cmd_generate(cfg, out);
    if (c == "visualize-attn") return cmd_visualize_attn(cfg, out);
    if (c == "evaluate") return cmd_evaluate(cfg, out);
    if (c == "harvest") return cmd_harvest(cfg, out);
    if (c == "synth-baseline") return cmd_synth_baseline(cfg, out);
    if (c == "make-scene") return cmd_make_scene(cfg, out);
    throw ValidationError("unknown command " + c);
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Extract multiple concepts from a single image and recompose them."};
    app.name("decomp");
    app.require_subcommand(1);
    Flags f;

    auto common = [&](CLI::App* s) {
        s->add_option("--config", f.config, "JSON config file; flags override it");
        s->add_option("--out", f.out, "output directory");
    };
    auto seeded = [&](CLI::App* s) { s->add_option("--seed", f.seed, "random seed"); };
    auto scene = [&](CLI::App* s) { s->add_option("--scene", f.scene, "scene manifest, or 'synthetic'"); };
    auto ckpt = [&](CLI::App* s) { s->add_option("--checkpoint", f.checkpoint, "checkpoint from extract"); };
    auto steps = [&](CLI::App* s) { s->add_option("--steps", f.steps, "sampler steps"); };

    CLI::App* extract = app.add_subcommand("extract", "learn one handle per masked concept");
    common(extract), seeded(extract), scene(extract);
    extract->add_option("--variant", f.variant, "ablation or baseline variant");
    extract->add_option("--preset", f.preset, "hyperparameter preset: paper or desk");
    extract->add_option("-t,--timestep", f.timestep, "timestep of the final attention maps");

    CLI::App* generate = app.add_subcommand("generate", "sample images from a prompt");
    common(generate), seeded(generate), ckpt(generate), steps(generate);
    generate->add_option("--prompt", f.prompt, "prompt using the checkpoint's handles");
    generate->add_option("--count", f.count, "number of images");

    CLI::App* visualize = app.add_subcommand("visualize-attn", "cross-attention maps of a generated image");
    common(visualize), seeded(visualize), ckpt(visualize), steps(visualize);
    visualize->add_option("--prompt", f.prompt, "prompt using the checkpoint's handles");
    visualize->add_option("-t,--timestep", f.timestep, "denoising timestep");

    CLI::App* evaluate = app.add_subcommand("evaluate", "prompt and identity similarity over the suite");
    common(evaluate), seeded(evaluate), ckpt(evaluate), steps(evaluate), scene(evaluate);

    CLI::App* harvest = app.add_subcommand("harvest", "filter COCO annotations into scenes");
    common(harvest);
    harvest->add_option("--annotations", f.annotations, "COCO instance or panoptic JSON");
    harvest->add_option("--images", f.images, "image directory");
    harvest->add_option("--panoptic", f.panoptic, "panoptic PNG directory");
    harvest->add_option("--size", f.size, "output side length");
    harvest->add_option("--min-fraction", f.min_fraction, "minimum area fraction per concept");

    CLI::App* synth = app.add_subcommand("synth-baseline", "masked-paste collection for baseline training");
    common(synth), seeded(synth), scene(synth);
    synth->add_option("--count", f.count, "number of images");

    CLI::App* make_scene = app.add_subcommand("make-scene", "write a scene manifest with its images");
    common(make_scene), scene(make_scene);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? ok : validation_error;
    }

    RunConfig cfg;
    cfg.command = app.get_subcommands().front()->get_name();
    try {
        if (f.config) merge_config(cfg, read_json_file(*f.config, "config"));
        if (f.scene) cfg.scene = *f.scene;
        if (f.out) cfg.out = *f.out;
        if (f.seed) cfg.seed = *f.seed;
        if (f.variant) cfg.variant = *f.variant;
        if (f.preset) cfg.preset = *f.preset;
        if (f.prompt) cfg.prompt = *f.prompt;
        if (f.checkpoint) cfg.checkpoint = *f.checkpoint;
        if (f.count) cfg.count = *f.count;
        if (f.steps) cfg.sampler_steps = *f.steps;
        if (f.timestep) cfg.timestep = *f.timestep;
        if (f.annotations) cfg.harvest.annotations = *f.annotations;
        if (f.images) cfg.harvest.images = *f.images;
        if (f.panoptic) cfg.harvest.panoptic = *f.panoptic;
        if (f.size) cfg.harvest.size = *f.size;
        if (f.min_fraction) cfg.harvest.min_fraction = *f.min_fraction;
        cfg.resolve();
        return dispatch(cfg, out);
    } catch (const TimestepError& e) {
        err << "error: " << e.what() << "\n";
        return validation_error;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << "\n";
        return validation_error;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return runtime_error;
    }
}

}  // namespace decomp::cli
