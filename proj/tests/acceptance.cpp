// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>

#include "json.hpp"

#include "decomp/cli.hpp"
#include "decomp/eval.hpp"
#include "decomp/image_io.hpp"
#include "decomp/trainer.hpp"
#include "support.hpp"

using namespace decomp;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << "[failed: " << what << "] ";
        }
    }
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// ---- 1 ----

void gradient_integrity(Outcome& o) {
    const auto t0 = Clock::now();
    Model model = Model::create(test::shrunken_denoiser(), NoiseSchedule::linear(), 3);
    add_handle(model.handles, "[v1]", "object", model.vocab, model.text);
    add_handle(model.handles, "[v2]", "object", model.vocab, model.text);
    Tensor left(Shape{8, 8}), right(Shape{8, 8});
    for (std::size_t i = 0; i < 64; ++i) (i % 8 < 4 ? left : right)[i] = 1.0;
    std::mt19937_64 rng(5);
    const Tensor z0 = test::uniform_tensor(rng, {3, 8, 8}, -1.0, 1.0);
    const Tensor eps = test::random_tensor(rng, {3, 8, 8});
    const std::size_t t = 300;
    Graph g;
    Binder bind(g, [](std::string_view) { return true; });
    const Forward f =
        forward(model, "a photo of [v1] and [v2]", g.input(add_noise(z0, t, eps, model.schedule)), t, bind);
    const NodeId rec = rec_loss(g, g.input(eps), f.prediction.eps_hat, mask_union({left, right}, {0, 1}));
    const std::vector<NodeId> maps{attention_map(g, f.prediction.records, f.tokens, f.tokens.position_of(0)),
                                   attention_map(g, f.prediction.records, f.tokens, f.tokens.position_of(1))};
    const NodeId attn = attn_loss(g, maps, {downsample_mask(left, 4), downsample_mask(right, 4)});
    const NodeId loss = ops::add(g, rec, ops::scale(g, attn, 0.01));
    double worst = 0.0;
    std::string worst_name;
    for (const auto& [name, id] : bind.parameters()) {
        const double e = fd_check(g, loss, id, 1e-5);
        if (e > worst) worst = e, worst_name = name;
    }
    const double secs = seconds_since(t0);
    o.detail << bind.parameters().size() << " groups, worst " << fmt("%.2e", worst) << " (" << worst_name << "), "
             << fmt("%.1f", secs) << " s ";
    o.require(worst < 1e-4, "fd error < 1e-4");
    o.require(secs < 60.0, "runtime < 60 s");
}

// ---- 2 ----

void loss_algebra(Outcome& o) {
    std::mt19937_64 rng(7);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor a = test::random_tensor(rng, {3, 16, 16});
        const Tensor b = test::random_tensor(rng, {3, 16, 16});
        double mse = 0.0;
        for (std::size_t i = 0; i < a.numel(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
        mse /= static_cast<double>(a.numel());
        worst = std::max(worst, std::abs(rec_loss(a, b, Tensor(Shape{16, 16}, 1.0)) - mse));
    }
    std::uniform_real_distribution<double> u(0.0, 3.0);
    bool exact = true;
    for (int i = 0; i < 1000; ++i) {
        const double rec = u(rng), attn = u(rng);
        exact = exact && total_loss(rec, attn, TrainConfig{}.lambda_attn).total == rec + 0.01 * attn;
    }
    o.detail << "max |rec - mse| " << fmt("%.1e", worst) << ", total exact: " << (exact ? "yes" : "no") << " ";
    o.require(worst <= 1e-12, "all-ones mask equals MSE to 1e-12");
    o.require(exact, "total = rec + 0.01 attn");
}

// ---- 3 ----

void two_phase_freeze(Outcome& o) {
    TrainConfig cfg;  // paper defaults: phase 1 is 400 steps at 5e-4
    cfg.phase2.steps = 0;
    const Scene scene = synthetic_two_concept_scene();
    TrainingState state = init_training(scene, cfg);
    const std::string unet0 = state.model.tensor_bytes("unet."), text0 = state.model.tensor_bytes("text.");
    const std::string handles0 = state.model.tensor_bytes("handle.");
    std::vector<std::string> handle_bytes0;
    for (const auto& h : state.model.handles.all()) handle_bytes0.push_back(state.model.tensor_bytes("handle." + h.name));
    const Checkpoint ck = train(state);
    std::size_t moved = 0;
    for (std::size_t i = 0; i < ck.model.handles.size(); ++i)
        moved += ck.model.tensor_bytes("handle." + ck.model.handles.at(i).name) != handle_bytes0[i];
    const bool unet_same = ck.model.tensor_bytes("unet.") == unet0;
    const bool text_same = ck.model.tensor_bytes("text.") == text0;
    o.detail << ck.phase1_steps << " phase-1 steps at lr " << cfg.phase1.lr << "; denoiser identical: "
             << (unet_same ? "yes" : "no") << ", text encoder identical: " << (text_same ? "yes" : "no") << ", "
             << moved << "/" << ck.model.handles.size() << " handles changed ";
    o.require(ck.phase1_steps == 400, "400 phase-1 steps");
    o.require(unet_same && text_same, "frozen bytes identical");
    o.require(moved >= 1, "a handle embedding changed");
}

// ---- 4 ----

double two_stage_probability(std::uint32_t bits, std::size_t n) {
    const std::size_t k = static_cast<std::size_t>(std::popcount(bits));
    double binom = 1.0;
    for (std::size_t i = 0; i < k; ++i) binom = binom * static_cast<double>(n - i) / static_cast<double>(i + 1);
    return 1.0 / static_cast<double>(n) / binom;
}

void union_law(Outcome& o) {
    Rng rng(2024);
    constexpr std::size_t n = 3, draws = 100000;
    std::map<std::uint32_t, std::size_t> counts;
    for (std::size_t i = 0; i < draws; ++i) {
        std::uint32_t b = 0;
        for (std::size_t c : union_sample(rng, n)) b |= 1u << c;
        ++counts[b];
    }
    double worst_z = 0.0;
    for (std::uint32_t b = 1; b < 8; ++b) {
        const double p = two_stage_probability(b, n);
        const double z = std::abs(static_cast<double>(counts[b]) - draws * p) / std::sqrt(draws * p * (1 - p));
        worst_z = std::max(worst_z, z);
    }
    o.detail << counts.size() << " subsets observed, worst deviation " << fmt("%.2f", worst_z) << " sigma ";
    o.require(counts.size() == 7, "all 7 subsets observed");
    o.require(worst_z < 3.0, "frequencies within 3 sigma");
}

// ---- 5 ----

void forward_statistics(Outcome& o) {
    const NoiseSchedule s = NoiseSchedule::linear();
    const std::size_t t = s.steps / 2;
    const double ab = s.alpha_bar[t];
    const Tensor z0 = Tensor::from({4}, {-0.9, -0.2, 0.3, 1.0});
    std::mt19937_64 rng(99);
    constexpr std::size_t n = 10000;
    std::vector<double> sum(4), sum2(4);
    for (std::size_t k = 0; k < n; ++k) {
        const Tensor zt = add_noise(z0, t, test::random_tensor(rng, {4}), s);
        for (std::size_t i = 0; i < 4; ++i) sum[i] += zt[i], sum2[i] += zt[i] * zt[i];
    }
    const double var = 1.0 - ab;
    double worst_mean = 0.0, worst_var = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        const double mean = sum[i] / n;
        const double sv = (sum2[i] - n * mean * mean) / (n - 1);
        worst_mean = std::max(worst_mean, std::abs(mean - std::sqrt(ab) * z0[i]) / std::sqrt(var / n));
        worst_var = std::max(worst_var, std::abs(sv - var) / (var * std::sqrt(2.0 / (n - 1))));
    }
    o.detail << "t=" << t << ", mean within " << fmt("%.2f", worst_mean) << " sigma, variance within "
             << fmt("%.2f", worst_var) << " sigma ";
    o.require(worst_mean < 3.0 && worst_var < 3.0, "moments within 3 sigma");
}

// ---- 6 ----

struct DeskRun {
    double iou = 0.0;
    double multi_identity = 0.0;
    double min_single_identity = 1.0;
    double max_spurious = 0.0;
};

DeskRun desk_run(const std::string& variant, bool score_singles) {
    const Scene scene = synthetic_two_concept_scene();
    TrainConfig cfg;
    apply_preset(cfg, "desk");
    apply_variant(cfg, variant);
    const Checkpoint ck = train(scene, cfg);
    DeskRun r;
    r.iou = attention_iou(ck.model, scene, default_iou_timesteps(), 7);
    const ToyEmbedder emb;
    const ColorThresholdSegmenter seg;
    auto identity = [&](const Tensor& img, std::size_t c) {
        try {
            return identity_similarity(scene.image, scene.masks[c], img, scene.names[c], seg, emb);
        } catch (const EmptySegmentation&) {
            return 0.0;
        }
    };
    constexpr std::uint64_t seeds = 4;
    for (std::uint64_t sd = 0; sd < seeds; ++sd) {
        const Tensor img = sample(ck.model, "a photo of [v1] and [v2]", 50, 100 + sd);
        r.multi_identity += (identity(img, 0) + identity(img, 1)) / 2.0 / seeds;
    }
    if (!score_singles) return r;
    for (std::size_t c = 0; c < 2; ++c)
        for (std::uint64_t sd = 0; sd < seeds; ++sd) {
            const Tensor img = sample(ck.model, "a photo of " + concept_handle(c), 50, sd);
            r.min_single_identity = std::min(r.min_single_identity, identity(img, c));
            r.max_spurious = std::max(r.max_spurious, mask_fraction(seg.segment(img, scene.names[1 - c])));
        }
    return r;
}

void desk_disentanglement(Outcome& o) {
    const auto t0 = Clock::now();
    const DeskRun ours = desk_run("ours", true);
    const DeskRun no_attn = desk_run("no-attn-loss", false);
    const DeskRun no_union = desk_run("no-union", false);
    const double secs = seconds_since(t0);
    o.detail << "IoU ours " << fmt("%.3f", ours.iou) << " / no-attn-loss " << fmt("%.3f", no_attn.iou)
             << "; multi-concept identity ours " << fmt("%.3f", ours.multi_identity) << " / no-union "
             << fmt("%.3f", no_union.multi_identity) << "; single-concept identity min "
             << fmt("%.3f", ours.min_single_identity) << ", spurious max " << fmt("%.3f", ours.max_spurious) << "; "
             << fmt("%.0f", secs) << " s ";
    o.require(ours.iou >= 0.5, "(a) IoU >= 0.5");
    o.require(no_attn.iou < ours.iou, "(b) no-attn-loss IoU lower");
    o.require(no_union.multi_identity < ours.multi_identity, "(c) no-union multi-concept identity lower");
    o.require(ours.min_single_identity > 0.8, "(d) single-concept identity > 0.8");
    o.require(ours.max_spurious < 0.05, "(d) spurious area < 5%");
    o.require(secs < 600.0, "runtime < 10 min");
}

// ---- 7 ----

json rect(double x0, double y0, double x1, double y1) {
    return json::array({json::array({x0, y0, x1, y0, x1, y1, x0, y1})});
}

void metric_oracles(Outcome& o) {
    const Scene s = synthetic_two_concept_scene();
    const ToyEmbedder emb;
    const ColorThresholdSegmenter seg;
    double worst_self = 0.0;
    for (std::size_t c = 0; c < s.size(); ++c)
        worst_self = std::max(worst_self,
                              std::abs(identity_similarity(s.image, s.masks[c], s.image, s.names[c], seg, emb) - 1.0));

    std::mt19937_64 rng(17);
    double lo = 1.0, hi = -1.0;
    for (int i = 0; i < 200; ++i) {
        const Tensor img = test::uniform_tensor(rng, {3, 8, 8});
        for (const char* p : {"a photo of a red square", "a blue disc on a table", "a dog"}) {
            const double v = prompt_similarity(img, p, emb);
            lo = std::min(lo, v), hi = std::max(hi, v);
        }
    }

    Scene three = s;
    three.masks.push_back(background_mask(s));
    three.names.push_back("green");
    const std::vector<NamedScene> fixtures{{"two", s}, {"three", three}};
    bool sizes_ok = build_eval_suite({fixtures[0]}).size() == 10 * 3 && build_eval_suite({fixtures[1]}).size() == 10 * 7 &&
                    build_eval_suite(fixtures, {"{tokens}", "a {tokens}"}).size() == 2 * (3 + 7);

    test::TempDir dir("accept_harvest");
    for (const char* name : {"pets.png", "small.png", "zebra.png", "same.png"})
        write_png(dir / name, Tensor(Shape{3, 20, 20}, 0.5));
    json doc{{"categories",
              {{{"id", 1}, {"name", "cat"}}, {{"id", 2}, {"name", "dog"}}, {{"id", 3}, {"name", "zebra"}}}},
             {"images", json::array()},
             {"annotations", json::array()}};
    int id = 0;
    for (const char* name : {"pets.png", "small.png", "zebra.png", "same.png"})
        doc["images"].push_back({{"id", ++id}, {"file_name", name}, {"width", 20}, {"height", 20}});
    auto ann = [&](int image, int cat, json seg_json) {
        doc["annotations"].push_back({{"image_id", image}, {"category_id", cat}, {"segmentation", seg_json}});
    };
    ann(1, 1, rect(0, 0, 10, 8));    // cat 20%
    ann(1, 2, rect(10, 0, 20, 12));  // dog 30%
    ann(2, 1, rect(0, 0, 8, 7));     // cat 14%
    ann(2, 2, rect(0, 10, 20, 20));  // dog 50%
    ann(3, 3, rect(0, 0, 20, 8));    // zebra 40%
    ann(3, 2, rect(0, 10, 20, 16));  // dog 30%
    ann(4, 2, rect(0, 0, 20, 8));    // two dogs
    ann(4, 2, rect(0, 10, 20, 20));
    test::spit(dir / "instances.json", doc.dump());
    HarvestOptions opts;
    opts.images_dir = dir.path();
    opts.size = 10;
    const auto kept = harvest_scenes(dir / "instances.json", opts);
    std::vector<std::string> ids;
    for (const auto& h : kept) ids.push_back(h.scene.id);
    const bool harvest_ok = ids == std::vector<std::string>{"pets"} &&
                            kept[0].scene.scene.names == std::vector<std::string>{"dog", "cat"};

    o.detail << "self-similarity error " << fmt("%.1e", worst_self) << ", prompt similarity in [" << fmt("%.3f", lo)
             << ", " << fmt("%.3f", hi) << "], suite sizes " << (sizes_ok ? "ok" : "wrong") << ", harvest kept "
             << ids.size() << " of 4 ";
    o.require(worst_self <= 1e-6, "self-similarity 1 +- 1e-6");
    o.require(lo >= -1.0 && hi <= 1.0, "prompt similarity bounded");
    o.require(sizes_ok, "suite size formula");
    o.require(harvest_ok, "harvest filter rules");
}

// ---- 8 ----

int cli(std::vector<std::string> args) {
    args.insert(args.begin(), "decomp");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = decomp::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    if (code != 0) std::fprintf(stderr, "%s", err.str().c_str());
    return code;
}

void determinism(Outcome& o) {
    test::TempDir dir("accept_det");
    test::spit(dir / "config.json",
               json{{"scene", "synthetic"},
                    {"seed", 31},
                    {"preset", "desk"},
                    {"train", {{"phase1", {{"steps", 20}}}, {"phase2", {{"steps", 20}}}}},
                    {"sampler_steps", 10},
                    {"templates", {"a photo of {tokens}", "a photo of {tokens} in the snow"}}}
                   .dump());
    const std::string cfg = (dir / "config.json").string();
    bool ran = true;
    for (const char* run : {"a", "b"}) {
        ran = ran && cli({"extract", "--config", cfg, "--out", (dir / run / "extract").string()}) == 0;
        ran = ran && cli({"evaluate", "--config", cfg, "--checkpoint", (dir / run / "extract" / "checkpoint.bin").string(),
                          "--out", (dir / run / "evaluate").string()}) == 0;
    }
    o.require(ran, "commands succeed");
    if (!ran) return;
    const std::string ck_a = test::slurp(dir / "a" / "extract" / "checkpoint.bin");
    const bool ck_same = ck_a == test::slurp(dir / "b" / "extract" / "checkpoint.bin");
    const bool log_same =
        test::slurp(dir / "a" / "extract" / "loss.csv") == test::slurp(dir / "b" / "extract" / "loss.csv");
    const std::string rep_a = test::slurp(dir / "a" / "evaluate" / "report.jsonl");
    const bool rep_same = rep_a == test::slurp(dir / "b" / "evaluate" / "report.jsonl");
    o.detail << "checkpoint " << ck_a.size() << " bytes " << (ck_same ? "identical" : "differs") << ", loss log "
             << (log_same ? "identical" : "differs") << ", report " << rep_a.size() << " bytes "
             << (rep_same ? "identical" : "differs") << " ";
    o.require(ck_same && log_same, "extract bit-identical");
    o.require(rep_same && !rep_a.empty(), "evaluate bit-identical");
}

// ---- 9 ----

void baseline_contract(Outcome& o) {
    const Scene scene = synthetic_two_concept_scene();
    TrainingState state = init_training(scene, TrainConfig{});
    Rng rng(5);
    const auto collection = synthesize_baseline_collection(scene, state.model.handles, 500, rng);
    const std::regex grammar(R"(a photo of \[v[0-9]+\]( and \[v[0-9]+\])*)");
    std::size_t constant = 0, captions = 0;
    const std::size_t plane = scene.height() * scene.width();
    for (const BaselineSample& b : collection) {
        bool same = true;
        std::size_t first = plane;
        for (std::size_t i = 0; i < plane && same; ++i) {
            if (b.mask[i] != 0.0) continue;
            if (first == plane) first = i;
            for (std::size_t c = 0; c < 3; ++c) same = same && b.image[c * plane + i] == b.image[c * plane + first];
        }
        constant += same;
        captions += std::regex_match(b.prompt, grammar) && b.prompt == build_prompt(b.subset, state.model.handles);
    }
    o.detail << constant << "/" << collection.size() << " constant backgrounds, " << captions << "/"
             << collection.size() << " captions match ";
    o.require(collection.size() == 500, "collection size");
    o.require(constant == collection.size(), "exactly constant outside the mask");
    o.require(captions == collection.size(), "caption grammar");
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria{
        {"gradient integrity", gradient_integrity},
        {"loss algebra", loss_algebra},
        {"two-phase freeze", two_phase_freeze},
        {"union-sampling law", union_law},
        {"forward-process statistics", forward_statistics},
        {"desk-scale disentanglement", desk_disentanglement},
        {"metric oracles", metric_oracles},
        {"determinism", determinism},
        {"baseline synthesis contract", baseline_contract},
    };
    std::set<std::size_t> only;
    for (int i = 1; i < argc; ++i) only.insert(std::stoul(argv[i]));
    int failed = 0;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        if (!only.empty() && !only.count(k + 1)) continue;
        Outcome o;
        try {
            criteria[k].second(o);
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail << "[exception: " << e.what() << "] ";
        }
        std::string detail = o.detail.str();
        if (!detail.empty() && detail.back() == ' ') detail.pop_back();
        std::printf("%s %zu %s: %s\n", o.pass ? "PASS" : "FAIL", k + 1, criteria[k].first.c_str(), detail.c_str());
        std::fflush(stdout);
        failed += !o.pass;
    }
    return failed == 0 ? 0 : 1;
}
