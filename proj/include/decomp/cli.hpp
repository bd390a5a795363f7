#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "decomp/concepts.hpp"
#include "decomp/denoiser.hpp"
#include "decomp/eval.hpp"
#include "decomp/trainer.hpp"

namespace decomp::cli {

enum ExitCode { ok = 0, validation_error = 2, runtime_error = 3 };

// Bad flags, bad configuration, missing or unreadable inputs.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct HarvestSection {
    std::string annotations;
    std::string images;
    std::string panoptic;
    std::size_t size = 32;
    double min_fraction = 0.15;
};

// Everything a command reads. Resolution order: defaults, --config file,
// command-line flags; the train section is resolved as defaults, preset,
// variant, then the file's "train" overrides and the seed.
struct RunConfig {
    std::string command;
    std::string scene = "synthetic";  // manifest path, or "synthetic"
    std::string out;
    std::uint64_t seed = 0;
    std::string preset = "paper";
    std::string variant = "ours";
    nlohmann::json train_overrides = nlohmann::json::object();
    TrainConfig train;
    DenoiserConfig denoiser;
    nlohmann::json schedule = nlohmann::json::object();
    std::size_t sampler_steps = 50;
    std::string checkpoint;
    std::string prompt;
    std::size_t count = 4;
    std::size_t timestep = 100;
    std::vector<std::string> templates = default_templates();
    HarvestSection harvest;

    void resolve();  // recomputes `train`; throws ValidationError
    nlohmann::json to_json() const;
};

// Merges a config document into cfg. Unknown keys are rejected.
void merge_config(RunConfig& cfg, const nlohmann::json& doc);

// Scene manifest: {"image": "scene.png", "masks": [{"name": "square", "path": "m0.png"}, ...]},
// paths relative to the manifest. "synthetic" yields the built-in two-concept scene.
NamedScene load_scene(const std::string& manifest);
void write_scene(const std::filesystem::path& dir, const NamedScene& scene);

// 64-bit FNV-1a, used in generated file names.
std::uint64_t fnv1a(std::string_view s);

// Parses argv and runs one subcommand; returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace decomp::cli
