#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

#include "json.hpp"

#include "decomp/denoiser.hpp"
#include "decomp/diffusion.hpp"
#include "decomp/trainer.hpp"

namespace decomp {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// JSON views of the configuration types. The from_json functions start from
// `base`, override only the keys present, and throw ConfigError on unknown
// keys or wrongly typed values.
nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
nlohmann::json to_json(const DenoiserConfig& cfg);
DenoiserConfig denoiser_config_from_json(const nlohmann::json& j, DenoiserConfig base = {});
nlohmann::json schedule_to_json(const NoiseSchedule& s);
NoiseSchedule schedule_from_json(const nlohmann::json& j);

// Container layout:
//   "DCMPCKPT" | u32 version | u64 header length | JSON header | tensor blobs
// All integers and reals are little-endian; blobs are raw float64 arrays in
// header directory order.
inline constexpr std::string_view kCheckpointMagic = "DCMPCKPT";

std::string encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace decomp
