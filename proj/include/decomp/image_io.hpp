#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "decomp/tensor.hpp"

namespace decomp {

class ImageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Image8 {
    std::size_t width = 0, height = 0, channels = 0;
    std::vector<std::uint8_t> pixels;  // interleaved rows
};

// PNG or JPEG, sniffed from the file header.
Image8 read_image8(const std::filesystem::path& path);
void write_png8(const std::filesystem::path& path, const Image8& img);

// [3,H,W] in [0,1] (grayscale inputs are replicated; alpha is dropped).
Tensor read_image(const std::filesystem::path& path);
// Any nonzero pixel in any channel is inside. Returns [H,W] in {0,1}.
Tensor read_mask(const std::filesystem::path& path);

// Accepts [3,H,W], [1,H,W] or [H,W] with values in [0,1]; clamps and rounds to 8 bits.
void write_png(const std::filesystem::path& path, const Tensor& image);

Image8 to_image8(const Tensor& image);
Tensor from_image8(const Image8& img);

// Nearest-neighbour upscale of an [H,W] or [C,H,W] tensor by an integer factor.
Tensor upscale_nearest(const Tensor& image, std::size_t factor);

}  // namespace decomp
