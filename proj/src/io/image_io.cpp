#include "decomp/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>

#include <jpeglib.h>
#include <png.h>

namespace decomp {
namespace {

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ImageError("cannot open image " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Image8 decode_png(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) {
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
        throw ImageError(path.string() + ": " + img.message);
    const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
    img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    Image8 out;
    out.width = img.width;
    out.height = img.height;
    out.channels = gray ? 1 : 3;
    out.pixels.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
        std::string msg = img.message;
        png_image_free(&img);
        throw ImageError(path.string() + ": " + msg);
    }
    return out;
}

struct JpegErr {
    jpeg_error_mgr mgr;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

void jpeg_fail(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegErr*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, err->message);
    std::longjmp(err->jump, 1);
}

Image8 decode_jpeg(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) {
    jpeg_decompress_struct cinfo;
    JpegErr err;
    cinfo.err = jpeg_std_error(&err.mgr);
    err.mgr.error_exit = jpeg_fail;
    Image8 out;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw ImageError(path.string() + ": " + err.message);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
    jpeg_start_decompress(&cinfo);
    out.width = cinfo.output_width;
    out.height = cinfo.output_height;
    out.channels = static_cast<std::size_t>(cinfo.output_components);
    out.pixels.resize(out.width * out.height * out.channels);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = out.pixels.data() + std::size_t(cinfo.output_scanline) * out.width * out.channels;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return out;
}

}  // namespace

Image8 read_image8(const std::filesystem::path& path) {
    auto bytes = slurp(path);
    static const std::uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (bytes.size() >= 8 && std::equal(png_sig, png_sig + 8, bytes.begin())) return decode_png(bytes, path);
    if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) return decode_jpeg(bytes, path);
    throw ImageError(path.string() + ": not a PNG or JPEG file");
}

void write_png8(const std::filesystem::path& path, const Image8& img) {
    if (img.channels != 1 && img.channels != 3) throw ImageError("write_png8: channels must be 1 or 3");
    if (img.pixels.size() != img.width * img.height * img.channels)
        throw ImageError("write_png8: pixel buffer does not match dimensions");
    png_image p;
    std::memset(&p, 0, sizeof p);
    p.version = PNG_IMAGE_VERSION;
    p.width = static_cast<png_uint_32>(img.width);
    p.height = static_cast<png_uint_32>(img.height);
    p.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&p, path.string().c_str(), 0, img.pixels.data(), 0, nullptr))
        throw ImageError("cannot write " + path.string() + ": " + p.message);
}

Image8 to_image8(const Tensor& image) {
    Image8 out;
    std::size_t c = 1;
    if (image.rank() == 2) {
        out.height = image.dim(0);
        out.width = image.dim(1);
    } else if (image.rank() == 3 && (image.dim(0) == 1 || image.dim(0) == 3)) {
        c = image.dim(0);
        out.height = image.dim(1);
        out.width = image.dim(2);
    } else {
        throw ImageError("to_image8: expected [H,W], [1,H,W] or [3,H,W], got " + shape_str(image.shape()));
    }
    out.channels = c;
    out.pixels.resize(out.width * out.height * c);
    const std::size_t plane = out.width * out.height;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < plane; ++i) {
            double v = std::clamp(image[ch * plane + i], 0.0, 1.0);
            out.pixels[i * c + ch] = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
    return out;
}

Tensor from_image8(const Image8& img) {
    const std::size_t plane = img.width * img.height;
    Tensor t({3, img.height, img.width});
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t ch = 0; ch < 3; ++ch) {
            std::size_t src = img.channels >= 3 ? ch : 0;
            t[ch * plane + i] = img.pixels[i * img.channels + src] / 255.0;
        }
    return t;
}

Tensor read_image(const std::filesystem::path& path) { return from_image8(read_image8(path)); }

Tensor read_mask(const std::filesystem::path& path) {
    Image8 img = read_image8(path);
    Tensor m({img.height, img.width});
    for (std::size_t i = 0; i < img.width * img.height; ++i) {
        bool on = false;
        for (std::size_t ch = 0; ch < img.channels; ++ch) on = on || img.pixels[i * img.channels + ch] != 0;
        m[i] = on ? 1.0 : 0.0;
    }
    return m;
}

void write_png(const std::filesystem::path& path, const Tensor& image) { write_png8(path, to_image8(image)); }

Tensor upscale_nearest(const Tensor& image, std::size_t factor) {
    if (factor == 0) throw std::invalid_argument("upscale_nearest: factor must be positive");
    const bool planar = image.rank() == 3;
    if (!planar && image.rank() != 2) throw ImageError("upscale_nearest: expected rank 2 or 3");
    std::size_t c = planar ? image.dim(0) : 1, h = image.dim(planar ? 1 : 0), w = image.dim(planar ? 2 : 1);
    Shape shape = planar ? Shape{c, h * factor, w * factor} : Shape{h * factor, w * factor};
    Tensor out(shape);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h * factor; ++y)
            for (std::size_t x = 0; x < w * factor; ++x)
                out[(ch * h * factor + y) * w * factor + x] = image[(ch * h + y / factor) * w + x / factor];
    return out;
}

}  // namespace decomp
