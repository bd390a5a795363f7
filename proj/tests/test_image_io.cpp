#include <cstdio>

#include <jpeglib.h>

#include "decomp/image_io.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace decomp;

namespace {

void write_gray_jpeg(const std::filesystem::path& path, std::size_t w, std::size_t h, std::uint8_t value) {
    jpeg_compress_struct cinfo;
    jpeg_error_mgr jerr;
    cinfo.err = jpeg_std_error(&jerr);
    jpeg_create_compress(&cinfo);
    std::FILE* f = std::fopen(path.string().c_str(), "wb");
    REQUIRE(f != nullptr);
    jpeg_stdio_dest(&cinfo, f);
    cinfo.image_width = static_cast<JDIMENSION>(w);
    cinfo.image_height = static_cast<JDIMENSION>(h);
    cinfo.input_components = 1;
    cinfo.in_color_space = JCS_GRAYSCALE;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, 100, TRUE);
    jpeg_start_compress(&cinfo, TRUE);
    std::vector<std::uint8_t> row(w, value);
    while (cinfo.next_scanline < cinfo.image_height) {
        JSAMPROW r = row.data();
        jpeg_write_scanlines(&cinfo, &r, 1);
    }
    jpeg_finish_compress(&cinfo);
    jpeg_destroy_compress(&cinfo);
    std::fclose(f);
}

}  // namespace

TEST_CASE("8-bit images round-trip through PNG exactly") {
    test::TempDir dir("png");
    std::mt19937_64 rng(1);
    Tensor img(Shape{3, 5, 7});
    std::uniform_int_distribution<int> byte(0, 255);
    for (double& v : img.data()) v = byte(rng) / 255.0;
    write_png(dir / "a.png", img);
    const Tensor back = read_image(dir / "a.png");
    REQUIRE(back.shape() == img.shape());
    CHECK(back.values() == img.values());
    const Image8 raw = read_image8(dir / "a.png");
    CHECK(raw.channels == 3);
    CHECK(raw.width == 7);
    CHECK(raw.height == 5);
}

TEST_CASE("writing clamps and rounds to the nearest 8-bit level") {
    const Image8 px = to_image8(Tensor::from({1, 1, 5}, {-0.5, 1.5, 0.5, 1.0 / 255.0 * 0.49, 1.0 / 255.0 * 0.51}));
    CHECK(px.channels == 1);
    CHECK(px.pixels == std::vector<std::uint8_t>{0, 255, 128, 0, 1});
    CHECK_THROWS_AS(to_image8(Tensor(Shape{2, 2, 2})), ImageError);
}

TEST_CASE("grayscale files are replicated to three channels") {
    test::TempDir dir("gray");
    write_png(dir / "g.png", Tensor::from({2, 2}, {0.0, 1.0, 0.2, 0.6}));
    const Tensor t = read_image(dir / "g.png");
    REQUIRE(t.shape() == Shape{3, 2, 2});
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(t[c * 4 + 1] == 1.0);
        CHECK(t[c * 4 + 2] == 51.0 / 255.0);
    }
}

TEST_CASE("any nonzero channel marks a mask pixel as inside") {
    test::TempDir dir("mask");
    write_png8(dir / "m.png", Image8{3, 1, 3, {0, 0, 0, 0, 1, 0, 0, 0, 200}});
    CHECK(read_mask(dir / "m.png").values() == std::vector<double>{0, 1, 1});
    write_png8(dir / "g.png", Image8{2, 1, 1, {0, 7}});
    CHECK(read_mask(dir / "g.png").values() == std::vector<double>{0, 1});
}

TEST_CASE("JPEG input is sniffed from the header") {
    test::TempDir dir("jpeg");
    write_gray_jpeg(dir / "photo.png", 16, 8, 120);  // misleading extension on purpose
    const Tensor t = read_image(dir / "photo.png");
    REQUIRE(t.shape() == Shape{3, 8, 16});
    for (double v : t.data()) CHECK(std::abs(v - 120.0 / 255.0) <= 2.0 / 255.0);
}

TEST_CASE("unreadable files raise ImageError") {
    test::TempDir dir("bad");
    test::spit(dir / "x.png", "definitely not an image");
    CHECK_THROWS_AS(read_image(dir / "x.png"), ImageError);
    CHECK_THROWS_AS(read_image(dir / "missing.png"), ImageError);
    std::string truncated = "\x89PNG\r\n\x1a\n";
    truncated += "garbage";
    test::spit(dir / "t.png", truncated);
    CHECK_THROWS_AS(read_image(dir / "t.png"), ImageError);
    test::spit(dir / "t.jpg", std::string("\xFF\xD8\xFF\xE0", 4) + "junk");
    CHECK_THROWS_AS(read_image(dir / "t.jpg"), ImageError);
    CHECK_THROWS_AS(write_png8(dir / "w.png", Image8{2, 2, 3, {1, 2, 3}}), ImageError);
}

TEST_CASE("nearest upscaling repeats pixels") {
    const Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
    CHECK(upscale_nearest(m, 2).values() ==
          std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
    const Tensor c = upscale_nearest(Tensor::from({2, 1, 1}, {5, 6}), 3);
    CHECK(c.shape() == Shape{2, 3, 3});
    CHECK(c[8] == 5);
    CHECK(c[9] == 6);
    CHECK_THROWS_AS(upscale_nearest(m, 0), std::invalid_argument);
}
