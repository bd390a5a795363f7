#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "decomp/denoiser.hpp"
#include "decomp/tensor.hpp"

namespace test {

inline decomp::Tensor random_tensor(std::mt19937_64& rng, decomp::Shape shape, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    decomp::Tensor t(std::move(shape));
    for (double& v : t.data()) v = nd(rng);
    return t;
}

inline decomp::Tensor uniform_tensor(std::mt19937_64& rng, decomp::Shape shape, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> ud(lo, hi);
    decomp::Tensor t(std::move(shape));
    for (double& v : t.data()) v = ud(rng);
    return t;
}

// 8x8 denoiser with 8-wide features, small enough for exhaustive finite differences.
inline decomp::DenoiserConfig shrunken_denoiser() {
    decomp::DenoiserConfig c;
    c.image_size = 8;
    c.d_model = 8;
    c.d_text = 8;
    c.time_dim = 8;
    return c;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("decomp_" + tag + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

private:
    std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void spit(const std::filesystem::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    out << s;
}

}  // namespace test
