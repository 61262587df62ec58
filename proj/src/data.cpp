#include "lindistill/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace lindistill {

SyntheticSource::SyntheticSource(int image_size, int channels, std::uint64_t seed,
                                 std::size_t count)
    : image_size_(image_size), channels_(channels), seed_(seed), count_(count) {
    if (image_size <= 0 || channels <= 0 || count == 0) {
        throw std::invalid_argument("synthetic source: bad dimensions");
    }
}

Tensor SyntheticSource::image(std::size_t index) const {
    Rng rng(seed_ ^ (0x51AB5EEDull + 0x9E3779B97F4A7C15ull * (index % count_)));
    rng.next_u64();
    const int n = image_size_;
    const int c = channels_;
    Tensor img = Tensor::zeros({n, n, c});
    double* d = img.mutable_data().data();

    // gradient background
    std::vector<double> base(static_cast<std::size_t>(c));
    std::vector<double> gx(static_cast<std::size_t>(c)), gy(static_cast<std::size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        base[static_cast<std::size_t>(ch)] = rng.uniform(0.2, 0.8);
        gx[static_cast<std::size_t>(ch)] = rng.uniform(-0.3, 0.3);
        gy[static_cast<std::size_t>(ch)] = rng.uniform(-0.3, 0.3);
    }
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            for (int ch = 0; ch < c; ++ch) {
                const double fy = static_cast<double>(y) / n;
                const double fx = static_cast<double>(x) / n;
                d[(static_cast<std::size_t>(y) * n + x) * c + ch] =
                    base[static_cast<std::size_t>(ch)] + gx[static_cast<std::size_t>(ch)] * fx +
                    gy[static_cast<std::size_t>(ch)] * fy;
            }
        }
    }

    // textured shapes: rectangles and discs carrying smooth or hard-edged
    // sinusoid patterns at mixed frequencies
    const int shapes = rng.uniform_int(4, 9);
    for (int s = 0; s < shapes; ++s) {
        const bool disc = rng.uniform01() < 0.5;
        const bool hard_edges = rng.uniform01() < 0.4;
        const double cx = rng.uniform(0.1, 0.9) * n;
        const double cy = rng.uniform(0.1, 0.9) * n;
        const double rx = rng.uniform(0.08, 0.35) * n;
        const double ry = rng.uniform(0.08, 0.35) * n;
        const double fx = rng.uniform(0.2, 1.6);
        const double fy = rng.uniform(0.2, 1.6);
        const double phase = rng.uniform(0.0, 6.28318);
        std::vector<double> color(static_cast<std::size_t>(c));
        for (int ch = 0; ch < c; ++ch) color[static_cast<std::size_t>(ch)] = rng.uniform01();
        for (int y = 0; y < n; ++y) {
            for (int x = 0; x < n; ++x) {
                const double dx = (x - cx) / rx;
                const double dy = (y - cy) / ry;
                const bool inside = disc ? (dx * dx + dy * dy <= 1.0)
                                         : (std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0);
                if (!inside) continue;
                const double wave = std::sin(fx * x + fy * y + phase);
                const double tex = hard_edges ? (wave > 0.0 ? 1.0 : 0.15) : 0.5 + 0.5 * wave;
                for (int ch = 0; ch < c; ++ch) {
                    double& px = d[(static_cast<std::size_t>(y) * n + x) * c + ch];
                    px = 0.3 * px + 0.7 * color[static_cast<std::size_t>(ch)] * tex;
                }
            }
        }
    }
    // mild pixel noise so patches are never exact repeats
    for (double& v : img.mutable_data()) {
        v = std::clamp(v + rng.uniform(-0.06, 0.06), 0.0, 1.0);
    }
    return img;
}

DirectorySource::DirectorySource(const std::string& dir, int image_size, int channels)
    : image_size_(image_size), channels_(channels) {
    if (channels != 3) {
        throw std::invalid_argument("directory source: only 3-channel images are supported");
    }
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) {
        throw std::runtime_error("data directory not found: " + dir);
    }
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".ppm") {
            paths_.push_back(entry.path().string());
        }
    }
    std::sort(paths_.begin(), paths_.end());
    if (paths_.empty()) {
        throw std::runtime_error("no .ppm images in data directory: " + dir);
    }
}

Tensor DirectorySource::image(std::size_t index) const {
    Tensor img = read_ppm(paths_[index % paths_.size()]);
    if (img.shape()[0] != image_size_ || img.shape()[1] != image_size_) {
        throw std::runtime_error("image " + paths_[index % paths_.size()] + " is " +
                                 shape_str(img.shape()) + ", expected " +
                                 std::to_string(image_size_) + "x" + std::to_string(image_size_) +
                                 "x3");
    }
    return img;
}

std::unique_ptr<ImageSource> make_image_source(const std::string& spec, int image_size,
                                               int channels, std::uint64_t seed) {
    if (spec.empty() || spec == "synthetic") {
        return std::make_unique<SyntheticSource>(image_size, channels, seed);
    }
    return std::make_unique<DirectorySource>(spec, image_size, channels);
}

namespace {

int read_ppm_int(std::istream& in) {
    // skips whitespace and '#' comments per the PPM grammar
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    if (c == EOF || !std::isdigit(c)) throw std::runtime_error("malformed PPM header");
    int value = 0;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        c = in.get();
    }
    return value;
}

} // namespace

Tensor read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open image: " + path);
    char magic[2] = {0, 0};
    in.read(magic, 2);
    if (magic[0] != 'P' || magic[1] != '6') {
        throw std::runtime_error(path + " is not a binary PPM (P6) file");
    }
    const int w = read_ppm_int(in);
    const int h = read_ppm_int(in);
    const int maxval = read_ppm_int(in);
    if (w <= 0 || h <= 0 || maxval != 255) {
        throw std::runtime_error(path + ": unsupported PPM dimensions or maxval");
    }
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
        throw std::runtime_error(path + ": truncated PPM payload");
    }
    Tensor img = detail::make_tensor({h, w, 3});
    double* d = img.mutable_data().data();
    for (std::size_t i = 0; i < raw.size(); ++i) d[i] = raw[i] / 255.0;
    return img;
}

void write_ppm(const std::string& path, const Tensor& image) {
    if (image.shape().size() != 3 || image.shape()[2] != 3) {
        throw ShapeError("write_ppm: expected an H*W*3 image, got " + shape_str(image.shape()));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write image: " + path);
    out << "P6\n" << image.shape()[1] << " " << image.shape()[0] << "\n255\n";
    for (double v : image.data()) {
        const double clamped = std::clamp(v, 0.0, 1.0);
        out.put(static_cast<char>(static_cast<int>(std::lround(clamped * 255.0))));
    }
    if (!out) throw std::runtime_error("failed writing image: " + path);
}

} // namespace lindistill
