#pragma once

// Image sources for desk-scale runs: a seeded synthetic generator (textured
// shapes on a gradient background) and a directory of uncompressed binary
// PPM (P6) files.

#include <memory>
#include <string>
#include <vector>

#include "lindistill/tensor.hpp"

namespace lindistill {

class ImageSource {
public:
    virtual ~ImageSource() = default;
    virtual std::size_t size() const = 0;
    virtual Tensor image(std::size_t index) const = 0; // H*W*C in [0,1]
};

class SyntheticSource : public ImageSource {
public:
    SyntheticSource(int image_size, int channels, std::uint64_t seed,
                    std::size_t count = 512);
    std::size_t size() const override { return count_; }
    Tensor image(std::size_t index) const override;

private:
    int image_size_;
    int channels_;
    std::uint64_t seed_;
    std::size_t count_;
};

class DirectorySource : public ImageSource {
public:
    DirectorySource(const std::string& dir, int image_size, int channels);
    std::size_t size() const override { return paths_.size(); }
    Tensor image(std::size_t index) const override;

private:
    std::vector<std::string> paths_;
    int image_size_;
    int channels_;
};

// "synthetic" or a directory path.
std::unique_ptr<ImageSource> make_image_source(const std::string& spec, int image_size,
                                               int channels, std::uint64_t seed);

Tensor read_ppm(const std::string& path);              // H*W*3 in [0,1]
void write_ppm(const std::string& path, const Tensor& image);

} // namespace lindistill
