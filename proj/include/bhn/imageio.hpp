#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bhn/tensor.hpp"

namespace bhn {

/// 8-bit binary PGM from a [H x W] tensor, linearly rescaled to 0..255
/// (a constant image maps to 0).
void write_pgm(const std::string& path, const Tensor& image);

struct RgbImage {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels;  // row-major RGB triplets

    static RgbImage black(int h, int w) {
        RgbImage im;
        im.height = h;
        im.width = w;
        im.pixels.assign(static_cast<std::size_t>(h) * w * 3, 0);
        return im;
    }
    void set(int y, int x, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
        const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
        pixels[i] = r;
        pixels[i + 1] = g;
        pixels[i + 2] = b;
    }
};

/// Minimal RGB PNG writer (8-bit, no filtering beyond None).
void write_png(const std::string& path, const RgbImage& image);

/// Parses width/height out of a PNG's IHDR chunk.
std::pair<int, int> png_dimensions(const std::string& path);

/// Signed colormap grid: positive values red, negative green, intensity
/// by magnitude, normalized over the whole montage.
RgbImage montage(const std::vector<Tensor>& tiles, int rows, int cols);

/// Simple line plot of (x, y) series onto a raster, with a zero line.
RgbImage plot_series(const std::vector<double>& xs,
                     const std::vector<std::vector<double>>& series, int height = 360,
                     int width = 640);

}  // namespace bhn
