#include "bhn/imageio.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace bhn {

void write_pgm(const std::string& path, const Tensor& image) {
    if (image.shape.size() != 2) fail("write_pgm: image must be [H x W]");
    const int h = image.shape[0], w = image.shape[1];
    float lo = image.data[0], hi = image.data[0];
    for (float v : image.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) fail("write_pgm: cannot open '" + path + "'");
    os << "P5\n" << w << " " << h << "\n255\n";
    const float span = hi > lo ? hi - lo : 0.0f;
    std::vector<unsigned char> row(static_cast<std::size_t>(w));
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const float v = image.data[static_cast<std::size_t>(y) * w + x];
            row[static_cast<std::size_t>(x)] =
                span == 0.0f ? 0
                             : static_cast<unsigned char>(std::lround((v - lo) / span * 255.0f));
        }
        os.write(reinterpret_cast<const char*>(row.data()), w);
    }
    if (!os) fail("write_pgm: write failed for '" + path + "'");
}

namespace {

void put_be32(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v >> 24));
    out.push_back(static_cast<unsigned char>(v >> 16));
    out.push_back(static_cast<unsigned char>(v >> 8));
    out.push_back(static_cast<unsigned char>(v));
}

void put_chunk(std::ofstream& os, const char type[4], const std::vector<unsigned char>& data) {
    std::vector<unsigned char> head;
    put_be32(head, static_cast<std::uint32_t>(data.size()));
    os.write(reinterpret_cast<const char*>(head.data()), 4);
    os.write(type, 4);
    if (!data.empty()) os.write(reinterpret_cast<const char*>(data.data()),
                                static_cast<std::streamsize>(data.size()));
    std::uint32_t crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(type), 4);
    if (!data.empty()) crc = crc32(crc, data.data(), static_cast<uInt>(data.size()));
    std::vector<unsigned char> tail;
    put_be32(tail, crc);
    os.write(reinterpret_cast<const char*>(tail.data()), 4);
}

}  // namespace

void write_png(const std::string& path, const RgbImage& image) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail("write_png: cannot open '" + path + "'");
    static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    os.write(reinterpret_cast<const char*>(sig), 8);

    std::vector<unsigned char> ihdr;
    put_be32(ihdr, static_cast<std::uint32_t>(image.width));
    put_be32(ihdr, static_cast<std::uint32_t>(image.height));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // color type: truecolor
    ihdr.push_back(0);   // compression
    ihdr.push_back(0);   // filter
    ihdr.push_back(0);   // interlace
    put_chunk(os, "IHDR", ihdr);

    // raw scanlines, filter byte 0 per row
    const std::size_t stride = static_cast<std::size_t>(image.width) * 3;
    std::vector<unsigned char> raw((stride + 1) * static_cast<std::size_t>(image.height));
    for (int y = 0; y < image.height; ++y) {
        raw[(stride + 1) * static_cast<std::size_t>(y)] = 0;
        std::memcpy(raw.data() + (stride + 1) * static_cast<std::size_t>(y) + 1,
                    image.pixels.data() + stride * static_cast<std::size_t>(y), stride);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> idat(bound);
    if (compress2(idat.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        fail("write_png: deflate failed");
    idat.resize(bound);
    put_chunk(os, "IDAT", idat);
    put_chunk(os, "IEND", {});
    if (!os) fail("write_png: write failed for '" + path + "'");
}

std::pair<int, int> png_dimensions(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("png_dimensions: cannot open '" + path + "'");
    unsigned char head[24];
    if (!is.read(reinterpret_cast<char*>(head), 24) || head[1] != 'P' || head[2] != 'N')
        fail("png_dimensions: '" + path + "' is not a PNG");
    auto be32 = [&](int off) {
        return (head[off] << 24) | (head[off + 1] << 16) | (head[off + 2] << 8) | head[off + 3];
    };
    return {be32(16), be32(20)};  // width, height
}

RgbImage montage(const std::vector<Tensor>& tiles, int rows, int cols) {
    if (tiles.empty()) fail("montage: no tiles");
    if (rows * cols < static_cast<int>(tiles.size()))
        fail("montage: grid " + std::to_string(rows) + "x" + std::to_string(cols) +
             " too small for " + std::to_string(tiles.size()) + " tiles");
    const int th = tiles[0].shape[0], tw = tiles[0].shape[1];
    const int gap = 2;
    float peak = 0;
    for (const auto& t : tiles)
        for (float v : t.data) peak = std::max(peak, std::fabs(v));
    RgbImage im = RgbImage::black(rows * (th + gap) + gap, cols * (tw + gap) + gap);
    for (std::size_t k = 0; k < tiles.size(); ++k) {
        const int r = static_cast<int>(k) / cols;
        const int c = static_cast<int>(k) % cols;
        const int oy = gap + r * (th + gap);
        const int ox = gap + c * (tw + gap);
        for (int y = 0; y < th; ++y)
            for (int x = 0; x < tw; ++x) {
                const float v = tiles[k].data[static_cast<std::size_t>(y) * tw + x];
                const float mag = peak > 0 ? std::fabs(v) / peak : 0.0f;
                const auto ch = static_cast<std::uint8_t>(std::lround(mag * 255.0f));
                if (v > 0)
                    im.set(oy + y, ox + x, ch, 0, 0);
                else
                    im.set(oy + y, ox + x, 0, ch, 0);
            }
    }
    return im;
}

RgbImage plot_series(const std::vector<double>& xs,
                     const std::vector<std::vector<double>>& series, int height, int width) {
    RgbImage im = RgbImage::black(height, width);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) im.set(y, x, 245, 245, 245);
    if (xs.empty() || series.empty()) return im;
    double lo = 0, hi = 0;  // include zero so the zero line is visible
    for (const auto& s : series)
        for (double v : s) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    if (hi - lo < 1e-12) hi = lo + 1;
    const int ml = 40, mr = 10, mt = 10, mb = 25;
    const double x0 = xs.front(), x1 = xs.back() > x0 ? xs.back() : x0 + 1;
    auto px = [&](double x) {
        return ml + static_cast<int>((x - x0) / (x1 - x0) * (width - ml - mr - 1));
    };
    auto py = [&](double v) {
        return mt + static_cast<int>((hi - v) / (hi - lo) * (height - mt - mb - 1));
    };
    // axes and zero line
    for (int x = ml; x < width - mr; ++x) {
        im.set(py(0.0), x, 120, 120, 120);
        im.set(height - mb, x, 30, 30, 30);
    }
    for (int y = mt; y < height - mb; ++y) im.set(y, ml, 30, 30, 30);
    const std::uint8_t palette[4][3] = {{200, 30, 30}, {30, 90, 200}, {30, 150, 60}, {150, 30, 150}};
    for (std::size_t s = 0; s < series.size(); ++s) {
        const auto& col = palette[s % 4];
        for (std::size_t i = 0; i + 1 < series[s].size() && i + 1 < xs.size(); ++i) {
            // draw segment by dense sampling
            const int xa = px(xs[i]), xb = px(xs[i + 1]);
            const int ya = py(series[s][i]), yb = py(series[s][i + 1]);
            const int steps = std::max(std::abs(xb - xa), std::abs(yb - ya)) + 1;
            for (int k = 0; k <= steps; ++k) {
                const int x = xa + (xb - xa) * k / steps;
                const int y = ya + (yb - ya) * k / steps;
                if (y >= 0 && y < height && x >= 0 && x < width)
                    im.set(y, x, col[0], col[1], col[2]);
            }
        }
    }
    return im;
}

}  // namespace bhn
