#include "bhn/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace bhn {

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, const std::string& path, std::size_t offset) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        fail("'" + path + "': truncated at byte " + std::to_string(offset));
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

PatchSet extract_patches(const std::vector<Tensor>& images, int count, int size, Rng& rng) {
    if (images.empty()) fail("extract_patches: no images");
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto& im = images[i];
        if (im.shape.size() != 2 || im.shape[0] < size || im.shape[1] < size)
            fail("extract_patches: image " + std::to_string(i) + " of shape " +
                 shape_str(im.shape) + " is smaller than " + std::to_string(size) + "x" +
                 std::to_string(size));
    }
    const int area = size * size;
    PatchSet ps;
    ps.patch_size = size;
    ps.patches = Tensor::zeros({count, area});
    ps.source_ids.resize(static_cast<std::size_t>(count));
    constexpr int kMaxRetries = 64;
    for (int p = 0; p < count; ++p) {
        bool ok = false;
        for (int attempt = 0; attempt < kMaxRetries && !ok; ++attempt) {
            const int src = rng.uniform_int(0, static_cast<int>(images.size()) - 1);
            const Tensor& im = images[static_cast<std::size_t>(src)];
            const int y0 = rng.uniform_int(0, im.shape[0] - size);
            const int x0 = rng.uniform_int(0, im.shape[1] - size);
            double mean = 0;
            float* dst = ps.patches.data.data() + static_cast<std::size_t>(p) * area;
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    const float v = im.data[static_cast<std::size_t>(y0 + y) * im.shape[1] +
                                            (x0 + x)];
                    dst[y * size + x] = v;
                    mean += v;
                }
            mean /= area;
            double var = 0;
            for (int i = 0; i < area; ++i) {
                const double d = dst[i] - mean;
                var += d * d;
            }
            var /= area;
            if (var <= 0) continue;  // flat crop, redraw
            const double inv_std = 1.0 / std::sqrt(var);
            for (int i = 0; i < area; ++i)
                dst[i] = static_cast<float>((dst[i] - mean) * inv_std);
            ps.source_ids[static_cast<std::size_t>(p)] = src;
            ok = true;
        }
        if (!ok)
            fail("extract_patches: got zero-variance crops " + std::to_string(kMaxRetries) +
                 " times in a row (patch " + std::to_string(p) + ")");
    }
    return ps;
}

Tensor add_gaussian_noise(const Tensor& x, double mean, double std, Rng& rng) {
    if (std < 0) fail("add_gaussian_noise: negative std");
    Tensor out = x;
    if (std == 0 && mean == 0) return out;
    for (auto& v : out.data) v = static_cast<float>(v + rng.normal(mean, std));
    return out;
}

void save_episode(const std::string& path, const Episode& ep) {
    if (ep.height != 96 || ep.width != 96 || ep.frames.shape.size() != 3)
        fail("save_episode: frames must be [T x 96 x 96]");
    std::ofstream os(path, std::ios::binary);
    if (!os) fail("save_episode: cannot open '" + path + "'");
    os.write("BHNV", 4);
    put_u32(os, 1u);
    put_u32(os, static_cast<std::uint32_t>(ep.length()));
    put_u32(os, 96u);
    put_u32(os, 96u);
    std::vector<unsigned char> row(static_cast<std::size_t>(ep.frames.numel()));
    for (std::size_t i = 0; i < row.size(); ++i) {
        const float v = ep.frames.data[i];
        if (v < -1.0f || v > 1.0f) fail("save_episode: pixel outside [-1,1]");
        row[i] = static_cast<unsigned char>(std::lround((v + 1.0f) * 127.5f));
    }
    os.write(reinterpret_cast<const char*>(row.data()),
             static_cast<std::streamsize>(row.size()));
    if (!os) fail("save_episode: write failed for '" + path + "'");
}

Episode load_episode(const std::string& path) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) fail("load_episode: cannot open '" + path + "'");
    const std::size_t actual = static_cast<std::size_t>(is.tellg());
    is.seekg(0);
    char magic[4];
    if (!is.read(magic, 4)) fail("'" + path + "': truncated at byte 0");
    if (std::memcmp(magic, "BHNV", 4) != 0)
        fail("'" + path + "': bad magic at byte 0 (not a BHNV episode)");
    const std::uint32_t version = get_u32(is, path, 4);
    if (version != 1)
        fail("'" + path + "': unsupported version " + std::to_string(version) + " at byte 4");
    const std::uint32_t n_frames = get_u32(is, path, 8);
    const std::uint32_t h = get_u32(is, path, 12);
    const std::uint32_t w = get_u32(is, path, 16);
    if (h != 96 || w != 96)
        fail("'" + path + "': frame size " + std::to_string(h) + "x" + std::to_string(w) +
             " at byte 12, expected 96x96");
    const std::size_t expected = 20 + static_cast<std::size_t>(n_frames) * 96 * 96;
    if (actual != expected)
        fail("'" + path + "': expected " + std::to_string(expected) + " bytes, file has " +
             std::to_string(actual));
    Episode ep;
    ep.frames = Tensor::zeros({static_cast<int>(n_frames), 96, 96});
    std::vector<unsigned char> raw(static_cast<std::size_t>(n_frames) * 96 * 96);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        fail("'" + path + "': truncated at byte 20");
    for (std::size_t i = 0; i < raw.size(); ++i)
        ep.frames.data[i] = static_cast<float>(raw[i]) / 127.5f - 1.0f;
    return ep;
}

namespace {

/// Periodic 1-d value noise: smooth interpolation between seeded lattice
/// values.
std::vector<float> value_noise_1d(int period, int lattice, double amplitude, Rng& rng) {
    std::vector<double> knots(static_cast<std::size_t>(lattice));
    for (auto& k : knots) k = rng.uniform(-amplitude, amplitude);
    std::vector<float> out(static_cast<std::size_t>(period));
    for (int i = 0; i < period; ++i) {
        const double pos = static_cast<double>(i) * lattice / period;
        const int k0 = static_cast<int>(pos) % lattice;
        const int k1 = (k0 + 1) % lattice;
        const double frac = pos - std::floor(pos);
        const double s = frac * frac * (3 - 2 * frac);  // smoothstep
        out[static_cast<std::size_t>(i)] =
            static_cast<float>(knots[static_cast<std::size_t>(k0)] * (1 - s) +
                               knots[static_cast<std::size_t>(k1)] * s);
    }
    return out;
}

}  // namespace

EpisodeSet synth_video_generate(int episodes, int frames, Rng& rng) {
    if (episodes < 1 || frames < 1) fail("synth_video_generate: need episodes, frames >= 1");
    const int H = 96, W = 96;
    EpisodeSet set;
    std::vector<std::vector<float>> raw;  // float frames before calibration
    raw.reserve(static_cast<std::size_t>(episodes));
    for (int e = 0; e < episodes; ++e) {
        // per-episode track texture and dynamics
        const int period = 256;
        auto tex_row = value_noise_1d(period, 24, 1.0, rng);     // coarse stripes
        auto tex_row2 = value_noise_1d(period, 64, 0.5, rng);    // finer detail
        auto tex_col = value_noise_1d(W, 12, 0.35, rng);         // static column shading
        double scroll = rng.uniform(0, period);
        const double speed = rng.uniform(1.2, 2.6);
        double sprite_x = rng.uniform(20, W - 20);
        double sprite_v = 0;
        const double sprite_y = 62.0;
        std::vector<float> ep(static_cast<std::size_t>(frames) * H * W);
        for (int t = 0; t < frames; ++t) {
            scroll += speed;
            sprite_v = 0.9 * sprite_v + rng.uniform(-0.35, 0.35);
            sprite_v = std::clamp(sprite_v, -1.5, 1.5);
            sprite_x += sprite_v;
            if (sprite_x < 12) { sprite_x = 12; sprite_v = std::fabs(sprite_v); }
            if (sprite_x > W - 12) { sprite_x = W - 12; sprite_v = -std::fabs(sprite_v); }
            float* fr = ep.data() + static_cast<std::size_t>(t) * H * W;
            for (int y = 0; y < H; ++y) {
                const int world = (static_cast<int>(scroll) + y) % period;
                const float base = tex_row[static_cast<std::size_t>(world)] +
                                   tex_row2[static_cast<std::size_t>(world)];
                for (int x = 0; x < W; ++x)
                    fr[y * W + x] = base + tex_col[static_cast<std::size_t>(x)];
            }
            // bright sprite blob
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const double dy = y - sprite_y, dx = x - sprite_x;
                    const double d2 = (dx * dx + dy * dy) / (2.0 * 6.0 * 6.0);
                    if (d2 < 9) fr[y * W + x] += static_cast<float>(1.6 * std::exp(-d2));
                }
        }
        raw.push_back(std::move(ep));
    }
    // Calibrate so the mean-frame predictor's mse is ~0.0225 (std 0.15
    // about the per-pixel mean), then quantize to the u8 grid the file
    // format stores.
    const std::size_t fpx = static_cast<std::size_t>(H) * W;
    std::vector<double> pixel_mean(fpx, 0.0);
    std::size_t total_frames = 0;
    for (const auto& ep : raw) total_frames += ep.size() / fpx;
    for (const auto& ep : raw)
        for (std::size_t i = 0; i < ep.size(); ++i) pixel_mean[i % fpx] += ep[i];
    for (auto& m : pixel_mean) m /= static_cast<double>(total_frames);
    double var = 0;
    for (const auto& ep : raw)
        for (std::size_t i = 0; i < ep.size(); ++i) {
            const double d = ep[i] - pixel_mean[i % fpx];
            var += d * d;
        }
    var /= static_cast<double>(total_frames) * fpx;
    const double gain = var > 0 ? std::sqrt(0.0225 / var) : 1.0;
    for (auto& ep : raw) {
        Episode out;
        const int T = static_cast<int>(ep.size() / fpx);
        out.frames = Tensor::zeros({T, H, W});
        for (std::size_t i = 0; i < ep.size(); ++i) {
            const double mu = pixel_mean[i % fpx] * gain;  // keep the mean on-grid too
            double v = mu + (ep[i] - pixel_mean[i % fpx]) * gain;
            v = std::clamp(v, -1.0, 1.0);
            const int q = static_cast<int>(std::lround((v + 1.0) * 127.5));
            out.frames.data[i] = static_cast<float>(q) / 127.5f - 1.0f;
        }
        set.episodes.push_back(std::move(out));
    }
    return set;
}

Tensor stack_frames(const Episode& ep, int t, double noise_std, Rng& rng) {
    if (t < 3) fail("stack_frames: t must be >= 3, got " + std::to_string(t));
    if (t >= ep.length())
        fail("stack_frames: t " + std::to_string(t) + " beyond episode of " +
             std::to_string(ep.length()) + " frames");
    const std::size_t fpx = static_cast<std::size_t>(ep.height) * ep.width;
    Tensor out = Tensor::zeros({4 * static_cast<int>(fpx)});
    for (int k = 0; k < 4; ++k)
        std::copy_n(ep.frames.data.data() + static_cast<std::size_t>(t - 3 + k) * fpx, fpx,
                    out.data.data() + static_cast<std::size_t>(k) * fpx);
    if (noise_std > 0) out = add_gaussian_noise(out, 0.0, noise_std, rng);
    return out;
}

std::vector<Segment> fold_segments(int episode_len, int count, int length, int episode_id) {
    if (count < 1) fail("fold_segments: count must be >= 1");
    if (episode_len < length)
        fail("fold_segments: episode of " + std::to_string(episode_len) +
             " frames is shorter than segment length " + std::to_string(length));
    std::vector<Segment> out;
    out.reserve(static_cast<std::size_t>(count));
    const int stride = count == 1 ? 0 : (episode_len - length) / (count - 1);
    for (int i = 0; i < count; ++i)
        out.push_back(Segment{episode_id, i * stride, length});
    return out;
}

void save_patches(const std::string& path, const PatchSet& ps) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail("save_patches: cannot open '" + path + "'");
    os.write("BHNP", 4);
    put_u32(os, static_cast<std::uint32_t>(ps.count()));
    put_u32(os, static_cast<std::uint32_t>(ps.patch_size));
    static_assert(sizeof(float) == 4);
    os.write(reinterpret_cast<const char*>(ps.patches.data.data()),
             static_cast<std::streamsize>(ps.patches.data.size() * 4));
    if (!os) fail("save_patches: write failed for '" + path + "'");
}

PatchSet load_patches(const std::string& path) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) fail("load_patches: cannot open '" + path + "'");
    const std::size_t actual = static_cast<std::size_t>(is.tellg());
    is.seekg(0);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "BHNP", 4) != 0)
        fail("'" + path + "': bad magic (not a BHNP patch cache)");
    const std::uint32_t count = get_u32(is, path, 4);
    const std::uint32_t size = get_u32(is, path, 8);
    const std::size_t expected = 12 + static_cast<std::size_t>(count) * size * size * 4;
    if (actual != expected)
        fail("'" + path + "': expected " + std::to_string(expected) + " bytes, file has " +
             std::to_string(actual));
    PatchSet ps;
    ps.patch_size = static_cast<int>(size);
    ps.patches = Tensor::zeros({static_cast<int>(count), static_cast<int>(size * size)});
    if (!is.read(reinterpret_cast<char*>(ps.patches.data.data()),
                 static_cast<std::streamsize>(ps.patches.data.size() * 4)))
        fail("'" + path + "': truncated at byte 12");
    ps.source_ids.assign(count, -1);
    return ps;
}

std::vector<Tensor> synth_images(int count, int height, int width, Rng& rng) {
    std::vector<Tensor> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int c = 0; c < count; ++c) {
        Tensor im = Tensor::zeros({height, width});
        struct Wave {
            double fx, fy, phase, amp;
        };
        std::vector<Wave> waves;
        for (int k = 0; k < 6; ++k) {
            const double freq = rng.uniform(0.02, 0.25);
            const double theta = rng.uniform(0, 2 * 3.14159265358979);
            waves.push_back(Wave{freq * std::cos(theta), freq * std::sin(theta),
                                 rng.uniform(0, 6.283), rng.uniform(0.3, 1.0)});
        }
        const double horizon = rng.uniform(0.3, 0.7) * height;
        float lo = 1e30f, hi = -1e30f;
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                double v = 1.2 * std::tanh((y - horizon) / 18.0);  // sky/ground split
                for (const auto& w : waves)
                    v += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
                const float f = static_cast<float>(v);
                im.data[static_cast<std::size_t>(y) * width + x] = f;
                lo = std::min(lo, f);
                hi = std::max(hi, f);
            }
        const float span = hi > lo ? hi - lo : 1.0f;
        for (auto& v : im.data) v = (v - lo) / span * 255.0f;
        out.push_back(std::move(im));
    }
    return out;
}

std::vector<std::string> load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) fail("load_manifest: cannot open '" + path + "'");
    const auto dir = std::filesystem::path(path).parent_path();
    std::vector<std::string> out;
    std::string line;
    while (std::getline(is, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::filesystem::path p(line);
        out.push_back(p.is_absolute() ? p.string() : (dir / p).string());
    }
    if (out.empty()) fail("load_manifest: '" + path + "' lists no episodes");
    return out;
}

void save_manifest(const std::string& path, const std::vector<std::string>& files) {
    std::ofstream os(path);
    if (!os) fail("save_manifest: cannot open '" + path + "'");
    for (const auto& f : files) os << f << "\n";
}

Tensor read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("read_pgm: cannot open '" + path + "'");
    std::string tag;
    is >> tag;
    if (tag != "P5") fail("read_pgm: '" + path + "' is not binary PGM (P5)");
    auto next_int = [&]() {
        int v;
        while (is >> std::ws && is.peek() == '#') {
            std::string comment;
            std::getline(is, comment);
        }
        if (!(is >> v)) fail("read_pgm: malformed header in '" + path + "'");
        return v;
    };
    const int w = next_int();
    const int h = next_int();
    const int maxval = next_int();
    if (maxval != 255) fail("read_pgm: only 8-bit PGM supported, maxval=" +
                            std::to_string(maxval));
    is.get();  // single whitespace after header
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        fail("read_pgm: truncated pixel data in '" + path + "'");
    Tensor im = Tensor::zeros({h, w});
    for (std::size_t i = 0; i < raw.size(); ++i) im.data[i] = static_cast<float>(raw[i]);
    return im;
}

}  // namespace bhn
