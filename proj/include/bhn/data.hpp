#pragma once

#include <string>
#include <vector>

#include "bhn/rng.hpp"
#include "bhn/tensor.hpp"

namespace bhn {

/// Standardized grayscale crops, one row per patch.
struct PatchSet {
    Tensor patches;               // [count x size*size], per-patch mean 0 / std 1
    int patch_size = 16;
    std::vector<int> source_ids;  // image index each patch came from
    int count() const { return patches.shape.empty() ? 0 : patches.shape[0]; }
};

/// Grayscale frame sequence, values in [-1, 1].
struct Episode {
    int height = 96;
    int width = 96;
    Tensor frames;  // [T x H x W]
    int length() const { return frames.shape.empty() ? 0 : frames.shape[0]; }
};

struct EpisodeSet {
    std::vector<Episode> episodes;
};

struct Segment {
    int episode = 0;
    int start = 0;
    int length = 0;
};

/// Random standardized crops; zero-variance draws are retried a bounded
/// number of times before failing.
PatchSet extract_patches(const std::vector<Tensor>& images, int count, int size, Rng& rng);

Tensor add_gaussian_noise(const Tensor& x, double mean, double std, Rng& rng);

/// BHNV episode file: magic "BHNV", u32 version=1, u32 n_frames,
/// u32 height=96, u32 width=96, then n_frames*96*96 bytes u8 row-major,
/// little-endian. Pixels map to floats as v/127.5 - 1.
void save_episode(const std::string& path, const Episode& ep);
Episode load_episode(const std::string& path);

/// Procedural stand-in for recorded game play: a textured track scrolling
/// under a sprite that steers smoothly, so the near future is genuinely
/// predictable from history. Frame statistics are calibrated so the
/// information-free mean predictor lands at mse ~ 0.0225.
EpisodeSet synth_video_generate(int episodes, int frames, Rng& rng);

/// Frames t-3..t concatenated into one [4*H*W] vector, plus noise.
Tensor stack_frames(const Episode& ep, int t, double noise_std, Rng& rng);

/// `count` windows of `length` frames with stride floor((L-length)/(count-1)).
std::vector<Segment> fold_segments(int episode_len, int count, int length,
                                   int episode_id = 0);

/// BHNP patch cache: magic "BHNP", u32 count, u32 size, then f32 data.
void save_patches(const std::string& path, const PatchSet& ps);
PatchSet load_patches(const std::string& path);

/// Smooth synthetic landscape images (grayscale 0..255) for the image
/// task when no photographs are supplied.
std::vector<Tensor> synth_images(int count, int height, int width, Rng& rng);

/// Plain text, one episode path per line; relative paths resolve against
/// the manifest's directory.
std::vector<std::string> load_manifest(const std::string& path);
void save_manifest(const std::string& path, const std::vector<std::string>& files);

/// Binary PGM (P5, 8-bit) reader for externally supplied photographs.
Tensor read_pgm(const std::string& path);

}  // namespace bhn
