#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ebt/autodiff/grad.hpp"

namespace ebt::tasks {

/// Row-major [H, W, C] pixels in [0, 1].
struct Image {
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::int64_t channels = 1;
    std::vector<double> pixels;

    std::int64_t size() const { return height * width * channels; }
};

struct NoiseSchedule {
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    std::vector<double> betas;      // [T]
    std::vector<double> alpha_bar;  // [T], running product of (1 - beta)

    std::int64_t steps() const { return static_cast<std::int64_t>(betas.size()); }
    /// Schedule index for a fraction of the schedule: round(f * T), capped at T-1.
    std::int64_t index_for(double sigma_fraction) const;
};

constexpr std::int64_t kDefaultScheduleSteps = 1000;

NoiseSchedule make_schedule(std::int64_t steps = kDefaultScheduleSteps);

struct DenoiseSample {
    Image clean;
    Image noised;
    double sigma_fraction = 0.0;
};

/// Forward noising at index k on the [-1, 1] data range:
/// x_k = sqrt(ᾱ_k)·x + sqrt(1 − ᾱ_k)·ε, mapped back to pixel units.
DenoiseSample apply_noise(const Image& clean, double sigma_fraction, const NoiseSchedule& schedule, Rng& rng);

/// Mean squared error on the [0, 1] scale.
double mse(const Image& a, const Image& b);
/// Mean squared error after rescaling to [0, 255].
double mse_pixel(const Image& a, const Image& b);
/// 10·log10(255² / mse_pixel); +infinity for identical images.
double psnr(const Image& a, const Image& b);

/// Grayscale procedural texture (gratings, checkers, blobs, gradients).
Image procedural_texture(std::int64_t size, std::uint64_t seed);
std::vector<Image> procedural_textures(std::int64_t count, std::int64_t size, std::uint64_t seed);

/// Binary P5 graymap, maxval 255. Single-channel only.
void write_pgm(const std::string& path, const Image& image);
Image read_pgm(const std::string& path);

/// Images -> [N, (H/p)(W/p), p·p·C] patch tokens, row-major over patches.
Tensor to_patches(const std::vector<Image>& images, std::int64_t patch);
std::vector<Image> from_patches(const Tensor& patches, std::int64_t height, std::int64_t width, std::int64_t channels,
                                std::int64_t patch);

}  // namespace ebt::tasks
