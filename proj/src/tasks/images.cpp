#include "ebt/tasks/images.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "ebt/errors.hpp"

namespace ebt::tasks {

std::int64_t NoiseSchedule::index_for(double sigma_fraction) const {
    EBT_REQUIRE(sigma_fraction > 0.0 && sigma_fraction <= 1.0, "sigma_fraction must be in (0, 1]");
    const auto k = static_cast<std::int64_t>(std::llround(sigma_fraction * static_cast<double>(steps())));
    return std::min(k, steps() - 1);
}

NoiseSchedule make_schedule(std::int64_t steps) {
    EBT_REQUIRE(steps >= 2, "noise schedule needs at least 2 steps, got " + std::to_string(steps));
    NoiseSchedule s;
    s.betas.resize(static_cast<std::size_t>(steps));
    s.alpha_bar.resize(static_cast<std::size_t>(steps));
    double keep = 1.0;
    for (std::int64_t i = 0; i < steps; ++i) {
        const double t = static_cast<double>(i) / static_cast<double>(steps - 1);
        s.betas[i] = i == steps - 1 ? s.beta_end : s.beta_start + t * (s.beta_end - s.beta_start);
        keep *= 1.0 - s.betas[i];
        s.alpha_bar[i] = keep;
    }
    return s;
}

DenoiseSample apply_noise(const Image& clean, double sigma_fraction, const NoiseSchedule& schedule, Rng& rng) {
    const auto k = schedule.index_for(sigma_fraction);
    const double ab = schedule.alpha_bar[k];
    const double signal = std::sqrt(ab), noise = std::sqrt(1.0 - ab);
    DenoiseSample out{clean, clean, sigma_fraction};
    for (auto& p : out.noised.pixels) {
        const double x = 2.0 * p - 1.0;
        p = (signal * x + noise * rng.normal() + 1.0) / 2.0;
    }
    return out;
}

double mse(const Image& a, const Image& b) {
    EBT_REQUIRE(a.height == b.height && a.width == b.width && a.channels == b.channels,
                "image shapes differ: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                    std::to_string(b.height) + "x" + std::to_string(b.width));
    double s = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) s += (a.pixels[i] - b.pixels[i]) * (a.pixels[i] - b.pixels[i]);
    return s / static_cast<double>(a.pixels.size());
}

double mse_pixel(const Image& a, const Image& b) { return mse(a, b) * 255.0 * 255.0; }

double psnr(const Image& a, const Image& b) {
    const double m = mse_pixel(a, b);
    if (m == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(255.0 * 255.0 / m);
}

Image procedural_texture(std::int64_t size, std::uint64_t seed) {
    EBT_REQUIRE(size >= 2, "texture size must be >= 2");
    Rng rng(seed);
    Image img{size, size, 1, std::vector<double>(static_cast<std::size_t>(size * size), 0.0)};
    const double n = static_cast<double>(size);
    const auto layer = [&](std::int64_t kind) {
        std::vector<double> v(img.pixels.size());
        const double a = rng.uniform(0.0, 2.0 * M_PI);
        const double freq = rng.uniform(1.0, 4.0) * 2.0 * M_PI / n;
        const double cell = std::floor(rng.uniform(3.0, 9.0));
        double cx[3], cy[3], r[3];
        for (int i = 0; i < 3; ++i) {
            cx[i] = rng.uniform(0.0, n);
            cy[i] = rng.uniform(0.0, n);
            r[i] = rng.uniform(0.1, 0.35) * n;
        }
        for (std::int64_t y = 0; y < size; ++y) {
            for (std::int64_t x = 0; x < size; ++x) {
                const double fx = static_cast<double>(x), fy = static_cast<double>(y);
                double val = 0.0;
                switch (kind) {
                    case 0: val = 0.5 + 0.5 * std::sin(freq * (fx * std::cos(a) + fy * std::sin(a))); break;
                    case 1:
                        val = (static_cast<std::int64_t>(fx / cell) + static_cast<std::int64_t>(fy / cell)) % 2;
                        break;
                    case 2:
                        for (int i = 0; i < 3; ++i) {
                            const double d2 = (fx - cx[i]) * (fx - cx[i]) + (fy - cy[i]) * (fy - cy[i]);
                            val += std::exp(-d2 / (2.0 * r[i] * r[i]));
                        }
                        break;
                    default: val = (fx * std::cos(a) + fy * std::sin(a)) / n; break;
                }
                v[y * size + x] = val;
            }
        }
        return v;
    };
    const auto first = layer(rng.uniform_int(0, 3));
    const auto second = layer(rng.uniform_int(0, 3));
    const double w = rng.uniform(0.5, 1.0);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = w * first[i] + (1.0 - w) * second[i];
    const auto [lo, hi] = std::minmax_element(img.pixels.begin(), img.pixels.end());
    const double min = *lo, span = *hi - *lo;
    for (auto& p : img.pixels) p = span > 0.0 ? 0.1 + 0.8 * (p - min) / span : 0.5;
    return img;
}

std::vector<Image> procedural_textures(std::int64_t count, std::int64_t size, std::uint64_t seed) {
    std::vector<Image> out;
    out.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) out.push_back(procedural_texture(size, derive_seed(seed, i)));
    return out;
}

void write_pgm(const std::string& path, const Image& image) {
    EBT_REQUIRE(image.channels == 1, "graymap output needs a single channel");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write image '" + path + "'");
    out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
    for (double p : image.pixels) {
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(p, 0.0, 1.0) * 255.0))));
    }
}

Image read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open image '" + path + "'");
    const auto token = [&] {
        std::string t;
        while (in >> std::ws && in.peek() == '#') std::getline(in, t);
        in >> t;
        return t;
    };
    if (token() != "P5") throw ConfigError("'" + path + "' is not a binary graymap");
    Image img;
    try {
        img.width = std::stoll(token());
        img.height = std::stoll(token());
        if (std::stoll(token()) != 255) throw ConfigError("'" + path + "': only maxval 255 is supported");
    } catch (const std::invalid_argument&) {
        throw ConfigError("'" + path + "': malformed graymap header");
    }
    in.get();
    img.pixels.resize(static_cast<std::size_t>(img.width * img.height));
    for (auto& p : img.pixels) {
        const int c = in.get();
        if (c == EOF) throw ConfigError("'" + path + "': truncated pixel data");
        p = static_cast<double>(c) / 255.0;
    }
    return img;
}

Tensor to_patches(const std::vector<Image>& images, std::int64_t patch) {
    EBT_REQUIRE(!images.empty(), "no images");
    const auto h = images[0].height, w = images[0].width, c = images[0].channels;
    EBT_REQUIRE(patch > 0 && h % patch == 0 && w % patch == 0, "patch size must divide the image");
    const auto ph = h / patch, pw = w / patch, width = patch * patch * c;
    std::vector<double> out;
    out.reserve(images.size() * static_cast<std::size_t>(h * w * c));
    for (const auto& img : images) {
        EBT_REQUIRE(img.height == h && img.width == w && img.channels == c, "images differ in shape");
        for (std::int64_t py = 0; py < ph; ++py)
            for (std::int64_t px = 0; px < pw; ++px)
                for (std::int64_t y = 0; y < patch; ++y)
                    for (std::int64_t x = 0; x < patch; ++x)
                        for (std::int64_t ch = 0; ch < c; ++ch)
                            out.push_back(img.pixels[((py * patch + y) * w + px * patch + x) * c + ch]);
    }
    return Tensor::from_data({static_cast<std::int64_t>(images.size()), ph * pw, width}, std::move(out));
}

std::vector<Image> from_patches(const Tensor& patches, std::int64_t height, std::int64_t width, std::int64_t channels,
                                std::int64_t patch) {
    const auto ph = height / patch, pw = width / patch;
    EBT_REQUIRE(patches.rank() == 3 && patches.dim(1) == ph * pw && patches.dim(2) == patch * patch * channels,
                "patch tensor " + shape_str(patches.shape()) + " does not match the image geometry");
    std::vector<Image> out;
    const auto d = patches.data();
    std::size_t i = 0;
    for (std::int64_t n = 0; n < patches.dim(0); ++n) {
        Image img{height, width, channels, std::vector<double>(static_cast<std::size_t>(height * width * channels))};
        for (std::int64_t py = 0; py < ph; ++py)
            for (std::int64_t px = 0; px < pw; ++px)
                for (std::int64_t y = 0; y < patch; ++y)
                    for (std::int64_t x = 0; x < patch; ++x)
                        for (std::int64_t ch = 0; ch < channels; ++ch)
                            img.pixels[((py * patch + y) * width + px * patch + x) * channels + ch] = d[i++];
        out.push_back(std::move(img));
    }
    return out;
}

}  // namespace ebt::tasks
