#pragma once

// Synthetic spatially-imbalanced image/mask pairs and directory ingestion.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "asw/image_io.hpp"
#include "asw/rng.hpp"
#include "asw/tensor.hpp"

namespace asw {

struct SamplePair {
    Tensor image;  // [C,H,W], values in [0,1]
    Tensor mask;   // [1,H,W], values in {0,1}
    std::string id;

    std::size_t height() const { return mask.dim(1); }
    std::size_t width() const { return mask.dim(2); }
    double lesion_ratio() const {
        double s = 0.0;
        for (double v : mask.vec()) s += v;
        return s / static_cast<double>(mask.numel());
    }
};

struct SpecError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct SynthSpec {
    std::size_t size = 64;
    std::size_t channels = 1;
    double ratio_min = 0.02;
    double ratio_max = 0.10;
    std::size_t blobs_min = 1;
    std::size_t blobs_max = 3;
    double contrast = 0.25;
    double noise_std = 0.03;
    std::uint64_t seed = 0;

    void validate() const {
        if (size == 0) throw SpecError("synthetic size must be positive");
        if (channels != 1 && channels != 3) throw SpecError("synthetic images have 1 or 3 channels");
        if (!(ratio_min > 0.0 && ratio_min <= ratio_max && ratio_max < 1.0))
            throw SpecError("lesion ratio range must satisfy 0 < min <= max < 1");
        if (blobs_min == 0 || blobs_min > blobs_max) throw SpecError("blob count range must satisfy 1 <= min <= max");
        if (noise_std < 0.0) throw SpecError("noise_std must be non-negative");
        const double hw = static_cast<double>(size * size);
        if (std::ceil(ratio_min * hw - 1e-9) > std::floor(ratio_max * hw + 1e-9))
            throw SpecError("lesion ratio range [" + std::to_string(ratio_min) + ", " + std::to_string(ratio_max) +
                            "] admits no whole pixel count at size " + std::to_string(size));
    }
};

// Deterministic in (spec, index). The mask is the top-k level set of a smooth
// field built from 1-3 rotated ellipses plus low-frequency warping, so its
// pixel count hits the drawn lesion ratio exactly.
inline SamplePair gen_pair(const SynthSpec& spec, std::size_t index) {
    spec.validate();
    Rng rng(spec.seed, "synth", index);
    const std::size_t S = spec.size, HW = S * S;
    const double fs = static_cast<double>(S);

    const double target = rng.uniform(spec.ratio_min, spec.ratio_max);
    const auto k_lo = static_cast<std::size_t>(std::ceil(spec.ratio_min * HW - 1e-9));
    const auto k_hi = static_cast<std::size_t>(std::floor(spec.ratio_max * HW + 1e-9));
    const std::size_t k = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(target * HW)), k_lo, k_hi);

    struct Blob {
        double cy, cx, ry, rx, cos_t, sin_t;
    };
    const std::size_t n_blobs = spec.blobs_min + rng.index(spec.blobs_max - spec.blobs_min + 1);
    std::vector<Blob> blobs;
    for (std::size_t b = 0; b < n_blobs; ++b) {
        const double r = std::sqrt(target * fs * fs / (std::numbers::pi * n_blobs));
        const double aspect = rng.uniform(0.5, 1.0);
        const double theta = rng.uniform(0.0, std::numbers::pi);
        blobs.push_back({rng.uniform(0.2, 0.8) * fs, rng.uniform(0.2, 0.8) * fs, std::max(r * aspect, 0.5),
                         std::max(r / aspect, 0.5), std::cos(theta), std::sin(theta)});
    }
    const double warp_amp = 0.15, warp_fy = rng.uniform(1.0, 3.0), warp_fx = rng.uniform(1.0, 3.0),
                 warp_ph = rng.uniform(0.0, 2.0 * std::numbers::pi);

    std::vector<double> field(HW);
    for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
            double best = -1e300;
            for (const Blob& b : blobs) {
                const double dy = y + 0.5 - b.cy, dx = x + 0.5 - b.cx;
                const double u = dx * b.cos_t + dy * b.sin_t, v = -dx * b.sin_t + dy * b.cos_t;
                best = std::max(best, 1.0 - (u * u) / (b.rx * b.rx) - (v * v) / (b.ry * b.ry));
            }
            field[y * S + x] =
                best + warp_amp * std::sin(2.0 * std::numbers::pi * (warp_fy * y + warp_fx * x) / fs + warp_ph);
        }

    std::vector<std::size_t> order(HW);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return field[a] > field[b]; });
    std::vector<double> mask(HW, 0.0);
    for (std::size_t i = 0; i < k; ++i) mask[order[i]] = 1.0;
    const double level = field[order[k - 1]];

    // Background: smooth low-frequency texture. Lesion: intensity shift and an
    // oriented stripe texture, blended in with a soft edge around the level set.
    const double bg_base = rng.uniform(0.3, 0.45);
    double wave[3][4];
    for (auto& w : wave) {
        w[0] = rng.uniform(0.5, 2.5);
        w[1] = rng.uniform(0.5, 2.5);
        w[2] = rng.uniform(0.0, 2.0 * std::numbers::pi);
        w[3] = rng.uniform(0.02, 0.06);
    }
    const double stripe_theta = rng.uniform(0.0, std::numbers::pi), stripe_freq = rng.uniform(4.0, 7.0),
                 stripe_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double tint[3] = {1.0, rng.uniform(0.7, 0.9), rng.uniform(0.6, 0.8)};

    std::vector<double> gray(HW);
    for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
            const double fy = y / fs, fx = x / fs;
            double v = bg_base;
            for (const auto& w : wave) v += w[3] * std::sin(2.0 * std::numbers::pi * (w[0] * fy + w[1] * fx) + w[2]);
            const double soft = 1.0 / (1.0 + std::exp(-(field[y * S + x] - level) / 0.05));
            const double stripes =
                std::sin(2.0 * std::numbers::pi * stripe_freq * (fx * std::cos(stripe_theta) + fy * std::sin(stripe_theta)) +
                         stripe_phase);
            v += soft * (spec.contrast + 0.08 * stripes);
            gray[y * S + x] = v;
        }

    std::vector<double> image(spec.channels * HW);
    for (std::size_t c = 0; c < spec.channels; ++c)
        for (std::size_t p = 0; p < HW; ++p)
            image[c * HW + p] =
                std::clamp(gray[p] * (spec.channels == 1 ? 1.0 : tint[c]) + rng.normal(0.0, spec.noise_std), 0.0, 1.0);

    return {Tensor({spec.channels, S, S}, std::move(image)), Tensor({1, S, S}, std::move(mask)),
            "synth-" + std::to_string(spec.seed) + "-" + std::to_string(index)};
}

inline std::vector<SamplePair> gen_dataset(const SynthSpec& spec, std::size_t count) {
    std::vector<SamplePair> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(gen_pair(spec, i));
    return out;
}

// Roughly one in five indices goes to validation; stable for a given seed.
inline bool is_validation_index(std::uint64_t seed, std::size_t index) {
    return stream_seed(seed, "split", index) % 5 == 0;
}

struct DataSplit {
    std::vector<SamplePair> train;
    std::vector<SamplePair> val;
};

inline DataSplit split_dataset(std::vector<SamplePair> data, std::uint64_t seed) {
    DataSplit s;
    for (std::size_t i = 0; i < data.size(); ++i)
        (is_validation_index(seed, i) ? s.val : s.train).push_back(std::move(data[i]));
    return s;
}

// Stacks [C,H,W] tensors of the selected samples into [B,C,H,W].
inline Tensor stack_images(const std::vector<SamplePair>& data, std::span<const std::size_t> idx) {
    const Shape& s = data.at(idx[0]).image.shape();
    std::vector<double> v;
    v.reserve(idx.size() * data[idx[0]].image.numel());
    for (std::size_t i : idx) {
        if (data.at(i).image.shape() != s) throw ShapeError("stack_images: samples differ in shape");
        v.insert(v.end(), data[i].image.vec().begin(), data[i].image.vec().end());
    }
    return Tensor({idx.size(), s[0], s[1], s[2]}, std::move(v));
}

inline Tensor stack_masks(const std::vector<SamplePair>& data, std::span<const std::size_t> idx) {
    const Shape& s = data.at(idx[0]).mask.shape();
    std::vector<double> v;
    v.reserve(idx.size() * data[idx[0]].mask.numel());
    for (std::size_t i : idx) {
        if (data.at(i).mask.shape() != s) throw ShapeError("stack_masks: samples differ in shape");
        v.insert(v.end(), data[i].mask.vec().begin(), data[i].mask.vec().end());
    }
    return Tensor({idx.size(), 1, s[1], s[2]}, std::move(v));
}

// ------------------------------------------------------------- directories

struct LoadResult {
    std::vector<SamplePair> pairs;
    std::vector<std::string> errors;  // one entry per offending file
};

namespace detail {

inline std::map<std::string, std::filesystem::path> pnm_files(const std::filesystem::path& dir,
                                                              std::vector<std::string>& errors) {
    std::map<std::string, std::filesystem::path> out;
    std::error_code ec;
    if (!std::filesystem::is_directory(dir, ec)) {
        errors.push_back(dir.string() + ": not a directory");
        return out;
    }
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const auto ext = entry.path().extension().string();
        if (ext != ".pgm" && ext != ".ppm") continue;
        out[entry.path().stem().string()] = entry.path();
    }
    return out;
}

inline std::vector<double> center_crop(const std::vector<double>& planar, std::size_t channels, std::size_t H,
                                       std::size_t W, std::size_t Ho, std::size_t Wo) {
    const std::size_t oy = (H - Ho) / 2, ox = (W - Wo) / 2;
    std::vector<double> out(channels * Ho * Wo);
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = 0; y < Ho; ++y)
            for (std::size_t x = 0; x < Wo; ++x) out[(c * Ho + y) * Wo + x] = planar[(c * H + y + oy) * W + x + ox];
    return out;
}

}  // namespace detail

// Pairs files by stem. Masks are binarised at 0.5. Spatial extents must be
// multiples of `multiple` unless `crop` is set, in which case the pair is
// center-cropped down to the nearest multiple.
inline LoadResult load_pair_dir(const std::filesystem::path& images_dir, const std::filesystem::path& masks_dir,
                                bool crop = false, std::size_t multiple = 16) {
    LoadResult res;
    const auto images = detail::pnm_files(images_dir, res.errors);
    const auto masks = detail::pnm_files(masks_dir, res.errors);
    for (const auto& [stem, path] : images)
        if (!masks.count(stem)) res.errors.push_back(path.string() + ": no matching mask");
    for (const auto& [stem, path] : masks)
        if (!images.count(stem)) res.errors.push_back(path.string() + ": no matching image");

    for (const auto& [stem, ipath] : images) {
        auto mit = masks.find(stem);
        if (mit == masks.end()) continue;
        try {
            Image img = read_pnm(ipath);
            Image msk = read_pnm(mit->second);
            if (msk.channels != 1) {
                res.errors.push_back(mit->second.string() + ": mask must be single-channel (P5)");
                continue;
            }
            if (img.width != msk.width || img.height != msk.height) {
                res.errors.push_back(ipath.string() + ": image and mask sizes differ");
                continue;
            }
            std::size_t H = img.height, W = img.width;
            if (H % multiple || W % multiple) {
                const std::size_t Ho = H / multiple * multiple, Wo = W / multiple * multiple;
                if (!crop || Ho == 0 || Wo == 0) {
                    res.errors.push_back(ipath.string() + ": size " + std::to_string(W) + "x" + std::to_string(H) +
                                         " is not a multiple of " + std::to_string(multiple));
                    continue;
                }
                img.planar = detail::center_crop(img.planar, img.channels, H, W, Ho, Wo);
                msk.planar = detail::center_crop(msk.planar, 1, H, W, Ho, Wo);
                H = Ho;
                W = Wo;
            }
            for (double& v : msk.planar) v = v > 0.5 ? 1.0 : 0.0;
            res.pairs.push_back({Tensor({img.channels, H, W}, std::move(img.planar)),
                                 Tensor({1, H, W}, std::move(msk.planar)), stem});
        } catch (const ImageFormatError& e) {
            res.errors.push_back(e.what());
        }
    }
    return res;
}

struct ManifestEntry {
    std::string id;
    std::string image_path;
    std::string mask_path;
    double ratio = 0.0;
};

inline void to_json(nlohmann::json& j, const ManifestEntry& e) {
    j = {{"id", e.id}, {"image_path", e.image_path}, {"mask_path", e.mask_path}, {"ratio", e.ratio}};
}

// Writes images/<id>.p?m and masks/<id>.pgm under root; paths in the entry are
// relative to root.
inline ManifestEntry save_pair(const std::filesystem::path& root, const SamplePair& pair) {
    const std::size_t C = pair.image.dim(0);
    const std::string ext = C == 3 ? ".ppm" : ".pgm";
    ManifestEntry e{pair.id, "images/" + pair.id + ext, "masks/" + pair.id + ".pgm", pair.lesion_ratio()};
    write_pnm(root / e.image_path, pair.width(), pair.height(), C, pair.image.data());
    write_pgm(root / e.mask_path, pair.width(), pair.height(), pair.mask.data());
    return e;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream out(path);
    out << nlohmann::json(entries).dump(2) << '\n';
}

}  // namespace asw
