#pragma once

// Desk-scale datasets: a seeded synthetic grating generator and a byte-exact
// raster container loader. Images live in [0,1], labels are one-hot.

#include <cstdint>
#include <fstream>
#include <random>

#include "tensor.hpp"

namespace dskd {

struct LabeledDataset {
    Tensor images;  // N x C x H x W
    Tensor labels;  // N x K, one-hot
    int class_count = 0;

    int size() const { return images.shape()[0]; }

    int label_of(int i) const {
        const int K = class_count;
        for (int k = 0; k < K; ++k)
            if (labels.data()[i * K + k] == 1.0) return k;
        return -1;
    }
};

// Oriented gratings with class-specific frequency and orientation plus
// seeded per-sample phase jitter and pixel noise. Hard enough that a small
// CNN stays imperfect at short schedules. Deterministic per seed; 80/20
// train/test split, disjoint by construction.
inline std::pair<LabeledDataset, LabeledDataset> generate_synthetic(int num_classes, int per_class, int image_size,
                                                                    std::uint64_t seed) {
    if (num_classes < 2) throw std::invalid_argument("generate_synthetic: num_classes must be >= 2");
    if (image_size < 8) throw std::invalid_argument("generate_synthetic: image_size must be >= 8");
    if (per_class < 5) throw std::invalid_argument("generate_synthetic: per_class must be >= 5");

    const int S = image_size;
    const int per_test = per_class / 5;
    const int per_train = per_class - per_test;

    constexpr double kPi = 3.14159265358979323846;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.38);

    auto make = [&](int count) {
        LabeledDataset ds;
        ds.class_count = num_classes;
        std::vector<double> img(static_cast<std::size_t>(count) * num_classes * S * S);
        std::vector<double> lab(static_cast<std::size_t>(count) * num_classes * num_classes, 0.0);
        int idx = 0;
        for (int c = 0; c < num_classes; ++c) {
            // classes differ by grating orientation only
            const double theta = kPi * c / num_classes;
            const double freq = 2.5;
            const double phase0 = 0.9 * c;
            const double ct = std::cos(theta), st = std::sin(theta);
            for (int s = 0; s < count; ++s, ++idx) {
                const double jitter = 1.0 * unif(rng);
                const double amp = 0.22 + 0.03 * unif(rng);
                const double brightness = 0.1 * unif(rng);
                for (int y = 0; y < S; ++y)
                    for (int x = 0; x < S; ++x) {
                        const double u = (x + 0.5) / S - 0.5, v = (y + 0.5) / S - 0.5;
                        double val = 0.5 + brightness +
                                     amp * std::sin(2.0 * kPi * freq * (u * ct + v * st) + phase0 + jitter) +
                                     noise(rng);
                        img[static_cast<std::size_t>(idx) * S * S + y * S + x] = std::clamp(val, 0.0, 1.0);
                    }
                lab[static_cast<std::size_t>(idx) * num_classes + c] = 1.0;
            }
        }
        const int n = num_classes * count;
        ds.images = Tensor(Shape{n, 1, S, S},
                           std::vector<double>(img.begin(), img.begin() + static_cast<std::size_t>(n) * S * S));
        ds.labels = Tensor(Shape{n, num_classes}, std::move(lab));
        return ds;
    };

    LabeledDataset train = make(per_train);
    LabeledDataset test = make(per_test);
    return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Raster container: magic "DSKR", then little-endian u32 K, N, C, H, W,
// then N label bytes, then N*C*H*W image bytes (0..255 -> [0,1]).
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in, std::size_t offset) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in)
        throw std::runtime_error("raster: truncated file at byte offset " + std::to_string(offset));
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline void save_raster_dataset(const LabeledDataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_raster_dataset: cannot open " + path);
    const auto& sh = ds.images.shape();
    const int N = sh[0], C = sh[1], H = sh[2], W = sh[3];
    out.write("DSKR", 4);
    detail::put_u32(out, static_cast<std::uint32_t>(ds.class_count));
    detail::put_u32(out, static_cast<std::uint32_t>(N));
    detail::put_u32(out, static_cast<std::uint32_t>(C));
    detail::put_u32(out, static_cast<std::uint32_t>(H));
    detail::put_u32(out, static_cast<std::uint32_t>(W));
    for (int i = 0; i < N; ++i) {
        const unsigned char lb = static_cast<unsigned char>(ds.label_of(i));
        out.write(reinterpret_cast<const char*>(&lb), 1);
    }
    for (double v : ds.images.data()) {
        const unsigned char px = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        out.write(reinterpret_cast<const char*>(&px), 1);
    }
    if (!out) throw std::runtime_error("save_raster_dataset: write failed for " + path);
}

inline LabeledDataset load_raster_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_raster_dataset: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != "DSKR")
        throw std::runtime_error("load_raster_dataset: bad magic in " + path);
    const std::uint32_t K = detail::get_u32(in, 4);
    const std::uint32_t N = detail::get_u32(in, 8);
    const std::uint32_t C = detail::get_u32(in, 12);
    const std::uint32_t H = detail::get_u32(in, 16);
    const std::uint32_t W = detail::get_u32(in, 20);
    if (K < 2 || N < 1 || C < 1 || H < 1 || W < 1)
        throw std::runtime_error("load_raster_dataset: invalid header dimensions in " + path);

    std::vector<unsigned char> labels(N);
    in.read(reinterpret_cast<char*>(labels.data()), N);
    if (!in) throw std::runtime_error("raster: truncated file at byte offset 24 (label block)");
    std::vector<double> lab(static_cast<std::size_t>(N) * K, 0.0);
    for (std::uint32_t i = 0; i < N; ++i) {
        if (labels[i] >= K)
            throw std::runtime_error("load_raster_dataset: label " + std::to_string(labels[i]) + " >= K=" +
                                     std::to_string(K) + " at sample " + std::to_string(i));
        lab[static_cast<std::size_t>(i) * K + labels[i]] = 1.0;
    }

    const std::size_t pixels = static_cast<std::size_t>(N) * C * H * W;
    std::vector<unsigned char> raw(pixels);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(pixels));
    if (static_cast<std::size_t>(in.gcount()) != pixels)
        throw std::runtime_error("raster: truncated file at byte offset " +
                                 std::to_string(24 + N + static_cast<std::size_t>(in.gcount())) + " (image block)");
    std::vector<double> img(pixels);
    for (std::size_t i = 0; i < pixels; ++i) img[i] = raw[i] / 255.0;

    LabeledDataset ds;
    ds.class_count = static_cast<int>(K);
    ds.images = Tensor(Shape{static_cast<int>(N), static_cast<int>(C), static_cast<int>(H), static_cast<int>(W)},
                       std::move(img));
    ds.labels = Tensor(Shape{static_cast<int>(N), static_cast<int>(K)}, std::move(lab));
    return ds;
}

// Seeded permutation batching; the final partial batch is included.
inline std::vector<std::pair<Tensor, Tensor>> batch_iter(const LabeledDataset& ds, int batch_size,
                                                         std::uint64_t shuffle_seed) {
    if (batch_size < 1) throw std::invalid_argument("batch_iter: batch_size must be >= 1");
    const int N = ds.size();
    const auto& sh = ds.images.shape();
    const int C = sh[1], H = sh[2], W = sh[3], K = ds.class_count;
    const std::size_t px = static_cast<std::size_t>(C) * H * W;

    std::vector<int> order(N);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(shuffle_seed);
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<std::pair<Tensor, Tensor>> batches;
    for (int start = 0; start < N; start += batch_size) {
        const int n = std::min(batch_size, N - start);
        std::vector<double> img(static_cast<std::size_t>(n) * px);
        std::vector<double> lab(static_cast<std::size_t>(n) * K);
        for (int i = 0; i < n; ++i) {
            const int src = order[start + i];
            std::copy_n(ds.images.data().begin() + src * px, px, img.begin() + i * px);
            std::copy_n(ds.labels.data().begin() + static_cast<std::size_t>(src) * K, K,
                        lab.begin() + static_cast<std::size_t>(i) * K);
        }
        batches.emplace_back(Tensor(Shape{n, C, H, W}, std::move(img)), Tensor(Shape{n, K}, std::move(lab)));
    }
    return batches;
}

}  // namespace dskd
