#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "sshield/binio.hpp"
#include "sshield/rng.hpp"

namespace sshield {

inline constexpr uint32_t kIdxImageMagic = 0x00000803;
inline constexpr uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr size_t kImageDim = 784;
inline constexpr size_t kClassCount = 10;

// MNIST split held fully in memory: flattened pixels in [0,1] plus one-hot
// labels. label_ids mirrors the one-hot rows for cheap accuracy checks.
struct Dataset {
    std::vector<float> images;   // n x 784
    std::vector<float> labels;   // n x 10, one-hot
    std::vector<uint8_t> label_ids;
    size_t count = 0;
    std::string split;  // "train" | "test"

    const float* image(size_t i) const { return images.data() + i * kImageDim; }
    const float* label(size_t i) const { return labels.data() + i * kClassCount; }
};

namespace detail {

// Reads a whole file; gzip-compressed variants are detected by the 1f 8b
// prefix and inflated transparently.
inline std::vector<unsigned char> read_file_maybe_gz(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open file: " + path);
    std::vector<unsigned char> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (raw.size() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b) {
        std::vector<unsigned char> out;
        out.reserve(raw.size() * 4);
        z_stream zs{};
        if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) throw std::runtime_error("gzip init failed: " + path);
        zs.next_in = raw.data();
        zs.avail_in = static_cast<uInt>(raw.size());
        unsigned char buf[1 << 16];
        int rc = Z_OK;
        while (rc != Z_STREAM_END) {
            zs.next_out = buf;
            zs.avail_out = sizeof(buf);
            rc = inflate(&zs, Z_NO_FLUSH);
            if (rc != Z_OK && rc != Z_STREAM_END) {
                inflateEnd(&zs);
                throw std::runtime_error("gzip decode failed: " + path);
            }
            out.insert(out.end(), buf, buf + (sizeof(buf) - zs.avail_out));
        }
        inflateEnd(&zs);
        return out;
    }
    return raw;
}

inline uint32_t be32(const unsigned char* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

}  // namespace detail

// IDX image file: magic 0x00000803, count, rows, cols, then raw pixels.
// Pixels come back scaled to [0,1].
inline std::vector<float> load_idx_images(const std::string& path) {
    auto data = detail::read_file_maybe_gz(path);
    if (data.size() < 16) throw std::runtime_error("truncated IDX image file: " + path);
    const uint32_t magic = detail::be32(data.data());
    if (magic != kIdxImageMagic) {
        std::ostringstream os;
        os << "bad IDX image magic 0x" << std::hex << magic << " in " << path;
        throw std::runtime_error(os.str());
    }
    const uint32_t count = detail::be32(data.data() + 4);
    const uint32_t rows = detail::be32(data.data() + 8);
    const uint32_t cols = detail::be32(data.data() + 12);
    const size_t need = 16 + size_t(count) * rows * cols;
    if (data.size() < need) throw std::runtime_error("truncated IDX image payload: " + path);
    std::vector<float> out(size_t(count) * rows * cols);
    for (size_t i = 0; i < out.size(); ++i) out[i] = data[16 + i] / 255.0f;
    return out;
}

// IDX label file: magic 0x00000801, count, raw labels in 0..9.
inline std::vector<uint8_t> load_idx_labels(const std::string& path) {
    auto data = detail::read_file_maybe_gz(path);
    if (data.size() < 8) throw std::runtime_error("truncated IDX label file: " + path);
    const uint32_t magic = detail::be32(data.data());
    if (magic != kIdxLabelMagic) {
        std::ostringstream os;
        os << "bad IDX label magic 0x" << std::hex << magic << " in " << path;
        throw std::runtime_error(os.str());
    }
    const uint32_t count = detail::be32(data.data() + 4);
    if (data.size() < 8 + size_t(count)) throw std::runtime_error("truncated IDX label payload: " + path);
    std::vector<uint8_t> out(data.begin() + 8, data.begin() + 8 + count);
    for (uint8_t v : out)
        if (v > 9) throw std::runtime_error("label out of range in " + path);
    return out;
}

inline Dataset load_dataset(const std::string& image_path, const std::string& label_path,
                            const std::string& split) {
    Dataset ds;
    ds.images = load_idx_images(image_path);
    ds.label_ids = load_idx_labels(label_path);
    ds.split = split;
    if (ds.images.size() % kImageDim != 0) throw std::runtime_error("image payload is not a multiple of 784");
    ds.count = ds.images.size() / kImageDim;
    if (ds.count != ds.label_ids.size()) throw std::runtime_error("image/label count mismatch");
    ds.labels.assign(ds.count * kClassCount, 0.0f);
    for (size_t i = 0; i < ds.count; ++i) ds.labels[i * kClassCount + ds.label_ids[i]] = 1.0f;
    return ds;
}

// Seeded permutation of 0..n-1 chunked into batches; the last batch may be
// short. Same seed, same batches.
inline std::vector<std::vector<size_t>> minibatches(size_t n, size_t batch_size, uint64_t epoch_seed) {
    if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(epoch_seed);
    rng.shuffle(order);
    std::vector<std::vector<size_t>> batches;
    batches.reserve((n + batch_size - 1) / batch_size);
    for (size_t start = 0; start < n; start += batch_size) {
        size_t end = std::min(n, start + batch_size);
        batches.emplace_back(order.begin() + start, order.begin() + end);
    }
    return batches;
}

inline std::vector<std::vector<size_t>> minibatches(const Dataset& ds, size_t batch_size, uint64_t epoch_seed) {
    return minibatches(ds.count, batch_size, epoch_seed);
}

}  // namespace sshield
