#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sshield {

// Little-endian binary I/O for the container formats, big-endian reads for IDX.
// Byte order is handled explicitly so files are portable across hosts.

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!os) throw std::runtime_error("binio: write failed");
}

inline void read_bytes(std::istream& is, void* p, size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(is.gcount()) != n) throw std::runtime_error("binio: truncated read");
}

template <typename T>
void write_le(std::ostream& os, T v) {
    static_assert(std::is_integral_v<T>);
    unsigned char buf[sizeof(T)];
    using U = std::make_unsigned_t<T>;
    U u = static_cast<U>(v);
    for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
    write_bytes(os, buf, sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    static_assert(std::is_integral_v<T>);
    unsigned char buf[sizeof(T)];
    read_bytes(is, buf, sizeof(T));
    using U = std::make_unsigned_t<T>;
    U u = 0;
    for (size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(buf[i]) << (8 * i);
    return static_cast<T>(u);
}

inline void write_f32_le(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_le<uint32_t>(os, bits);
}

inline float read_f32_le(std::istream& is) {
    uint32_t bits = read_le<uint32_t>(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

inline void write_f32_block_le(std::ostream& os, const std::vector<float>& v) {
    for (float x : v) write_f32_le(os, x);
}

inline void read_f32_block_le(std::istream& is, std::vector<float>& v) {
    for (float& x : v) x = read_f32_le(is);
}

inline uint32_t read_be_u32(std::istream& is) {
    unsigned char b[4];
    read_bytes(is, b, 4);
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

// FNV-1a, used for config hashes embedded in output artifacts.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

}  // namespace sshield
