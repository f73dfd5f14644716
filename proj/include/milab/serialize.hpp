#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "milab/tensor.hpp"

namespace milab {

static_assert(std::endian::native == std::endian::little,
              "artifact file formats are little-endian");

/// 64-bit FNV-1a over a byte range; the content hash used by caches,
/// checkpoints and the run manifest.
inline std::uint64_t fnv1a64(const unsigned char* data, std::size_t n) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
    return fnv1a64(reinterpret_cast<const unsigned char*>(s.data()), s.size());
}

inline std::uint64_t fnv1a64(const std::vector<unsigned char>& v) {
    return fnv1a64(v.data(), v.size());
}

inline std::string hash_hex(std::uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[h & 0xF];
        h >>= 4;
    }
    return out;
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file: " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    return bytes;
}

/// Write-then-rename so readers never observe a partial file.
inline void write_file_atomic(const std::filesystem::path& path,
                              const unsigned char* data, std::size_t n) {
    namespace fs = std::filesystem;
    fs::path dir = path.parent_path();
    if (!dir.empty()) fs::create_directories(dir);
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
        out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n));
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, reinterpret_cast<const unsigned char*>(text.data()), text.size());
}

inline void write_file_atomic(const std::filesystem::path& path,
                              const std::vector<unsigned char>& bytes) {
    write_file_atomic(path, bytes.data(), bytes.size());
}

inline std::vector<unsigned char> doubles_to_bytes(const std::vector<double>& v) {
    std::vector<unsigned char> out(v.size() * sizeof(double));
    std::memcpy(out.data(), v.data(), out.size());
    return out;
}

inline std::vector<double> doubles_from_bytes(const std::vector<unsigned char>& bytes) {
    if (bytes.size() % sizeof(double) != 0) {
        throw std::runtime_error("payload size " + std::to_string(bytes.size()) +
                                 " is not a multiple of 8");
    }
    std::vector<double> out(bytes.size() / sizeof(double));
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

}  // namespace milab
