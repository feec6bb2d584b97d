#pragma once

#include "ttm/core.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

namespace ttm {

// All on-disk tensor payloads are little-endian IEEE-754 float32. Headers use
// little-endian unsigned 32-bit integers. Byte packing is explicit so the
// formats do not depend on host endianness.

namespace io {

inline void put_u32(std::string& out, uint32_t v) {
    out.push_back((char)(v & 0xff));
    out.push_back((char)((v >> 8) & 0xff));
    out.push_back((char)((v >> 16) & 0xff));
    out.push_back((char)((v >> 24) & 0xff));
}

inline void put_u64(std::string& out, uint64_t v) {
    put_u32(out, (uint32_t)(v & 0xffffffffull));
    put_u32(out, (uint32_t)(v >> 32));
}

inline void put_f32(std::string& out, float f) {
    uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(out, v);
}

class Reader {
public:
    Reader(const uint8_t* data, size_t n, std::string name)
        : p_(data), n_(n), name_(std::move(name)) {}

    uint32_t u32() {
        need(4);
        uint32_t v = (uint32_t)p_[pos_] | ((uint32_t)p_[pos_ + 1] << 8) |
                     ((uint32_t)p_[pos_ + 2] << 16) | ((uint32_t)p_[pos_ + 3] << 24);
        pos_ += 4;
        return v;
    }

    uint64_t u64() {
        uint64_t lo = u32();
        uint64_t hi = u32();
        return lo | (hi << 32);
    }

    float f32() {
        uint32_t v = u32();
        float f;
        std::memcpy(&f, &v, 4);
        return f;
    }

    void bytes(void* dst, size_t k) {
        need(k);
        std::memcpy(dst, p_ + pos_, k);
        pos_ += k;
    }

    std::string str(size_t k) {
        need(k);
        std::string s((const char*)p_ + pos_, k);
        pos_ += k;
        return s;
    }

    size_t remaining() const { return n_ - pos_; }

    void expect_end() const {
        if (pos_ != n_) throw std::runtime_error(name_ + ": trailing bytes after payload");
    }

private:
    void need(size_t k) const {
        if (pos_ + k > n_) throw std::runtime_error(name_ + ": truncated file");
    }
    const uint8_t* p_;
    size_t n_;
    size_t pos_ = 0;
    std::string name_;
};

inline std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return buf;
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(bytes.data(), (std::streamsize)bytes.size());
    if (!out) throw std::runtime_error("short write to " + path);
}

inline uint64_t file_hash(const std::string& path) {
    auto buf = read_file(path);
    return fnv1a64(buf.data(), buf.size());
}

}  // namespace io

// LAT1: magic "LAT1", u32 channels, u32 height, u32 width, then
// channels*height*width float32 values, channel-major with row-major
// (y * width + x) layout inside each channel.

inline void save_latent(const std::string& path, const Tensor3<float>& t) {
    require(t.c > 0 && t.h > 0 && t.w > 0, "save_latent: empty tensor");
    std::string out;
    out.reserve(16 + (size_t)t.size() * 4);
    out += "LAT1";
    io::put_u32(out, (uint32_t)t.c);
    io::put_u32(out, (uint32_t)t.h);
    io::put_u32(out, (uint32_t)t.w);
    for (int ch = 0; ch < t.c; ++ch)
        for (int p = 0; p < t.positions(); ++p) io::put_f32(out, t.m(ch, p));
    io::write_file(path, out);
}

inline Tensor3<float> load_latent(const std::string& path) {
    auto buf = io::read_file(path);
    io::Reader r(buf.data(), buf.size(), path);
    if (r.str(4) != "LAT1") throw std::runtime_error(path + ": bad magic, expected LAT1");
    uint32_t c = r.u32(), h = r.u32(), w = r.u32();
    if (c == 0 || h == 0 || w == 0) throw std::runtime_error(path + ": zero dimension in header");
    if (c > (1u << 20) || h > (1u << 20) || w > (1u << 20))
        throw std::runtime_error(path + ": implausible dimensions");
    Tensor3<float> t((int)c, (int)h, (int)w);
    for (int ch = 0; ch < t.c; ++ch)
        for (int p = 0; p < t.positions(); ++p) t.m(ch, p) = r.f32();
    r.expect_end();
    if (!t.all_finite()) throw std::runtime_error(path + ": non-finite values");
    return t;
}

}  // namespace ttm
