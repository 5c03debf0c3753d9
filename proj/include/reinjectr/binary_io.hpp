#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "reinjectr/errors.hpp"

namespace reinjectr {

// Little-endian primitives built by byte shifts, independent of host order.
struct ByteWriter {
    std::ostream& out;
    explicit ByteWriter(std::ostream& o) : out(o) {}

    void bytes(const char* p, std::size_t n) { out.write(p, static_cast<std::streamsize>(n)); }
    void u8(std::uint8_t v) { out.put(static_cast<char>(v)); }
    void u16(std::uint16_t v) {
        char b[2] = {static_cast<char>(v & 0xFF), static_cast<char>(v >> 8)};
        bytes(b, 2);
    }
    void u32(std::uint32_t v) {
        char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
        bytes(b, 4);
    }
    void u64(std::uint64_t v) {
        char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
        bytes(b, 8);
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void flush() { out.flush(); }
};

struct ByteReader {
    std::istream& in;
    std::string source;
    ByteReader(std::istream& i, std::string src) : in(i), source(std::move(src)) {}

    void bytes(char* p, std::size_t n) {
        in.read(p, static_cast<std::streamsize>(n));
        if (in.gcount() != static_cast<std::streamsize>(n))
            throw corrupt_dump("truncated file: " + source);
    }
    std::uint8_t u8() {
        char b;
        bytes(&b, 1);
        return static_cast<std::uint8_t>(b);
    }
    std::uint16_t u16() {
        unsigned char b[2];
        bytes(reinterpret_cast<char*>(b), 2);
        return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    }
    std::uint32_t u32() {
        unsigned char b[4];
        bytes(reinterpret_cast<char*>(b), 4);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
        return v;
    }
    std::uint64_t u64() {
        unsigned char b[8];
        bytes(reinterpret_cast<char*>(b), 8);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
};

}  // namespace reinjectr
