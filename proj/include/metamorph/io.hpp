#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metamorph/errors.hpp"

// Little-endian binary primitives, atomic file writes, and the CRC32 used by
// the checkpoint trailer.

namespace metamorph::io {

std::vector<uint8_t> read_file(const std::string& path);

// write-temp-then-rename so readers never observe a partial file
void write_file_atomic(const std::string& path, const uint8_t* data, size_t size);
void write_file_atomic(const std::string& path, const std::vector<uint8_t>& data);
void write_text_atomic(const std::string& path, const std::string& text);

inline void append_u32(std::vector<uint8_t>& buf, uint32_t v) {
    buf.push_back(uint8_t(v));
    buf.push_back(uint8_t(v >> 8));
    buf.push_back(uint8_t(v >> 16));
    buf.push_back(uint8_t(v >> 24));
}

inline void append_u64(std::vector<uint8_t>& buf, uint64_t v) {
    append_u32(buf, uint32_t(v));
    append_u32(buf, uint32_t(v >> 32));
}

// Cursor over a byte buffer; every read checks for truncation.
class Reader {
public:
    Reader(const uint8_t* data, size_t size) : p_(data), end_(data + size) {}
    explicit Reader(const std::vector<uint8_t>& buf) : Reader(buf.data(), buf.size()) {}

    size_t remaining() const { return size_t(end_ - p_); }

    const uint8_t* bytes(size_t n) {
        if (remaining() < n) throw FormatError("truncated file");
        const uint8_t* at = p_;
        p_ += n;
        return at;
    }

    uint32_t u32() {
        const uint8_t* b = bytes(4);
        return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
    }

    uint64_t u64() {
        uint64_t lo = u32();
        return lo | uint64_t(u32()) << 32;
    }

    void expect_magic(const char (&magic)[5]) {
        const uint8_t* b = bytes(4);
        for (int i = 0; i < 4; ++i)
            if (b[i] != uint8_t(magic[i]))
                throw FormatError(std::string("bad magic, expected ") + magic);
    }

private:
    const uint8_t* p_;
    const uint8_t* end_;
};

uint32_t crc32(const uint8_t* data, size_t size);

}  // namespace metamorph::io
