#include "metamorph/io.hpp"

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace metamorph::io {

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    in.seekg(0, std::ios::end);
    auto size = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<uint8_t> buf(size_t(size), 0);
    if (size > 0 && !in.read(reinterpret_cast<char*>(buf.data()), size))
        throw IoError("short read on " + path);
    return buf;
}

void write_file_atomic(const std::string& path, const uint8_t* data, size_t size) {
    namespace fs = std::filesystem;
    fs::path target(path);
    if (target.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(target.parent_path(), ec);
    }
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        if (size > 0) out.write(reinterpret_cast<const char*>(data), std::streamsize(size));
        if (!out) throw IoError("short write on " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError("cannot rename into place: " + path);
    }
}

void write_file_atomic(const std::string& path, const std::vector<uint8_t>& data) {
    write_file_atomic(path, data.data(), data.size());
}

void write_text_atomic(const std::string& path, const std::string& text) {
    write_file_atomic(path, reinterpret_cast<const uint8_t*>(text.data()), text.size());
}

namespace {

std::array<uint32_t, 256> make_crc_table() {
    std::array<uint32_t, 256> table{};
    for (uint32_t i = 0; i < 256; ++i) {
        uint32_t c = i;
        for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
        table[i] = c;
    }
    return table;
}

}  // namespace

uint32_t crc32(const uint8_t* data, size_t size) {
    static const std::array<uint32_t, 256> table = make_crc_table();
    uint32_t c = 0xFFFFFFFFu;
    for (size_t i = 0; i < size; ++i) c = table[(c ^ data[i]) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

}  // namespace metamorph::io
