#include "metamorph/checkpoint.hpp"

#include <cstring>

#include "json.hpp"
#include "metamorph/io.hpp"

namespace metamorph {

using nlohmann::json;

bool Checkpoint::has(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return true;
    return false;
}

const NamedTensor& Checkpoint::tensor(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return t;
    throw FormatError("checkpoint: missing tensor " + name);
}

void Checkpoint::add(const std::string& name, const Tensor& t) {
    add(name, t.shape(), t.data());
}

void Checkpoint::add(const std::string& name, Shape shape, std::vector<float> data) {
    if (int64_t(data.size()) != shape_numel(shape))
        throw ShapeError("checkpoint: data does not match shape for " + name);
    if (has(name)) throw ContractError("checkpoint: duplicate tensor " + name);
    tensors.push_back({name, std::move(shape), std::move(data)});
}

Tensor Checkpoint::get(const std::string& name, bool requires_grad) const {
    const NamedTensor& t = tensor(name);
    return Tensor::from_data(t.shape, t.data, requires_grad);
}

std::vector<float> Checkpoint::get_vector(const std::string& name) const {
    return tensor(name).data;
}

std::string Checkpoint::meta_at(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw FormatError("checkpoint: missing meta key " + key);
    return it->second;
}

std::vector<uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    json manifest;
    manifest["version"] = kCheckpointVersion;
    manifest["meta"] = json::object();
    for (const auto& [k, v] : ckpt.meta) manifest["meta"][k] = v;

    json dir = json::array();
    uint64_t offset = 0;
    for (const auto& t : ckpt.tensors) {
        json entry;
        entry["name"] = t.name;
        entry["dtype"] = "f32";
        entry["shape"] = t.shape;
        entry["offset"] = offset;
        dir.push_back(entry);
        offset += uint64_t(t.data.size()) * 4;
    }
    manifest["tensors"] = dir;
    std::string mtext = manifest.dump();

    std::vector<uint8_t> out;
    out.reserve(16 + mtext.size() + size_t(offset) + 4);
    out.insert(out.end(), {'N', 'M', 'C', 'K'});
    io::append_u32(out, kCheckpointVersion);
    io::append_u64(out, uint64_t(mtext.size()));
    out.insert(out.end(), mtext.begin(), mtext.end());

    size_t payload_start = out.size();
    for (const auto& t : ckpt.tensors) {
        size_t bytes = t.data.size() * 4;
        size_t at = out.size();
        out.resize(at + bytes);
        std::memcpy(out.data() + at, t.data.data(), bytes);
    }
    uint32_t crc = io::crc32(out.data() + payload_start, out.size() - payload_start);
    io::append_u32(out, crc);
    return out;
}

Checkpoint decode_checkpoint(const std::vector<uint8_t>& bytes) {
    io::Reader r(bytes);
    r.expect_magic("NMCK");
    uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    uint64_t mlen = r.u64();
    if (r.remaining() < mlen + 4) throw FormatError("checkpoint: truncated manifest");
    const uint8_t* mraw = r.bytes(size_t(mlen));

    json manifest;
    try {
        manifest = json::parse(mraw, mraw + mlen);
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: manifest parse failure: ") + e.what());
    }

    size_t payload_size = r.remaining() - 4;
    const uint8_t* payload = payload_size ? r.bytes(payload_size) : nullptr;
    uint32_t stored_crc = r.u32();
    if (io::crc32(payload, payload_size) != stored_crc)
        throw FormatError("checkpoint: payload CRC mismatch");

    Checkpoint ckpt;
    if (manifest.contains("meta"))
        for (auto& [k, v] : manifest["meta"].items()) ckpt.meta[k] = v.get<std::string>();

    uint64_t expected_offset = 0;
    for (const auto& entry : manifest["tensors"]) {
        NamedTensor t;
        t.name = entry["name"].get<std::string>();
        if (entry["dtype"].get<std::string>() != "f32")
            throw FormatError("checkpoint: unsupported dtype for " + t.name);
        t.shape = entry["shape"].get<Shape>();
        uint64_t offset = entry["offset"].get<uint64_t>();
        if (offset != expected_offset)
            throw FormatError("checkpoint: overlapping or unordered offsets at " + t.name);
        uint64_t count = uint64_t(shape_numel(t.shape));
        if (offset + count * 4 > payload_size)
            throw FormatError("checkpoint: tensor " + t.name + " exceeds payload");
        t.data.resize(size_t(count));
        std::memcpy(t.data.data(), payload + offset, size_t(count) * 4);
        expected_offset = offset + count * 4;
        ckpt.tensors.push_back(std::move(t));
    }
    if (expected_offset != payload_size)
        throw FormatError("checkpoint: payload has unaccounted bytes");
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    io::write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::string& path) {
    return decode_checkpoint(io::read_file(path));
}

}  // namespace metamorph
