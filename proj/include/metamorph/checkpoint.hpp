#pragma once

#include <map>
#include <string>
#include <vector>

#include "metamorph/tensor.hpp"

// NMCK checkpoint format:
//   "NMCK" | version u32 | manifest length u64 | manifest (UTF-8 JSON) |
//   payload (little-endian f32 blobs at the manifest's offsets) | CRC32 u32
// The JSON manifest holds a named-tensor directory plus free-form string
// metadata. Offsets are relative to the payload start and non-overlapping.

namespace metamorph {

inline constexpr uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

struct Checkpoint {
    std::map<std::string, std::string> meta;
    std::vector<NamedTensor> tensors;

    bool has(const std::string& name) const;
    const NamedTensor& tensor(const std::string& name) const;  // FormatError if absent

    void add(const std::string& name, const Tensor& t);
    void add(const std::string& name, Shape shape, std::vector<float> data);

    Tensor get(const std::string& name, bool requires_grad = false) const;
    std::vector<float> get_vector(const std::string& name) const;

    std::string meta_at(const std::string& key) const;  // FormatError if absent
};

std::vector<uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace metamorph
