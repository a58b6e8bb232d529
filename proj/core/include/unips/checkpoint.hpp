#pragma once

#include <string>
#include <vector>

#include "unips/nn.hpp"

namespace unips {

// Flat binary parameter container:
//   magic "UNIPSCKPT", u32 version,
//   u32 meta length + meta bytes (JSON: model config, hashes),
//   u32 record count,
//   records: u32 name length, name bytes, u32 rank, u32 dims[rank],
//            raw little-endian f32 payload.
// Round-trips are bit exact.

struct CheckpointRecord {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

struct Checkpoint {
    std::string meta_json;
    std::vector<CheckpointRecord> records;
};

void save_checkpoint(const std::string& path, const ParamStore& store,
                     const std::string& meta_json);

Checkpoint load_checkpoint(const std::string& path);

// Copies loaded values into matching store entries. Names and shapes must
// match one-to-one; mismatches raise with the offending names.
void apply_checkpoint(const Checkpoint& ckpt, ParamStore& store);

}  // namespace unips
