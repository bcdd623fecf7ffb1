#pragma once

#include <string>
#include <utility>
#include <vector>

#include "instructtime/tensor.hpp"

namespace instructtime {

// Binary tensor container used by tokenizer and model checkpoints.
// Layout: "ITCK" magic, u32 version, meta key/value strings, named tensors
// (dims as u32, payload as little-endian doubles). Keys and tensors keep
// insertion order so identical state serializes to identical bytes.
struct CheckpointData {
    std::vector<std::pair<std::string, std::string>> meta;
    std::vector<std::pair<std::string, nn::Tensor>> tensors;

    const std::string* meta_value(const std::string& key) const;
    const nn::Tensor* tensor(const std::string& name) const;
    void set_meta(const std::string& key, const std::string& value);
    void add_tensor(const std::string& name, nn::Tensor t);
};

void save_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& path);

// FNV-1a over the raw file bytes; the hash quoted in reproducibility checks.
uint64_t file_hash(const std::string& path);

}  // namespace instructtime
