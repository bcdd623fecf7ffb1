#include "instructtime/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "instructtime/common.hpp"

namespace instructtime {

namespace {

constexpr char kMagic[4] = {'I', 'T', 'C', 'K'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ofstream& out, uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void put_str(std::ofstream& out, const std::string& s) {
    put_u32(out, static_cast<uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

uint32_t get_u32(std::ifstream& in) {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw Error(ErrKind::io, "truncated checkpoint");
    return v;
}

std::string get_str(std::ifstream& in) {
    const uint32_t n = get_u32(in);
    if (n > (1u << 20)) throw Error(ErrKind::io, "checkpoint string too large");
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw Error(ErrKind::io, "truncated checkpoint");
    return s;
}

}  // namespace

const std::string* CheckpointData::meta_value(const std::string& key) const {
    for (const auto& [k, v] : meta)
        if (k == key) return &v;
    return nullptr;
}

const nn::Tensor* CheckpointData::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

void CheckpointData::set_meta(const std::string& key, const std::string& value) {
    for (auto& [k, v] : meta)
        if (k == key) {
            v = value;
            return;
        }
    meta.emplace_back(key, value);
}

void CheckpointData::add_tensor(const std::string& name, nn::Tensor t) {
    tensors.emplace_back(name, std::move(t));
}

void save_checkpoint(const std::string& path, const CheckpointData& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrKind::io, "cannot write checkpoint " + path);
    out.write(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<uint32_t>(data.meta.size()));
    for (const auto& [k, v] : data.meta) {
        put_str(out, k);
        put_str(out, v);
    }
    put_u32(out, static_cast<uint32_t>(data.tensors.size()));
    for (const auto& [name, t] : data.tensors) {
        put_str(out, name);
        put_u32(out, static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) put_u32(out, static_cast<uint32_t>(d));
        out.write(reinterpret_cast<const char*>(t.v.data()),
                  static_cast<std::streamsize>(t.v.size() * sizeof(Real)));
    }
    if (!out) throw Error(ErrKind::io, "write failure on checkpoint " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrKind::io, "cannot open checkpoint " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw Error(ErrKind::incompatible, "not a checkpoint file: " + path);
    const uint32_t version = get_u32(in);
    if (version != kVersion)
        throw Error(ErrKind::incompatible,
                    "unsupported checkpoint version " + std::to_string(version));
    CheckpointData data;
    const uint32_t n_meta = get_u32(in);
    for (uint32_t i = 0; i < n_meta; ++i) {
        std::string k = get_str(in);
        std::string v = get_str(in);
        data.meta.emplace_back(std::move(k), std::move(v));
    }
    const uint32_t n_tensors = get_u32(in);
    for (uint32_t i = 0; i < n_tensors; ++i) {
        std::string name = get_str(in);
        const uint32_t ndim = get_u32(in);
        if (ndim > 8) throw Error(ErrKind::io, "checkpoint tensor rank too large");
        std::vector<int> shape(ndim);
        size_t numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            shape[d] = static_cast<int>(get_u32(in));
            numel *= static_cast<size_t>(shape[d]);
        }
        nn::Tensor t;
        t.shape = std::move(shape);
        t.v.resize(numel);
        in.read(reinterpret_cast<char*>(t.v.data()),
                static_cast<std::streamsize>(numel * sizeof(Real)));
        if (!in) throw Error(ErrKind::io, "truncated checkpoint tensor in " + path);
        data.tensors.emplace_back(std::move(name), std::move(t));
    }
    return data;
}

uint64_t file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrKind::io, "cannot open " + path);
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[65536];
    while (in) {
        in.read(buf, sizeof(buf));
        const std::streamsize n = in.gcount();
        if (n > 0) h = fnv1a(buf, static_cast<size_t>(n), h);
    }
    return h;
}

}  // namespace instructtime
