#include "iclm/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

#include "iclm/errors.hpp"

namespace iclm {
namespace checkpoint {

namespace {

void write_u64(std::ofstream& out, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64(std::ifstream& in) {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), 8);
    if (!in) throw IoError("checkpoint: truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

void write_f64_le(std::ofstream& out, const double* values, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, &values[i], 8);
        unsigned char buf[8];
        for (int k = 0; k < 8; ++k) buf[k] = static_cast<unsigned char>((bits >> (8 * k)) & 0xff);
        out.write(reinterpret_cast<const char*>(buf), 8);
    }
}

void read_f64_le(std::ifstream& in, double* values, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
        unsigned char buf[8];
        in.read(reinterpret_cast<char*>(buf), 8);
        if (!in) throw IoError("checkpoint: truncated tensor payload");
        std::uint64_t bits = 0;
        for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(buf[k]) << (8 * k);
        std::memcpy(&values[i], &bits, 8);
    }
}

}  // namespace

void save(const std::string& path, const std::vector<std::pair<std::string, Tensor>>& tensors) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("checkpoint: cannot open " + path + " for writing");
    out.write(kMagic, 16);
    write_u64(out, tensors.size());
    std::uint64_t offset = 0;
    for (const auto& [name, tensor] : tensors) {
        write_u64(out, name.size());
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u64(out, tensor.rank());
        for (auto d : tensor.shape()) write_u64(out, d);
        write_u64(out, offset);
        offset += tensor.size() * 8;
    }
    for (const auto& [name, tensor] : tensors) {
        (void)name;
        write_f64_le(out, tensor.data(), tensor.size());
    }
    if (!out) throw IoError("checkpoint: write failed for " + path);
}

std::vector<std::pair<std::string, Tensor>> load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("checkpoint: cannot open " + path);
    char magic[16];
    in.read(magic, 16);
    if (!in || std::memcmp(magic, kMagic, 16) != 0) {
        throw IoError("checkpoint: bad magic header in " + path);
    }
    const std::uint64_t count = read_u64(in);
    struct Entry {
        std::string name;
        std::vector<std::size_t> shape;
        std::uint64_t offset;
    };
    std::vector<Entry> entries;
    entries.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        Entry e;
        const std::uint64_t name_len = read_u64(in);
        e.name.resize(name_len);
        in.read(e.name.data(), static_cast<std::streamsize>(name_len));
        const std::uint64_t rank = read_u64(in);
        e.shape.resize(rank);
        for (std::uint64_t r = 0; r < rank; ++r) e.shape[r] = read_u64(in);
        e.offset = read_u64(in);
        entries.push_back(std::move(e));
    }
    const std::streampos payload_start = in.tellg();
    std::vector<std::pair<std::string, Tensor>> result;
    result.reserve(entries.size());
    for (const auto& e : entries) {
        in.seekg(payload_start + static_cast<std::streamoff>(e.offset));
        Tensor t = Tensor::zeros(e.shape, false);
        read_f64_le(in, t.data(), t.size());
        result.emplace_back(e.name, std::move(t));
    }
    return result;
}

void load_into(const std::string& path, std::vector<std::pair<std::string, Tensor>>& tensors) {
    auto loaded = load(path);
    std::map<std::string, Tensor> by_name;
    for (auto& [name, tensor] : loaded) by_name.emplace(name, tensor);
    for (auto& [name, target] : tensors) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw IoError("checkpoint: tensor '" + name + "' missing from " + path);
        }
        if (it->second.shape() != target.shape()) {
            throw ShapeError("checkpoint: tensor '" + name + "' has shape " +
                             shape_str(it->second.shape()) + ", expected " +
                             shape_str(target.shape()));
        }
        std::copy(it->second.data(), it->second.data() + it->second.size(), target.data());
    }
}

}  // namespace checkpoint
}  // namespace iclm
