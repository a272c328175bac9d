#pragma once

// Binary checkpoint container.
//
// Layout (all integers little-endian):
//   bytes 0..7   magic "KIESTCKP"
//   u32          format version (kCheckpointVersion)
//   u32          metadata length, then that many bytes of UTF-8 metadata
//   u64          record count
//   per record:  u32 name length, name bytes,
//                u32 rank, rank x u64 dims,
//                product(dims) x f64 payload (IEEE-754 bit pattern, LE)
//
// Records are written in the order given, so saving the same parameter list
// twice produces identical bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "kiest/numerics/nn.hpp"

namespace kiest {

inline constexpr char kCheckpointMagic[8] = {'K', 'I', 'E', 'S', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    std::string metadata;
    std::vector<CheckpointRecord> records;

    const CheckpointRecord* find(const std::string& name) const {
        for (const auto& r : records)
            if (r.name == name) return &r;
        return nullptr;
    }
};

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    explicit Reader(const std::string& buf) : buf_(buf) {}

    template <class T>
    T get() {
        need(sizeof(T));
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i)
            v |= static_cast<T>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += sizeof(T);
        return v;
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == buf_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > buf_.size()) throw IoError("checkpoint truncated");
    }
    const std::string& buf_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
    std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.metadata.size()));
    out += ck.metadata;
    detail::put_le<std::uint64_t>(out, ck.records.size());
    for (const auto& r : ck.records) {
        if (numel(r.shape) != r.values.size()) throw ContractError("checkpoint record " + r.name + " has inconsistent shape");
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
        out += r.name;
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
        for (auto d : r.shape) detail::put_le<std::uint64_t>(out, d);
        for (double v : r.values) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

inline Checkpoint decode_checkpoint(const std::string& buf) {
    if (buf.size() < sizeof(kCheckpointMagic) || std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
        throw IoError("not a checkpoint file (bad magic)");
    }
    detail::Reader rd(buf);
    rd.bytes(sizeof(kCheckpointMagic));
    const auto version = rd.get<std::uint32_t>();
    if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    ck.metadata = rd.bytes(rd.get<std::uint32_t>());
    const auto count = rd.get<std::uint64_t>();
    for (std::uint64_t k = 0; k < count; ++k) {
        CheckpointRecord r;
        r.name = rd.bytes(rd.get<std::uint32_t>());
        const auto rank = rd.get<std::uint32_t>();
        for (std::uint32_t i = 0; i < rank; ++i) r.shape.push_back(static_cast<std::size_t>(rd.get<std::uint64_t>()));
        r.values.resize(numel(r.shape));
        for (auto& v : r.values) v = std::bit_cast<double>(rd.get<std::uint64_t>());
        ck.records.push_back(std::move(r));
    }
    if (!rd.done()) throw IoError("trailing bytes after checkpoint records");
    return ck;
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("failed writing " + path);
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline Checkpoint snapshot(const ParameterStore& ps, std::string metadata = {}) {
    Checkpoint ck;
    ck.metadata = std::move(metadata);
    for (const auto& p : ps.params())
        ck.records.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
    return ck;
}

// Copies every parameter of `ps` from the checkpoint; names and shapes must match.
inline void restore(ParameterStore& ps, const Checkpoint& ck) {
    for (const auto& p : ps.params()) {
        const auto* r = ck.find(p.name);
        if (!r) throw IoError("checkpoint lacks parameter " + p.name);
        if (r->shape != p.tensor.shape()) {
            throw DimensionError("checkpoint parameter " + p.name + " has shape " + shape_str(r->shape) +
                                 ", model expects " + shape_str(p.tensor.shape()));
        }
        Tensor t = p.tensor;
        std::copy(r->values.begin(), r->values.end(), t.mutable_data().begin());
    }
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) { write_file(path, encode_checkpoint(ck)); }
inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

}  // namespace kiest
