#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include "cfkit/tensor.hpp"

namespace cfkit {

// Named, shaped parameter registry. Iteration order is the insertion order of
// graph construction; serialization and counting both follow it.
template <class R>
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor<R> value;
    };

    int add(std::string name, Tensor<R> value) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        const int idx = static_cast<int>(entries_.size());
        index_.emplace(name, idx);
        entries_.push_back({std::move(name), std::move(value)});
        return idx;
    }

    int size() const { return static_cast<int>(entries_.size()); }
    const Entry& entry(int idx) const { return entries_[static_cast<size_t>(idx)]; }
    Entry& entry(int idx) { return entries_[static_cast<size_t>(idx)]; }

    const Tensor<R>& value(int idx) const { return entries_[static_cast<size_t>(idx)].value; }
    Tensor<R>& value(int idx) { return entries_[static_cast<size_t>(idx)].value; }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    int find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter name: " + name);
        return it->second;
    }

    int64_t total_elements() const {
        int64_t total = 0;
        for (const auto& e : entries_) total += e.value.numel();
        return total;
    }

    const std::vector<Entry>& entries() const { return entries_; }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, int> index_;
};

// Gradient accumulators aligned with a ParamStore by index.
template <class R>
class GradStore {
public:
    explicit GradStore(const ParamStore<R>& store) {
        grads_.reserve(static_cast<size_t>(store.size()));
        for (int i = 0; i < store.size(); ++i) grads_.emplace_back(store.value(i).shape());
    }

    Tensor<R>& operator[](int idx) { return grads_[static_cast<size_t>(idx)]; }
    const Tensor<R>& operator[](int idx) const { return grads_[static_cast<size_t>(idx)]; }

    void accumulate(int idx, const Tensor<R>& g) {
        Tensor<R>& dst = grads_[static_cast<size_t>(idx)];
        if (dst.shape() != g.shape()) throw ConfigError("gradient shape mismatch");
        for (int64_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
    }

    void accumulate_vec(int idx, const std::vector<R>& g) {
        Tensor<R>& dst = grads_[static_cast<size_t>(idx)];
        if (static_cast<size_t>(dst.numel()) != g.size()) throw ConfigError("gradient length mismatch");
        for (size_t i = 0; i < g.size(); ++i) dst[static_cast<int64_t>(i)] += g[i];
    }

private:
    std::vector<Tensor<R>> grads_;
};

// Binary weight container "CFW1":
//   magic "CFW1"
//   u32 LE entry count
//   per entry: u16 LE name length, UTF-8 name, u8 dtype (0 = f32), u8 rank,
//              rank x u64 LE extents, raw little-endian payload.
// Entries appear in ParamStore order; save -> load is bit-exact.
namespace weights {

inline void put_u16(std::string& buf, uint16_t v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::string serialize(const ParamStore<float>& store) {
    std::string buf = "CFW1";
    put_u32(buf, static_cast<uint32_t>(store.size()));
    for (const auto& e : store.entries()) {
        if (e.name.size() > 0xffff) throw ConfigError("parameter name too long: " + e.name);
        put_u16(buf, static_cast<uint16_t>(e.name.size()));
        buf += e.name;
        buf.push_back(static_cast<char>(0));  // dtype f32
        buf.push_back(static_cast<char>(4));  // rank
        const Shape4 s = e.value.shape();
        put_u64(buf, static_cast<uint64_t>(s.n));
        put_u64(buf, static_cast<uint64_t>(s.c));
        put_u64(buf, static_cast<uint64_t>(s.h));
        put_u64(buf, static_cast<uint64_t>(s.w));
        static_assert(sizeof(float) == 4);
        const size_t bytes = static_cast<size_t>(e.value.numel()) * 4;
        const size_t at = buf.size();
        buf.resize(at + bytes);
        std::memcpy(buf.data() + at, e.value.data(), bytes);
    }
    return buf;
}

inline void save(const ParamStore<float>& store, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IngestError("cannot open for writing: " + path);
    const std::string buf = serialize(store);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IngestError("write failed: " + path);
}

class Reader {
public:
    explicit Reader(std::string bytes) : buf_(std::move(bytes)) {}

    uint64_t take_uint(int nbytes, const char* what) {
        if (pos_ + static_cast<size_t>(nbytes) > buf_.size())
            throw IngestError(std::string("truncated weight file reading ") + what + " at offset " +
                              std::to_string(pos_));
        uint64_t v = 0;
        for (int i = 0; i < nbytes; ++i)
            v |= static_cast<uint64_t>(static_cast<unsigned char>(buf_[pos_ + static_cast<size_t>(i)]))
                 << (8 * i);
        pos_ += static_cast<size_t>(nbytes);
        return v;
    }

    std::string take_bytes(size_t n, const char* what) {
        if (pos_ + n > buf_.size())
            throw IngestError(std::string("truncated weight file reading ") + what + " at offset " +
                              std::to_string(pos_));
        std::string out = buf_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    size_t pos() const { return pos_; }
    bool exhausted() const { return pos_ == buf_.size(); }

private:
    std::string buf_;
    size_t pos_ = 0;
};

// Loads into an existing store; names, order and shapes must match exactly.
inline void load_into(ParamStore<float>& store, const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IngestError("cannot open weight file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r(std::move(bytes));
    if (r.take_bytes(4, "magic") != "CFW1") throw IngestError("bad magic, not a CFW1 weight file: " + path);
    const uint64_t count = r.take_uint(4, "entry count");
    if (static_cast<int>(count) != store.size())
        throw ConfigError("weight file has " + std::to_string(count) + " entries, model expects " +
                          std::to_string(store.size()));
    for (int i = 0; i < store.size(); ++i) {
        auto& e = store.entry(i);
        const uint64_t nlen = r.take_uint(2, "name length");
        const std::string name = r.take_bytes(static_cast<size_t>(nlen), "name");
        if (name != e.name)
            throw ConfigError("weight/config mismatch at entry " + std::to_string(i) + ": file has '" +
                              name + "', model expects '" + e.name + "'");
        const uint64_t dtype = r.take_uint(1, "dtype");
        if (dtype != 0) throw IngestError("unsupported dtype " + std::to_string(dtype) + " for " + name);
        const uint64_t rank = r.take_uint(1, "rank");
        if (rank != 4) throw IngestError("unsupported rank " + std::to_string(rank) + " for " + name);
        Shape4 s;
        s.n = static_cast<int64_t>(r.take_uint(8, "extent"));
        s.c = static_cast<int64_t>(r.take_uint(8, "extent"));
        s.h = static_cast<int64_t>(r.take_uint(8, "extent"));
        s.w = static_cast<int64_t>(r.take_uint(8, "extent"));
        if (s != e.value.shape())
            throw ConfigError("weight/config shape mismatch for '" + name + "': file " + s.str() +
                              ", model " + e.value.shape().str());
        const std::string payload = r.take_bytes(static_cast<size_t>(s.numel()) * 4, "payload");
        std::memcpy(e.value.data(), payload.data(), payload.size());
    }
    if (!r.exhausted())
        throw IngestError("trailing bytes in weight file at offset " + std::to_string(r.pos()));
}

}  // namespace weights

}  // namespace cfkit
