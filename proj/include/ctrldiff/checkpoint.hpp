#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctrldiff/common.hpp"
#include "ctrldiff/registry.hpp"
#include "ctrldiff/tensor.hpp"

namespace ctrldiff {

// Single-file archive for parameters, adapters and dataset caches:
//   magic "CDAR", u32 version, u32 json_len, config json,
//   u32 entry_count, then per entry:
//     u16 name_len, name, u8 ndim, u32 dims[ndim], f32 data (little endian),
//   u32 crc32 over everything before it.
// Round-trips are bit-exact; the checksum guards torn or corrupted files.

namespace detail {

inline uint32_t crc32(const uint8_t* data, size_t len) {
    static const std::array<uint32_t, 256> table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t c = 0xFFFFFFFFu;
    for (size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

template <typename T>
void append_raw(std::vector<uint8_t>& buf, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    size_t at = buf.size();
    buf.resize(at + sizeof(T));
    std::memcpy(buf.data() + at, &v, sizeof(T));  // x86: little endian
}

template <typename T>
T read_raw(const std::vector<uint8_t>& buf, size_t& at) {
    T v;
    check(at + sizeof(T) <= buf.size(), "archive truncated");
    std::memcpy(&v, buf.data() + at, sizeof(T));
    at += sizeof(T);
    return v;
}

}  // namespace detail

struct ArchiveEntry {
    std::string name;
    std::vector<int64_t> shape;
    std::vector<float> data;  // stored as 32-bit floats on disk
};

struct Archive {
    uint32_t version = 1;
    nlohmann::json meta;  // config record
    std::vector<ArchiveEntry> entries;

    const ArchiveEntry* find(const std::string& name) const {
        for (const auto& e : entries) {
            if (e.name == name) return &e;
        }
        return nullptr;
    }
};

inline std::vector<uint8_t> serialize_archive(const Archive& ar) {
    std::vector<uint8_t> buf;
    buf.insert(buf.end(), {'C', 'D', 'A', 'R'});
    detail::append_raw<uint32_t>(buf, ar.version);
    std::string meta = ar.meta.dump();
    detail::append_raw<uint32_t>(buf, static_cast<uint32_t>(meta.size()));
    buf.insert(buf.end(), meta.begin(), meta.end());
    detail::append_raw<uint32_t>(buf, static_cast<uint32_t>(ar.entries.size()));
    for (const auto& e : ar.entries) {
        check(e.name.size() < 65536, "archive entry name too long");
        detail::append_raw<uint16_t>(buf, static_cast<uint16_t>(e.name.size()));
        buf.insert(buf.end(), e.name.begin(), e.name.end());
        detail::append_raw<uint8_t>(buf, static_cast<uint8_t>(e.shape.size()));
        int64_t n = 1;
        for (int64_t d : e.shape) {
            detail::append_raw<uint32_t>(buf, static_cast<uint32_t>(d));
            n *= d;
        }
        check(n == static_cast<int64_t>(e.data.size()),
              "archive entry " + e.name + ": data size does not match shape");
        size_t at = buf.size();
        buf.resize(at + e.data.size() * sizeof(float));
        std::memcpy(buf.data() + at, e.data.data(), e.data.size() * sizeof(float));
    }
    detail::append_raw<uint32_t>(buf, detail::crc32(buf.data(), buf.size()));
    return buf;
}

inline Archive deserialize_archive(const std::vector<uint8_t>& buf) {
    check(buf.size() >= 8 + 4, "archive too small");
    uint32_t stored_crc;
    std::memcpy(&stored_crc, buf.data() + buf.size() - 4, 4);
    uint32_t actual = detail::crc32(buf.data(), buf.size() - 4);
    check(stored_crc == actual, "archive checksum mismatch");

    size_t at = 0;
    check(buf[0] == 'C' && buf[1] == 'D' && buf[2] == 'A' && buf[3] == 'R',
          "not an archive file");
    at = 4;
    Archive ar;
    ar.version = detail::read_raw<uint32_t>(buf, at);
    check(ar.version == 1, "unsupported archive version " + std::to_string(ar.version));
    uint32_t meta_len = detail::read_raw<uint32_t>(buf, at);
    check(at + meta_len <= buf.size(), "archive truncated in metadata");
    std::string meta(reinterpret_cast<const char*>(buf.data() + at), meta_len);
    at += meta_len;
    ar.meta = nlohmann::json::parse(meta);
    uint32_t count = detail::read_raw<uint32_t>(buf, at);
    ar.entries.resize(count);
    for (uint32_t i = 0; i < count; ++i) {
        ArchiveEntry& e = ar.entries[i];
        uint16_t name_len = detail::read_raw<uint16_t>(buf, at);
        check(at + name_len <= buf.size(), "archive truncated in entry name");
        e.name.assign(reinterpret_cast<const char*>(buf.data() + at), name_len);
        at += name_len;
        uint8_t ndim = detail::read_raw<uint8_t>(buf, at);
        int64_t n = 1;
        for (uint8_t d = 0; d < ndim; ++d) {
            int64_t dim = detail::read_raw<uint32_t>(buf, at);
            e.shape.push_back(dim);
            n *= dim;
        }
        check(at + static_cast<size_t>(n) * sizeof(float) <= buf.size(),
              "archive truncated in entry " + e.name);
        e.data.resize(static_cast<size_t>(n));
        std::memcpy(e.data.data(), buf.data() + at, static_cast<size_t>(n) * sizeof(float));
        at += static_cast<size_t>(n) * sizeof(float);
    }
    return ar;
}

inline void write_archive(const std::string& path, const Archive& ar) {
    std::vector<uint8_t> buf = serialize_archive(ar);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    check(f.good(), "cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    check(f.good(), "failed writing " + path);
}

inline Archive read_archive(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "cannot open " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
    return deserialize_archive(buf);
}

template <typename Real>
ArchiveEntry entry_from_tensor(const std::string& name, const Tensor<Real>& t) {
    ArchiveEntry e;
    e.name = name;
    e.shape = t.shape();
    e.data.resize(static_cast<size_t>(t.numel()));
    for (int64_t i = 0; i < t.numel(); ++i) e.data[static_cast<size_t>(i)] = static_cast<float>(t[i]);
    return e;
}

template <typename Real>
Tensor<Real> tensor_from_entry(const ArchiveEntry& e) {
    Tensor<Real> t(e.shape);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<Real>(e.data[static_cast<size_t>(i)]);
    return t;
}

// appends every parameter of a registry, names optionally re-prefixed
template <typename Real>
void append_registry(Archive& ar, const ParamRegistry<Real>& reg) {
    for (const auto& p : reg.items()) ar.entries.push_back(entry_from_tensor(p->name, p->value));
}

// loads parameters by name; every registry entry must be present with the
// right shape
template <typename Real>
void load_registry(const Archive& ar, ParamRegistry<Real>& reg) {
    for (const auto& p : reg.items()) {
        const ArchiveEntry* e = ar.find(p->name);
        check(e != nullptr, "checkpoint is missing parameter " + p->name);
        check(e->shape == p->value.shape(), "checkpoint parameter " + p->name +
                                                " has wrong shape");
        p->value = tensor_from_entry<Real>(*e);
    }
}

}  // namespace ctrldiff
