#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mlmlab/param_store.hpp"

namespace mlmlab {

// Container file for a ParamStore: a manifest (segment name, shape, offset)
// followed by the raw little-endian float64 payload. An optional metadata
// string (JSON in practice) rides along for checkpoint manifests.
//
// layout:
//   magic   "MLPS0001"
//   u64     seed
//   u32     metadata length, bytes
//   u32     segment count
//   per segment: u32 name len, name bytes, u32 ndim, i64 dims..., u64 offset
//   payload: f64 little-endian, in segment order

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "param container assumes a little-endian host");

inline void put_u32(std::ostream& os, uint32_t x) {
    os.write(reinterpret_cast<const char*>(&x), sizeof(x));
}
inline void put_u64(std::ostream& os, uint64_t x) {
    os.write(reinterpret_cast<const char*>(&x), sizeof(x));
}
inline void put_i64(std::ostream& os, int64_t x) {
    os.write(reinterpret_cast<const char*>(&x), sizeof(x));
}

inline uint32_t get_u32(std::istream& is) {
    uint32_t x = 0;
    is.read(reinterpret_cast<char*>(&x), sizeof(x));
    return x;
}
inline uint64_t get_u64(std::istream& is) {
    uint64_t x = 0;
    is.read(reinterpret_cast<char*>(&x), sizeof(x));
    return x;
}
inline int64_t get_i64(std::istream& is) {
    int64_t x = 0;
    is.read(reinterpret_cast<char*>(&x), sizeof(x));
    return x;
}

}  // namespace detail

inline constexpr char kParamMagic[9] = "MLPS0001";

inline void save_params(const ParamStore& ps, const std::string& path,
                        const std::string& metadata = "") {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("save_params: cannot open '" + path + "'");
    os.write(kParamMagic, 8);
    detail::put_u64(os, ps.seed);
    detail::put_u32(os, static_cast<uint32_t>(metadata.size()));
    os.write(metadata.data(), static_cast<std::streamsize>(metadata.size()));
    detail::put_u32(os, static_cast<uint32_t>(ps.segments.size()));
    uint64_t offset = 0;
    for (const auto& [name, t] : ps.segments) {
        detail::put_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<uint32_t>(t.shape.size()));
        for (int64_t e : t.shape) detail::put_i64(os, e);
        detail::put_u64(os, offset);
        offset += static_cast<uint64_t>(t.size());
    }
    for (const auto& [name, t] : ps.segments)
        os.write(reinterpret_cast<const char*>(t.v.data()),
                 static_cast<std::streamsize>(t.v.size() * sizeof(double)));
    if (!os) throw IoError("save_params: write failed for '" + path + "'");
}

inline ParamStore load_params(const std::string& path, std::string* metadata = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_params: cannot open '" + path + "'");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kParamMagic, 8) != 0)
        throw IoError("load_params: bad magic in '" + path + "'");
    ParamStore ps;
    ps.seed = detail::get_u64(is);
    uint32_t meta_len = detail::get_u32(is);
    std::string meta(meta_len, '\0');
    is.read(meta.data(), meta_len);
    if (metadata) *metadata = meta;
    uint32_t n_seg = detail::get_u32(is);
    std::vector<std::pair<std::string, std::vector<int64_t>>> manifest;
    for (uint32_t s = 0; s < n_seg; ++s) {
        uint32_t name_len = detail::get_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        uint32_t ndim = detail::get_u32(is);
        std::vector<int64_t> dims(ndim);
        for (auto& d : dims) d = detail::get_i64(is);
        detail::get_u64(is);  // offset, implied by order
        manifest.emplace_back(std::move(name), std::move(dims));
    }
    if (!is) throw IoError("load_params: truncated manifest in '" + path + "'");
    for (auto& [name, dims] : manifest) {
        Tensor t = Tensor::zeros(dims);
        is.read(reinterpret_cast<char*>(t.v.data()),
                static_cast<std::streamsize>(t.v.size() * sizeof(double)));
        ps.add(name, std::move(t));
    }
    if (!is) throw IoError("load_params: truncated payload in '" + path + "'");
    return ps;
}

}  // namespace mlmlab
