#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "msmg/error.hpp"
#include "msmg/params.hpp"

namespace msmg {

// On-disk snapshot: magic "MSMG", format version, a fingerprint of the
// architecture-relevant config, then one record per tensor:
//   u32 name length, name bytes, u32 rank, u64 per dim, f32 payload.
// All integers and floats little-endian.
struct CheckpointData {
    std::uint64_t fingerprint = 0;
    std::vector<std::pair<std::string, Tensor<float>>> tensors;
};

namespace detail {

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class U>
void write_le(std::ostream& os, U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    unsigned char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U read_le(std::istream& is) {
    unsigned char buf[sizeof(U)];
    is.read(reinterpret_cast<char*>(buf), sizeof(U));
    if (!is) throw DataError("checkpoint: truncated file");
    U v;
    std::memcpy(&v, buf, sizeof(U));
    return v;
}

}  // namespace detail

// FNV-1a over a string; used to fingerprint the architecture config.
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline void save_checkpoint(const std::string& path, const CheckpointData& ck) {
    static_assert(sizeof(float) == 4);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("checkpoint: cannot open for writing: " + path);
    os.write("MSMG", 4);
    detail::write_le<std::uint32_t>(os, detail::kCheckpointVersion);
    detail::write_le<std::uint64_t>(os, ck.fingerprint);
    for (const auto& [name, t] : ck.tensors) {
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
        for (std::size_t d : t.shape) detail::write_le<std::uint64_t>(os, d);
        for (float v : t.data) detail::write_le<float>(os, v);
    }
    if (!os) throw DataError("checkpoint: write failed: " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "MSMG", 4) != 0)
        throw DataError("checkpoint: bad magic in " + path);
    const auto version = detail::read_le<std::uint32_t>(is);
    if (version != detail::kCheckpointVersion)
        throw DataError("checkpoint: unsupported format version " + std::to_string(version));
    CheckpointData ck;
    ck.fingerprint = detail::read_le<std::uint64_t>(is);
    while (is.peek() != std::ifstream::traits_type::eof()) {
        const auto name_len = detail::read_le<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw DataError("checkpoint: truncated file");
        const auto rank = detail::read_le<std::uint32_t>(is);
        std::vector<std::size_t> shape(rank);
        std::size_t n = 1;
        for (auto& d : shape) {
            d = static_cast<std::size_t>(detail::read_le<std::uint64_t>(is));
            n *= d;
        }
        Tensor<float> t(shape);
        for (std::size_t i = 0; i < n; ++i) t.data[i] = detail::read_le<float>(is);
        ck.tensors.emplace_back(std::move(name), std::move(t));
    }
    return ck;
}

// Pack every store entry (values only; gradients are transient).
inline CheckpointData snapshot_params(const ParamStore<float>& ps, std::uint64_t fingerprint) {
    CheckpointData ck;
    ck.fingerprint = fingerprint;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const int idx = static_cast<int>(i);
        ck.tensors.emplace_back(ps.name(idx), ps.value(idx));
    }
    return ck;
}

// Restore store values from a snapshot. Strict mode demands a matching
// fingerprint and a tensor for every store entry; force_partial loads just
// the name-and-shape matches (pretrained-encoder import) and returns how
// many entries it touched.
inline std::size_t restore_params(ParamStore<float>& ps, const CheckpointData& ck,
                                  std::uint64_t fingerprint, bool force_partial = false) {
    if (!force_partial && ck.fingerprint != fingerprint)
        throw DataError("checkpoint: config fingerprint mismatch (expected " +
                        std::to_string(fingerprint) + ", file has " +
                        std::to_string(ck.fingerprint) + "); pass force_partial to override");
    std::size_t loaded = 0;
    for (const auto& [name, t] : ck.tensors) {
        const int idx = ps.find(name);
        if (idx < 0) {
            if (force_partial) continue;
            // optimizer moments and counters ride along in the same file
            if (name.rfind("adam.", 0) == 0 || name == "step") continue;
            throw DataError("checkpoint: unknown parameter in file: " + name);
        }
        if (ps.value(idx).shape != t.shape) {
            if (force_partial) continue;
            throw DataError("checkpoint: shape mismatch for " + name + ": store has " +
                            shape_str(ps.value(idx).shape) + ", file has " + shape_str(t.shape));
        }
        ps.value(idx) = t;
        ++loaded;
    }
    if (!force_partial && loaded != ps.size()) {
        std::unordered_set<std::string> have;
        for (const auto& [name, t] : ck.tensors) have.insert(name);
        for (std::size_t i = 0; i < ps.size(); ++i)
            if (!have.count(ps.name(static_cast<int>(i))))
                throw DataError("checkpoint: missing parameter: " + ps.name(static_cast<int>(i)));
    }
    return loaded;
}

}  // namespace msmg
