#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"

namespace causal_story {

/// Named parameter tensors, iterated in lexicographic name order, plus the
/// subset an optimizer is allowed to update.
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor t) {
        if (entries_.count(name)) throw ContractError("duplicate parameter name: " + name);
        t.set_requires_grad(true);
        return entries_.emplace(name, std::move(t)).first->second;
    }

    /// Inserts or replaces.
    void set(const std::string& name, Tensor t) {
        t.set_requires_grad(true);
        entries_.insert_or_assign(name, std::move(t));
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    const Tensor& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ContractError("missing parameter: " + name);
        return it->second;
    }
    Tensor& at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ContractError("missing parameter: " + name);
        return it->second;
    }

    const std::map<std::string, Tensor>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [k, v] : entries_) out.push_back(k);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [k, v] : entries_) n += v.size();
        return n;
    }

    std::size_t parameter_count(const std::set<std::string>& subset) const {
        std::size_t n = 0;
        for (const auto& name : subset) n += at(name).size();
        return n;
    }

    const std::set<std::string>& trainable() const { return trainable_; }

    void set_trainable(std::set<std::string> names) {
        for (const auto& n : names)
            if (!contains(n)) throw ContractError("trainable name not in store: " + n);
        trainable_ = std::move(names);
    }

    void zero_grads() {
        for (auto& [k, v] : entries_) v.zero_grad();
    }

    /// Independent copy of all values (no shared nodes, no grads).
    ParamStore clone() const {
        ParamStore out;
        for (const auto& [k, v] : entries_) out.entries_.emplace(k, Tensor(v.shape(), std::vector<double>(v.data().begin(), v.data().end()), true));
        out.trainable_ = trainable_;
        return out;
    }

private:
    std::map<std::string, Tensor> entries_;
    std::set<std::string> trainable_;
};

// ---------------------------------------------------------------------------
// Checkpoint format (all integers little-endian):
//   magic "CSPARAMS" | u32 version | u64 header length | header bytes (UTF-8)
//   | u64 entry count | per entry: u64 name length, name bytes, u64 rank,
//   rank x u64 dims, prod(dims) x f64 values.
// Entries are written in lexicographic name order, so identical stores
// serialize to identical bytes.

inline constexpr char kCheckpointMagic[8] = {'C', 'S', 'P', 'A', 'R', 'A', 'M', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
    os.write(b, 8);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
    os.write(b, 4);
}

inline std::uint64_t get_u64(std::istream& is, const char* what) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw DataError(std::string("checkpoint truncated reading ") + what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError(std::string("checkpoint truncated reading ") + what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::string get_bytes(std::istream& is, std::uint64_t n, const char* what) {
    if (n > (std::uint64_t{1} << 32)) throw DataError(std::string("checkpoint: implausible length for ") + what);
    std::string s(n, '\0');
    if (n && !is.read(s.data(), static_cast<std::streamsize>(n)))
        throw DataError(std::string("checkpoint truncated reading ") + what);
    return s;
}

}  // namespace detail

/// Writes `store` with a free-form header string (the model config).
inline void write_checkpoint(std::ostream& os, const ParamStore& store, const std::string& header) {
    os.write(kCheckpointMagic, 8);
    detail::put_u32(os, kCheckpointVersion);
    detail::put_u64(os, header.size());
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    detail::put_u64(os, store.size());
    for (const auto& [name, t] : store.entries()) {
        detail::put_u64(os, name.size());
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u64(os, t.rank());
        for (auto d : t.shape()) detail::put_u64(os, d);
        for (double v : t.data()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            detail::put_u64(os, bits);
        }
    }
    if (!os) throw DataError("checkpoint write failed");
}

struct Checkpoint {
    std::string header;
    ParamStore params;
};

inline Checkpoint read_checkpoint(std::istream& is) {
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw DataError("not a parameter checkpoint (bad magic)");
    const auto version = detail::get_u32(is, "version");
    if (version != kCheckpointVersion)
        throw DataError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    Checkpoint ck;
    ck.header = detail::get_bytes(is, detail::get_u64(is, "header length"), "header");
    const auto count = detail::get_u64(is, "entry count");
    for (std::uint64_t e = 0; e < count; ++e) {
        auto name = detail::get_bytes(is, detail::get_u64(is, "name length"), "name");
        const auto rank = detail::get_u64(is, "rank");
        if (rank == 0 || rank > 8) throw DataError("checkpoint entry " + name + ": bad rank " + std::to_string(rank));
        Shape shape(rank);
        std::uint64_t n = 1;
        for (auto& d : shape) {
            d = detail::get_u64(is, "dim");
            if (d == 0 || d > (1u << 24)) throw DataError("checkpoint entry " + name + ": bad dimension");
            n *= d;
        }
        std::vector<double> values(n);
        for (auto& v : values) {
            const auto bits = detail::get_u64(is, "values");
            std::memcpy(&v, &bits, sizeof v);
        }
        ck.params.add(name, Tensor(std::move(shape), std::move(values)));
    }
    return ck;
}

}  // namespace causal_story
