#pragma once

// Self-describing checkpoint container: JSON metadata header plus named
// arrays with explicit dtype/shape, little-endian payloads, and a trailing
// CRC. Loads are atomic: nothing is applied until the whole file verifies.

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "layton/adam.hpp"
#include "layton/nn.hpp"
#include "layton/png.hpp"  // crc32

namespace layton {

inline constexpr char kCkptMagic[8] = {'L', 'A', 'Y', 'C', 'K', 'P', '0', '1'};
inline constexpr int kCkptFormatVersion = 1;

struct CheckpointMeta {
    int format_version = kCkptFormatVersion;
    std::string stage;
    int64_t step = 0;
    std::string config_hash;
    std::string parent_hash;  // crc hex of the checkpoint this one builds on
    nlohmann::json extra = nlohmann::json::object();
};

namespace ckpt_detail {

inline void put_u32(std::vector<uint8_t>& v, uint32_t x) {
    v.push_back(uint8_t(x));
    v.push_back(uint8_t(x >> 8));
    v.push_back(uint8_t(x >> 16));
    v.push_back(uint8_t(x >> 24));
}

inline void put_u64(std::vector<uint8_t>& v, uint64_t x) {
    for (int i = 0; i < 8; ++i) v.push_back(uint8_t(x >> (8 * i)));
}

struct Reader {
    const std::vector<uint8_t>& buf;
    size_t pos = 0;
    void need(size_t n) const {
        if (pos + n > buf.size()) throw IntegrityError("checkpoint: truncated file");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = uint32_t(buf[pos]) | (uint32_t(buf[pos + 1]) << 8) | (uint32_t(buf[pos + 2]) << 16) |
                     (uint32_t(buf[pos + 3]) << 24);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(buf[pos + size_t(i)]) << (8 * i);
        pos += 8;
        return v;
    }
    std::string str(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
        pos += n;
        return s;
    }
};

}  // namespace ckpt_detail

// Named float arrays gathered from one or more stores plus free arrays.
struct CheckpointPayload {
    std::vector<std::pair<std::string, const Tensor*>> arrays;

    void add_store(const ParamStoreT<float>& ps) {
        for (const auto& p : ps) arrays.push_back({p.name, &p.value});
    }
    void add(const std::string& name, const Tensor& t) { arrays.push_back({name, &t}); }
};

inline void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                            const CheckpointPayload& payload) {
    std::vector<uint8_t> body;
    nlohmann::json j = {{"format_version", meta.format_version},
                        {"stage", meta.stage},
                        {"step", meta.step},
                        {"config_hash", meta.config_hash},
                        {"parent_hash", meta.parent_hash},
                        {"extra", meta.extra}};
    std::string meta_str = j.dump();
    ckpt_detail::put_u32(body, uint32_t(meta_str.size()));
    body.insert(body.end(), meta_str.begin(), meta_str.end());
    ckpt_detail::put_u32(body, uint32_t(payload.arrays.size()));
    for (const auto& [name, tensor] : payload.arrays) {
        LAYTON_CHECK(name.size() < 65536, "checkpoint: parameter name too long");
        body.push_back(uint8_t(name.size() & 0xff));
        body.push_back(uint8_t(name.size() >> 8));
        body.insert(body.end(), name.begin(), name.end());
        body.push_back(0);  // dtype f32
        body.push_back(uint8_t(tensor->rank()));
        for (int d : tensor->shape) ckpt_detail::put_u32(body, uint32_t(d));
        uint64_t bytes = uint64_t(tensor->size()) * 4;
        ckpt_detail::put_u64(body, bytes);
        size_t off = body.size();
        body.resize(off + bytes);
        std::memcpy(body.data() + off, tensor->ptr(), bytes);
    }
    uint32_t crc = png::crc32(body.data(), body.size());

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IntegrityError("checkpoint: cannot write " + path);
    f.write(kCkptMagic, 8);
    f.write(reinterpret_cast<const char*>(body.data()), long(body.size()));
    uint8_t crc_bytes[4] = {uint8_t(crc), uint8_t(crc >> 8), uint8_t(crc >> 16), uint8_t(crc >> 24)};
    f.write(reinterpret_cast<const char*>(crc_bytes), 4);
    if (!f) throw IntegrityError("checkpoint: short write to " + path);
}

struct LoadedCheckpoint {
    CheckpointMeta meta;
    std::map<std::string, Tensor> arrays;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IntegrityError("checkpoint: cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kCkptMagic, 8) != 0)
        throw IntegrityError("checkpoint: bad magic in " + path);

    std::vector<uint8_t> body(bytes.begin() + 8, bytes.end() - 4);
    const uint8_t* tail = bytes.data() + bytes.size() - 4;
    uint32_t stored = uint32_t(tail[0]) | (uint32_t(tail[1]) << 8) | (uint32_t(tail[2]) << 16) |
                      (uint32_t(tail[3]) << 24);
    if (png::crc32(body.data(), body.size()) != stored)
        throw IntegrityError("checkpoint: crc mismatch in " + path);

    ckpt_detail::Reader r{body};
    uint32_t meta_len = r.u32();
    nlohmann::json j = nlohmann::json::parse(r.str(meta_len));
    LoadedCheckpoint out;
    out.meta.format_version = j.at("format_version").get<int>();
    if (out.meta.format_version != kCkptFormatVersion)
        throw IntegrityError("checkpoint: format version " + std::to_string(out.meta.format_version) +
                             " not supported");
    out.meta.stage = j.at("stage").get<std::string>();
    out.meta.step = j.at("step").get<int64_t>();
    out.meta.config_hash = j.at("config_hash").get<std::string>();
    out.meta.parent_hash = j.at("parent_hash").get<std::string>();
    out.meta.extra = j.at("extra");

    uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
        r.need(2);
        uint32_t name_len = uint32_t(body[r.pos]) | (uint32_t(body[r.pos + 1]) << 8);
        r.pos += 2;
        std::string name = r.str(name_len);
        r.need(2);
        uint8_t dtype = body[r.pos];
        uint8_t rank = body[r.pos + 1];
        r.pos += 2;
        if (dtype != 0) throw IntegrityError("checkpoint: unsupported dtype for " + name);
        std::vector<int> shape;
        for (int d = 0; d < rank; ++d) shape.push_back(int(r.u32()));
        uint64_t nbytes = r.u64();
        if (nbytes != uint64_t(Tensor::count(shape)) * 4)
            throw IntegrityError("checkpoint: inconsistent array size for " + name);
        r.need(nbytes);
        Tensor t(shape);
        std::memcpy(t.ptr(), body.data() + r.pos, nbytes);
        r.pos += nbytes;
        out.arrays.emplace(std::move(name), std::move(t));
    }
    return out;
}

// hex crc of a checkpoint file; used to chain parent hashes
inline std::string checkpoint_hash(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IntegrityError("checkpoint: cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%08x", png::crc32(bytes.data(), bytes.size()));
    return buf;
}

// Apply loaded arrays onto a store. Every store parameter must be present
// with a matching shape; offenders are listed by name.
inline void apply_to_store(const LoadedCheckpoint& ck, ParamStoreT<float>& ps) {
    std::string missing, mismatched;
    for (int i = 0; i < ps.size(); ++i) {
        auto& p = ps.at(i);
        auto it = ck.arrays.find(p.name);
        if (it == ck.arrays.end()) {
            missing += (missing.empty() ? "" : ", ") + p.name;
            continue;
        }
        if (!(it->second.shape == p.value.shape))
            mismatched += (mismatched.empty() ? "" : ", ") + p.name;
    }
    if (!missing.empty() || !mismatched.empty())
        throw IntegrityError("checkpoint does not fit the model. missing: [" + missing +
                             "] shape-mismatched: [" + mismatched + "]");
    for (int i = 0; i < ps.size(); ++i) {
        auto& p = ps.at(i);
        p.value = ck.arrays.at(p.name);
    }
}

inline void expect_stage(const LoadedCheckpoint& ck, const std::string& stage) {
    if (ck.meta.stage != stage)
        throw StageOrderError("checkpoint stage is '" + ck.meta.stage + "', expected '" + stage + "'");
}

// Optimizer moments ride along under "<prefix>.m.<param>" / "<prefix>.v.<param>".
inline void add_adam_to_payload(CheckpointPayload& pay, const AdamT<float>& opt,
                                const ParamStoreT<float>& ps, const std::string& prefix) {
    if (opt.m.size() != size_t(ps.size())) return;  // optimizer never ran
    for (int i = 0; i < ps.size(); ++i) {
        if (!ps.at(i).trainable || opt.m[size_t(i)].empty()) continue;
        pay.add(prefix + ".m." + ps.at(i).name, opt.m[size_t(i)]);
        pay.add(prefix + ".v." + ps.at(i).name, opt.v[size_t(i)]);
    }
}

inline void load_adam(const LoadedCheckpoint& ck, AdamT<float>& opt, const ParamStoreT<float>& ps,
                      const std::string& prefix, int64_t step) {
    opt.reset(ps);
    opt.step_count = step;
    for (int i = 0; i < ps.size(); ++i) {
        if (!ps.at(i).trainable) continue;
        auto mi = ck.arrays.find(prefix + ".m." + ps.at(i).name);
        auto vi = ck.arrays.find(prefix + ".v." + ps.at(i).name);
        if (mi == ck.arrays.end() || vi == ck.arrays.end())
            throw IntegrityError("checkpoint has no optimizer state for " + ps.at(i).name);
        LAYTON_CHECK(mi->second.same_shape(ps.at(i).value), "adam state shape mismatch: " + ps.at(i).name);
        opt.m[size_t(i)] = mi->second;
        opt.v[size_t(i)] = vi->second;
    }
}

}  // namespace layton
