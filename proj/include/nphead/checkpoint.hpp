#pragma once

// Adapter checkpoints:
//   "NPHD1" | u32 header length | JSON header | u32 array count |
//   per array: name (u32 len + bytes), u32 ndim, u64 dims..., f32 LE values |
//   u64 FNV-1a of every preceding byte

#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "bytes.hpp"
#include "error.hpp"
#include "hash.hpp"
#include "lora.hpp"
#include "model.hpp"

namespace nphead::ckpt {

inline constexpr std::string_view kMagic = "NPHD1";

struct NamedArray {
    std::string name;
    num::Shape shape;
    std::vector<float> values;
};

struct Checkpoint {
    nlohmann::json header;
    std::vector<NamedArray> arrays;
};

inline std::vector<std::uint8_t> encode(const Checkpoint& c) {
    ByteWriter w;
    w.raw(kMagic);
    w.str(c.header.dump());
    w.u32(static_cast<std::uint32_t>(c.arrays.size()));
    for (const auto& a : c.arrays) {
        if (num::numel(a.shape) != a.values.size()) throw ContractError("checkpoint array '" + a.name + "' shape mismatch");
        w.str(a.name);
        w.u32(static_cast<std::uint32_t>(a.shape.size()));
        for (auto d : a.shape) w.u64(d);
        for (float v : a.values) w.f32(v);
    }
    Fnv1a h;
    h.update(w.bytes());
    w.u64(h.digest());
    return w.take();
}

inline Checkpoint decode(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kMagic.size() + 8) throw IntegrityError("checkpoint too short");
    Fnv1a h;
    h.update(bytes.first(bytes.size() - 8));
    ByteReader tail(bytes.last(8));
    if (tail.u64() != h.digest()) throw IntegrityError("checkpoint checksum mismatch");

    ByteReader r(bytes.first(bytes.size() - 8));
    const auto magic = r.raw(kMagic.size());
    if (std::string_view(reinterpret_cast<const char*>(magic.data()), magic.size()) != kMagic) {
        throw IntegrityError("not an NPHD1 checkpoint");
    }
    Checkpoint c;
    try {
        c.header = nlohmann::json::parse(r.str());
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("checkpoint header: ") + e.what());
    }
    const auto n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
        NamedArray a;
        a.name = r.str();
        const auto nd = r.u32();
        if (nd > 8) throw IntegrityError("checkpoint array rank too large");
        for (std::uint32_t k = 0; k < nd; ++k) a.shape.push_back(static_cast<std::size_t>(r.u64()));
        const auto count = num::numel(a.shape);
        if (count * 4 > r.remaining()) throw IntegrityError("truncated binary data");
        a.values.resize(count);
        for (auto& v : a.values) v = r.f32();
        c.arrays.push_back(std::move(a));
    }
    if (!r.done()) throw IntegrityError("trailing bytes in checkpoint");
    return c;
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Adapter-only snapshot of `m`.
template <class T>
Checkpoint capture(model::Seq2SeqModel<T>& m, const std::string& tokenizer_hash, std::size_t epoch,
                   const nlohmann::json& extra = nlohmann::json::object()) {
    if (!m.lora_config()) throw ContractError("checkpoint: model has no adapters");
    Checkpoint c;
    c.header = {{"format", "nphead-adapters"},
                {"version", 1},
                {"model", model::to_json(m.config())},
                {"lora", lora::to_json(*m.lora_config())},
                {"tokenizer_hash", tokenizer_hash},
                {"base_hash", m.base_hash()},
                {"shape_signature", m.shape_signature()},
                {"epoch", epoch},
                {"extra", extra}};
    for (const auto& [name, t] : m.trainable_parameters()) {
        NamedArray a{name, t->shape, {}};
        a.values.reserve(t->size());
        for (T v : t->data) a.values.push_back(static_cast<float>(v));
        c.arrays.push_back(std::move(a));
    }
    return c;
}

template <class T>
void save(const std::filesystem::path& path, model::Seq2SeqModel<T>& m, const std::string& tokenizer_hash,
          std::size_t epoch, const nlohmann::json& extra = nlohmann::json::object()) {
    write_file(path, encode(capture(m, tokenizer_hash, epoch, extra)));
}

inline Checkpoint load(const std::filesystem::path& path) { return decode(read_file(path)); }

// Rebuilds the base from the stored config, verifies it hashes to the stored
// value, then installs the adapter arrays.
template <class T>
model::Seq2SeqModel<T> restore(const Checkpoint& c, const std::string& expected_tokenizer_hash = {}) {
    if (c.header.value("format", "") != "nphead-adapters" || c.header.value("version", 0) != 1) {
        throw IntegrityError("unsupported checkpoint format");
    }
    if (!expected_tokenizer_hash.empty() && c.header.value("tokenizer_hash", "") != expected_tokenizer_hash) {
        throw IntegrityError("checkpoint was trained with a different tokenizer");
    }
    model::Seq2SeqModel<T> m(model::model_config_from_json(c.header.at("model")));
    if (m.base_hash() != c.header.value("base_hash", "")) throw IntegrityError("base weights hash mismatch");
    if (m.shape_signature() != c.header.value("shape_signature", "")) throw IntegrityError("shape signature mismatch");
    m.attach_adapters(lora::lora_config_from_json(c.header.at("lora")), 0);
    auto params = m.trainable_parameters();
    std::map<std::string, const NamedArray*> by_name;
    for (const auto& a : c.arrays) by_name[a.name] = &a;
    if (by_name.size() != params.size()) throw IntegrityError("checkpoint adapter set does not match model");
    for (auto& [name, t] : params) {
        const auto it = by_name.find(name);
        if (it == by_name.end()) throw IntegrityError("checkpoint missing '" + name + "'");
        if (it->second->shape != t->shape) throw IntegrityError("checkpoint shape mismatch for '" + name + "'");
        for (std::size_t i = 0; i < t->size(); ++i) t->data[i] = static_cast<T>(it->second->values[i]);
    }
    return m;
}

}  // namespace nphead::ckpt
