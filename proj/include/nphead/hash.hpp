#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace nphead {

// 64-bit FNV-1a. Used for content fingerprints (tokenizer, base weights),
// never for anything security related.
class Fnv1a {
public:
    void update(std::span<const std::uint8_t> bytes) {
        for (auto b : bytes) {
            state_ ^= b;
            state_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view s) {
        update(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
    }
    std::uint64_t digest() const { return state_; }
    std::string hex() const { return to_hex(state_); }

    static std::string to_hex(std::uint64_t v) {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
        return buf;
    }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string fnv1a_hex(std::string_view s) {
    Fnv1a h;
    h.update(s);
    return h.hex();
}

}  // namespace nphead
