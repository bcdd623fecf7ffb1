#pragma once

#include <charconv>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace instructtime {

using Real = double;

// Error taxonomy used across modules. The CLI maps `usage` to exit 2 and
// everything else to exit 1.
enum class ErrKind {
    config,        // bad configuration / spec violation
    data,          // malformed corpus data
    argument,      // bad argument to an operation
    overflow,      // sequence exceeds context window
    divergence,    // non-finite loss during training
    incompatible,  // checkpoint/vocabulary hash mismatch
    io,            // filesystem failure
    usage,         // CLI misuse
};

class Error : public std::runtime_error {
  public:
    Error(ErrKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrKind kind() const { return kind_; }

  private:
    ErrKind kind_;
};

inline const char* err_kind_name(ErrKind k) {
    switch (k) {
        case ErrKind::config: return "config";
        case ErrKind::data: return "data";
        case ErrKind::argument: return "argument";
        case ErrKind::overflow: return "overflow";
        case ErrKind::divergence: return "divergence";
        case ErrKind::incompatible: return "incompatible";
        case ErrKind::io: return "io";
        case ErrKind::usage: return "usage";
    }
    return "unknown";
}

// FNV-1a, the project-wide content hash (spec hashes, checkpoint hashes,
// derived seeds).
inline uint64_t fnv1a(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a(s.data(), s.size(), h);
}

inline uint64_t hash_combine(uint64_t h, uint64_t v) {
    return fnv1a(&v, sizeof(v), h);
}

// Derives a module-local seed from the single CLI seed.
inline uint64_t derive_seed(uint64_t seed, std::string_view module) {
    return hash_combine(fnv1a(module), seed);
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

// Shortest round-trip decimal rendering; canonical format for all CSV /
// corpus reals so write(load(x)) is byte-identical.
inline std::string format_real(Real v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline Real parse_real(std::string_view s, bool& ok) {
    Real v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    ok = (res.ec == std::errc{} && res.ptr == s.data() + s.size());
    return v;
}

inline long long parse_int(std::string_view s, bool& ok) {
    long long v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    ok = (res.ec == std::errc{} && res.ptr == s.data() + s.size());
    return v;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
        size_t pos = s.find(sep, start);
        if (pos == std::string_view::npos) {
            out.emplace_back(s.substr(start));
            break;
        }
        out.emplace_back(s.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

// Word-level tokenization shared by the vocabulary and the label parser:
// whitespace separates tokens, and each of . , : ; ! ? is its own token.
inline std::vector<std::string> tokenize_words(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };
    for (char c : text) {
        if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
            flush();
        } else if (c == '.' || c == ',' || c == ':' || c == ';' || c == '!' || c == '?') {
            flush();
            out.emplace_back(1, c);
        } else {
            cur.push_back(c);
        }
    }
    flush();
    return out;
}

inline std::string trim(std::string_view s) {
    size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r' || s[b] == '\n')) ++b;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r' || s[e - 1] == '\n')) --e;
    return std::string(s.substr(b, e - b));
}

}  // namespace instructtime
