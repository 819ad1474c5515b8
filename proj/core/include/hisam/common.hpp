// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace hisam {

/// Base error type for all recoverable failures (parse errors, contract
/// violations, config errors). Callers catch this at CLI level.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ParseError : public Error {
public:
    explicit ParseError(const std::string& msg) : Error(msg) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// splitmix64: used to derive independent per-stage seeds from one root seed.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// FNV-1a over a string; stable across platforms, used for stage-seed
// derivation and config hashing.
inline uint64_t fnv1a(const std::string& s, uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Deterministic seed for a named pipeline stage given the root seed.
inline uint64_t stage_seed(uint64_t root, const std::string& stage) {
    return splitmix64(root ^ fnv1a(stage));
}

}  // namespace hisam
