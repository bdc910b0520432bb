#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ctrldiff {

// All recoverable API misuse surfaces as std::invalid_argument / std::runtime_error
// with a message naming the offending value. Internal invariants use plain asserts.
[[noreturn]] inline void fail(const std::string& msg) {
    throw std::runtime_error(msg);
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) {
        throw std::invalid_argument(msg);
    }
}

}  // namespace ctrldiff
