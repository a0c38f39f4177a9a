#pragma once

#include <stdexcept>
#include <string>

namespace mhstm {

// Bad settings or arguments. CLI exit code 1.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed, missing or empty input data. CLI exit code 2.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A bookkeeping invariant was violated: counts went negative, weights were
// retracted twice, a path broke a parent-child edge. Always a bug. Exit code 3.
class InvariantError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

namespace detail {
inline void require(bool cond, const char* what) {
    if (!cond) throw InvariantError(what);
}
inline void require(bool cond, const std::string& what) {
    if (!cond) throw InvariantError(what);
}
}  // namespace detail

}  // namespace mhstm
