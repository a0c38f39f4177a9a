#pragma once

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string_view>

namespace mhstm::log {

// Verbosity from MHSTM_LOG: 0 quiet, 1 warnings (default), 2 info, 3 debug.
inline int level() {
    static const int lvl = [] {
        const char* env = std::getenv("MHSTM_LOG");
        return env ? std::atoi(env) : 1;
    }();
    return lvl;
}

template <class... Args>
void write(int lvl, std::string_view tag, const Args&... args) {
    if (level() < lvl) return;
    std::ostringstream os;
    os << '[' << tag << "] ";
    (os << ... << args);
    os << '\n';
    std::cerr << os.str();
}

template <class... Args> void warn(const Args&... a) { write(1, "warn", a...); }
template <class... Args> void info(const Args&... a) { write(2, "info", a...); }
template <class... Args> void debug(const Args&... a) { write(3, "debug", a...); }

}  // namespace mhstm::log
