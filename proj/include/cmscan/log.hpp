#pragma once

#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace cmscan::log {

enum class Level { Error = 0, Warn = 1, Info = 2, Debug = 3 };

inline Level& threshold() {
    static Level lvl = [] {
        const char* env = std::getenv("CMSCAN_LOG");
        if (!env) return Level::Warn;
        if (std::strcmp(env, "error") == 0) return Level::Error;
        if (std::strcmp(env, "warn") == 0) return Level::Warn;
        if (std::strcmp(env, "info") == 0) return Level::Info;
        if (std::strcmp(env, "debug") == 0) return Level::Debug;
        return Level::Warn;
    }();
    return lvl;
}

inline void emit(Level lvl, const char* tag, const char* fmt, va_list ap) {
    if (lvl > threshold()) return;
    std::fprintf(stderr, "[%s] ", tag);
    std::vfprintf(stderr, fmt, ap);
    std::fputc('\n', stderr);
}

inline void error(const char* fmt, ...) {
    va_list ap;
    va_start(ap, fmt);
    emit(Level::Error, "error", fmt, ap);
    va_end(ap);
}

inline void warn(const char* fmt, ...) {
    va_list ap;
    va_start(ap, fmt);
    emit(Level::Warn, "warn", fmt, ap);
    va_end(ap);
}

inline void info(const char* fmt, ...) {
    va_list ap;
    va_start(ap, fmt);
    emit(Level::Info, "info", fmt, ap);
    va_end(ap);
}

inline void debug(const char* fmt, ...) {
    va_list ap;
    va_start(ap, fmt);
    emit(Level::Debug, "debug", fmt, ap);
    va_end(ap);
}

}  // namespace cmscan::log
