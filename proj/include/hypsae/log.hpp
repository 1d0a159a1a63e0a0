#pragma once

#include <atomic>
#include <iostream>
#include <mutex>
#include <string_view>

namespace hypsae::log {

enum class Level { debug = 0, info = 1, warning = 2, silent = 3 };

inline std::atomic<Level>& threshold() {
    static std::atomic<Level> level{Level::info};
    return level;
}

inline void set_level(Level level) { threshold().store(level); }

inline void write(Level level, std::string_view tag, std::string_view msg) {
    if (level < threshold().load()) return;
    static std::mutex m;
    std::lock_guard lk(m);
    std::cerr << '[' << tag << "] " << msg << '\n';
}

inline void info(std::string_view msg) { write(Level::info, "info", msg); }
inline void warn(std::string_view msg) { write(Level::warning, "warn", msg); }

}  // namespace hypsae::log
