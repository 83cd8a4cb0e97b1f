#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace fesvibs::log {

enum class Level { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

// Level comes from FESVIBS_LOG (error|warn|info|debug), default warn.
inline Level threshold() {
  static Level lvl = [] {
    const char* env = std::getenv("FESVIBS_LOG");
    if (!env) return Level::kWarn;
    if (std::strcmp(env, "error") == 0) return Level::kError;
    if (std::strcmp(env, "info") == 0) return Level::kInfo;
    if (std::strcmp(env, "debug") == 0) return Level::kDebug;
    return Level::kWarn;
  }();
  return lvl;
}

inline void line(Level lvl, const std::string& msg) {
  if (lvl > threshold()) return;
  static const char* kTags[] = {"error", "warn", "info", "debug"};
  std::fprintf(stderr, "[fesvibs %s] %s\n",
               kTags[static_cast<int>(lvl)], msg.c_str());
}

inline void error(const std::string& msg) { line(Level::kError, msg); }
inline void warn(const std::string& msg) { line(Level::kWarn, msg); }
inline void info(const std::string& msg) { line(Level::kInfo, msg); }
inline void debug(const std::string& msg) { line(Level::kDebug, msg); }

}  // namespace fesvibs::log
