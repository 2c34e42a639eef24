#include "conslide/logging.hpp"

#include <atomic>
#include <cstdarg>
#include <cstdio>

namespace conslide::logging {
namespace {

std::atomic<Level> g_level{Level::kWarn};

void emit(Level lvl, const char* tag, const char* fmt, va_list args) {
  if (lvl < g_level.load(std::memory_order_relaxed)) return;
  std::fprintf(stderr, "[%s] ", tag);
  std::vfprintf(stderr, fmt, args);
  std::fputc('\n', stderr);
}

}  // namespace

void set_level(Level level) { g_level.store(level, std::memory_order_relaxed); }
Level level() { return g_level.load(std::memory_order_relaxed); }

void info(const char* fmt, ...) {
  va_list args;
  va_start(args, fmt);
  emit(Level::kInfo, "info", fmt, args);
  va_end(args);
}

void warn(const char* fmt, ...) {
  va_list args;
  va_start(args, fmt);
  emit(Level::kWarn, "warn", fmt, args);
  va_end(args);
}

void error(const char* fmt, ...) {
  va_list args;
  va_start(args, fmt);
  emit(Level::kError, "error", fmt, args);
  va_end(args);
}

}  // namespace conslide::logging
