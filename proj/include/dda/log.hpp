#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <string_view>

namespace dda::log {

enum class Level { debug, info, warn, error };

inline std::string_view name(Level l) {
  switch (l) {
    case Level::debug: return "debug";
    case Level::info: return "info";
    case Level::warn: return "warn";
    case Level::error: return "error";
  }
  return "?";
}

using Sink = std::function<void(Level, std::string_view)>;

namespace detail {
struct State {
  std::mutex mu;
  Level threshold = Level::info;
  Sink sink;
};
inline State& state() {
  static State s;
  return s;
}
}  // namespace detail

inline void set_level(Level l) {
  std::lock_guard lock(detail::state().mu);
  detail::state().threshold = l;
}

/// Replaces the sink (stderr when empty). Returns the previous one.
inline Sink set_sink(Sink s) {
  std::lock_guard lock(detail::state().mu);
  std::swap(detail::state().sink, s);
  return s;
}

inline void write(Level l, std::string_view msg) {
  auto& st = detail::state();
  std::lock_guard lock(st.mu);
  if (l < st.threshold) return;
  if (st.sink) {
    st.sink(l, msg);
  } else {
    std::cerr << "[" << name(l) << "] " << msg << '\n';
  }
}

inline void debug(std::string_view m) { write(Level::debug, m); }
inline void info(std::string_view m) { write(Level::info, m); }
inline void warn(std::string_view m) { write(Level::warn, m); }
inline void error(std::string_view m) { write(Level::error, m); }

}  // namespace dda::log
