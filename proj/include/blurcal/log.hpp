#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>

namespace blurcal {

using WarningSink = std::function<void(const std::string&)>;

namespace detail {

inline std::mutex& warning_mutex() {
  static std::mutex m;
  return m;
}

inline WarningSink& warning_sink() {
  static WarningSink sink = [](const std::string& msg) { std::clog << "warning: " << msg << '\n'; };
  return sink;
}

}  // namespace detail

/// Replaces the process-wide warning sink; pass an empty function to silence warnings.
inline void set_warning_sink(WarningSink sink) {
  const std::lock_guard lock(detail::warning_mutex());
  detail::warning_sink() = std::move(sink);
}

inline void warn(const std::string& msg) {
  const std::lock_guard lock(detail::warning_mutex());
  if (detail::warning_sink()) detail::warning_sink()(msg);
}

}  // namespace blurcal
