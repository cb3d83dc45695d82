#pragma once

#include <functional>
#include <iostream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace meranet {

enum class Errc {
  shape_mismatch,
  invalid_argument,
  out_of_range,
  non_finite,
  unregistered_op,
  non_scalar_root,
  bad_magic,
  truncated,
  version_mismatch,
  missing_key,
  manifest_mismatch,
  io,
  parse,
};

constexpr std::string_view errc_name(Errc c) {
  switch (c) {
    case Errc::shape_mismatch: return "shape_mismatch";
    case Errc::invalid_argument: return "invalid_argument";
    case Errc::out_of_range: return "out_of_range";
    case Errc::non_finite: return "non_finite";
    case Errc::unregistered_op: return "unregistered_op";
    case Errc::non_scalar_root: return "non_scalar_root";
    case Errc::bad_magic: return "bad_magic";
    case Errc::truncated: return "truncated";
    case Errc::version_mismatch: return "version_mismatch";
    case Errc::missing_key: return "missing_key";
    case Errc::manifest_mismatch: return "manifest_mismatch";
    case Errc::io: return "io";
    case Errc::parse: return "parse";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-checkable code.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) throw Error(code, what);
}

using DiagnosticSink = std::function<void(std::string_view)>;

inline DiagnosticSink& diagnostic_sink() {
  static DiagnosticSink sink = [](std::string_view msg) {
    std::cerr << "meranet: warning: " << msg << '\n';
  };
  return sink;
}

/// Advisory, non-fatal message (degenerate but supported configurations).
inline void diagnostic(std::string_view msg) {
  if (diagnostic_sink()) diagnostic_sink()(msg);
}

}  // namespace meranet
