#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fsens {

enum class ErrorKind {
  schema,
  validation,
  capacity,
  split_infeasible,
  render,
  io,
  insufficient_data,
  infeasible_shift,
  transport,
  capability,
  shape,
  numeric,
  config,
  pairing,
  coverage,
  undefined,
};

std::string_view to_string(ErrorKind kind);

// Every failure surfaced by the library carries a kind so callers (the CLI,
// tests) can branch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace fsens
