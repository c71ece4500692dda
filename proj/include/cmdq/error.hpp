#ifndef CMDQ_ERROR_HPP
#define CMDQ_ERROR_HPP

#include <stdexcept>
#include <string>

namespace cmdq {

/// Failure category. The numeric values double as CLI exit codes.
enum class ErrorKind : int {
  usage = 2,
  format = 3,
  invariant = 4,
  numeric = 5,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

/// Malformed, truncated or unreadable files.
struct FormatError : Error {
  explicit FormatError(const std::string& what) : Error(ErrorKind::format, what) {}
};

/// Shape mismatches, out-of-range values and invalid configurations.
struct InvariantError : Error {
  explicit InvariantError(const std::string& what)
      : Error(ErrorKind::invariant, what) {}
};

/// Factorization failures and non-finite results.
struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

struct UsageError : Error {
  explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvariantError(what);
}

}  // namespace detail
}  // namespace cmdq

#endif  // CMDQ_ERROR_HPP
