#ifndef CHRONIDENT_CORE_HPP
#define CHRONIDENT_CORE_HPP

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace chronident {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Mat2 = Eigen::Matrix<Scalar, 2, 2>;
template <typename Scalar>
using Vec2 = Eigen::Matrix<Scalar, 2, 1>;

using Index = Eigen::Index;

enum class ErrorKind {
  invalid_argument,
  invalid_covariance,
  unidentifiable,
  no_residue,
  drift_unidentifiable,
  channel_unusable,
  diverged,
  io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::invalid_covariance: return "invalid-covariance";
    case ErrorKind::unidentifiable: return "unidentifiable";
    case ErrorKind::no_residue: return "no-residue";
    case ErrorKind::drift_unidentifiable: return "drift-unidentifiable";
    case ErrorKind::channel_unusable: return "channel-unusable";
    case ErrorKind::diverged: return "diverged";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

/// Every failure raised by the library carries one of the kinds above so
/// callers (the CLI in particular) can map it to a stable exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind), detail_(what) {}

  ErrorKind kind() const noexcept { return kind_; }
  /// Message without the kind prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorKind kind_;
  std::string detail_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, const std::string& what) {
  if (!cond) fail(ErrorKind::invalid_argument, what);
}

}  // namespace chronident

#endif  // CHRONIDENT_CORE_HPP
