#pragma once

#include <stdexcept>
#include <string>

namespace tlmm {

// Exit codes used by the command-line tool.
enum class ExitCode : int { ok = 0, config = 2, data = 3, numerical = 4, oracle = 5 };

class Error : public std::runtime_error {
public:
  Error(const std::string& what, ExitCode code) : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

private:
  ExitCode code_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error("shape error: " + w, ExitCode::data) {}
};
struct FactorizationError : Error {
  explicit FactorizationError(const std::string& w)
      : Error("factorization error: " + w, ExitCode::numerical) {}
};
struct DomainError : Error {
  explicit DomainError(const std::string& w) : Error("domain error: " + w, ExitCode::data) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error("config error: " + w, ExitCode::config) {}
};
struct DataError : Error {
  explicit DataError(const std::string& w) : Error("data error: " + w, ExitCode::data) {}
};
struct NumericalError : Error {
  explicit NumericalError(const std::string& w)
      : Error("numerical error: " + w, ExitCode::numerical) {}
};
struct ConstraintError : Error {
  explicit ConstraintError(const std::string& w)
      : Error("constraint error: " + w, ExitCode::numerical) {}
};
struct RankError : Error {
  explicit RankError(const std::string& w) : Error("rank error: " + w, ExitCode::config) {}
};
struct CapabilityError : Error {
  explicit CapabilityError(const std::string& w)
      : Error("capability error: " + w, ExitCode::config) {}
};

}  // namespace tlmm
