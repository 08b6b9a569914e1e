#pragma once

#include <stdexcept>
#include <string>

namespace attrib {

// Process exit codes used by the CLI.
enum class ExitCode : int { kOk = 0, kConfig = 2, kData = 3, kNumeric = 4 };

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, ExitCode code)
      : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

#define ATTRIB_DEFINE_ERROR(Name, Code)                                 \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& what) : Error(what, Code) {}       \
  };

ATTRIB_DEFINE_ERROR(ConfigError, ExitCode::kConfig)
ATTRIB_DEFINE_ERROR(FormatError, ExitCode::kData)
ATTRIB_DEFINE_ERROR(ConsistencyError, ExitCode::kData)
ATTRIB_DEFINE_ERROR(DataError, ExitCode::kData)
ATTRIB_DEFINE_ERROR(EmptyCaseError, ExitCode::kData)
ATTRIB_DEFINE_ERROR(ShapeError, ExitCode::kData)
ATTRIB_DEFINE_ERROR(MetricError, ExitCode::kData)
ATTRIB_DEFINE_ERROR(BatchTooSmall, ExitCode::kData)
ATTRIB_DEFINE_ERROR(NumericError, ExitCode::kNumeric)
ATTRIB_DEFINE_ERROR(DegenerateDistribution, ExitCode::kNumeric)

#undef ATTRIB_DEFINE_ERROR

}  // namespace attrib
