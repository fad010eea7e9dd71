#pragma once

#include <stdexcept>
#include <string>

namespace cdt {

// Root of every error the library throws. `kind()` is a stable short tag
// that the command-line harness maps onto exit codes.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define CDT_DEFINE_ERROR(Name, tag)                                   \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(tag, what) {}      \
  };

CDT_DEFINE_ERROR(DimensionError, "dimension")
CDT_DEFINE_ERROR(PreconditionError, "precondition")
CDT_DEFINE_ERROR(UnknownTapError, "unknown-tap")
CDT_DEFINE_ERROR(LengthError, "length")
CDT_DEFINE_ERROR(IndexError, "index")
CDT_DEFINE_ERROR(GenerationError, "generation")
CDT_DEFINE_ERROR(UnanswerableError, "unanswerable")
CDT_DEFINE_ERROR(UndefinedClassError, "undefined-class")
CDT_DEFINE_ERROR(MissingEvidenceError, "missing-evidence")
CDT_DEFINE_ERROR(AnalysisUnavailableError, "analysis-unavailable")
CDT_DEFINE_ERROR(ConfigError, "config")
CDT_DEFINE_ERROR(IntegrityError, "integrity")
CDT_DEFINE_ERROR(EmptyInputError, "empty-input")
CDT_DEFINE_ERROR(NonFiniteError, "non-finite")

#undef CDT_DEFINE_ERROR

}  // namespace cdt
