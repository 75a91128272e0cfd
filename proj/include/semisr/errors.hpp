#ifndef SEMISR_ERRORS_HPP
#define SEMISR_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace semisr {

/// Base class of every error raised by the library. `kind()` is a stable
/// machine-readable tag used in the CLI's structured error records.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define SEMISR_DEFINE_ERROR(Name, tag) \
  class Name : public Error {          \
   public:                             \
    explicit Name(const std::string& what) : Error(tag, what) {} \
  };

SEMISR_DEFINE_ERROR(IoError, "io")
SEMISR_DEFINE_ERROR(FormatError, "format")
SEMISR_DEFINE_ERROR(ShapeError, "shape")
SEMISR_DEFINE_ERROR(ChannelError, "channel")
SEMISR_DEFINE_ERROR(CapacityError, "capacity")
SEMISR_DEFINE_ERROR(ConfigError, "config")
SEMISR_DEFINE_ERROR(DomainError, "domain")
SEMISR_DEFINE_ERROR(InsufficientSamples, "insufficient_samples")
SEMISR_DEFINE_ERROR(EmptySetError, "empty_set")
SEMISR_DEFINE_ERROR(TrainingDiverged, "nan_loss")
SEMISR_DEFINE_ERROR(CheckpointError, "checkpoint")
SEMISR_DEFINE_ERROR(ValidationError, "validation")
SEMISR_DEFINE_ERROR(ConflictError, "conflict")
SEMISR_DEFINE_ERROR(NotFoundError, "not_found")

#undef SEMISR_DEFINE_ERROR

}  // namespace semisr

#endif  // SEMISR_ERRORS_HPP
