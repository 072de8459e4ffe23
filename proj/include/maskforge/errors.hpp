#pragma once

#include <stdexcept>
#include <string>

namespace maskforge {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define MASKFORGE_ERROR(Name)            \
  class Name : public Error {            \
   public:                               \
    using Error::Error;                  \
  }

MASKFORGE_ERROR(ParseError);
MASKFORGE_ERROR(FormatError);
MASKFORGE_ERROR(DegeneracyError);
MASKFORGE_ERROR(ShapeError);
MASKFORGE_ERROR(LoadError);
MASKFORGE_ERROR(ValidationError);
MASKFORGE_ERROR(PlacementError);
MASKFORGE_ERROR(EmptyRegionError);
MASKFORGE_ERROR(IoError);
MASKFORGE_ERROR(LookupError);
MASKFORGE_ERROR(InfeasibleError);
MASKFORGE_ERROR(UndefinedRateError);
MASKFORGE_ERROR(PlanError);
MASKFORGE_ERROR(IntegrityError);
MASKFORGE_ERROR(ConflictError);

#undef MASKFORGE_ERROR

}  // namespace maskforge
