#pragma once

#include <stdexcept>
#include <string>

namespace mfopt {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct OutOfBounds : Error { using Error::Error; };
struct DimMismatch : Error { using Error::Error; };
struct ConfigInvalid : Error { using Error::Error; };
struct ShapeMismatch : Error { using Error::Error; };
struct NonFiniteLoss : Error { using Error::Error; };
struct SingularKernel : Error { using Error::Error; };
struct NoLegalAction : Error { using Error::Error; };
struct NoLegalCandidates : Error { using Error::Error; };
struct MissingCheckpoint : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

}  // namespace mfopt
