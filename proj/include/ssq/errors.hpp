#pragma once

#include <stdexcept>
#include <string>

namespace ssq {

// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Linear algebra / state-space errors.
struct SingularMatrix : Error { using Error::Error; };
struct NonPositiveDelta : Error { using Error::Error; };
struct DimensionMismatch : Error { using Error::Error; };
struct EmptyInput : Error { using Error::Error; };
struct LengthMismatch : Error { using Error::Error; };
struct OddStateSize : Error { using Error::Error; };

// Decoder errors.
struct OddModelDim : Error { using Error::Error; };
struct AllMaskedRow : Error { using Error::Error; };
struct VariantMismatch : Error { using Error::Error; };
struct StateCorrupt : Error { using Error::Error; };

// Autodiff errors.
struct ShapeMismatch : Error { using Error::Error; };
struct UnknownOp : Error { using Error::Error; };
struct NotScalar : Error { using Error::Error; };
struct DetachedLoss : Error { using Error::Error; };
struct NonFiniteGradient : Error { using Error::Error; };
struct NonFiniteLoss : Error { using Error::Error; };

// Harness errors.
struct ManifestMismatch : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };

}  // namespace ssq
