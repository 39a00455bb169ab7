#pragma once

// The library is compiled once per precision. Each build lives in its own
// inline namespace so both variants can be linked into one binary.
#if defined(DUMAMBA_SCALAR_F64)
#define DUMAMBA_PREC_NS f64
#else
#define DUMAMBA_PREC_NS f32
#endif

#define DUMAMBA_BEGIN_NAMESPACE \
  namespace dumamba {           \
  inline namespace DUMAMBA_PREC_NS {
#define DUMAMBA_END_NAMESPACE \
  }                           \
  }

DUMAMBA_BEGIN_NAMESPACE

#if defined(DUMAMBA_SCALAR_F64)
using Scalar = double;
inline constexpr bool kDoublePrecision = true;
#else
using Scalar = float;
inline constexpr bool kDoublePrecision = false;
#endif

inline constexpr const char* precision_name() {
  return kDoublePrecision ? "f64" : "f32";
}

DUMAMBA_END_NAMESPACE
