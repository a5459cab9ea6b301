// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

// Scalar type selection. The core builds once in single precision (the
// shipping configuration) and once in double precision for gradient
// verification. Each build lives in its own inline namespace so both can be
// linked into one binary.

#pragma once

#ifdef CMIVLD_DOUBLE_PRECISION
#define CMIVLD_NS_BEGIN \
  namespace cmivld {    \
  inline namespace f64 {
#define CMIVLD_NS_END \
  }                   \
  }
#else
#define CMIVLD_NS_BEGIN \
  namespace cmivld {    \
  inline namespace f32 {
#define CMIVLD_NS_END \
  }                   \
  }
#endif

CMIVLD_NS_BEGIN
#ifdef CMIVLD_DOUBLE_PRECISION
using Scalar = double;
#else
using Scalar = float;
#endif
CMIVLD_NS_END
