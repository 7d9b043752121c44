#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

// The library is compiled twice: once with 32-bit reals (the training and
// inference build) and once with 64-bit reals for gradient checking. Each
// build lives in its own inline namespace so both can be linked into the
// same binary.
#ifdef UNITMOD_F64
#define UNITMOD_PRECISION_NS f64
#else
#define UNITMOD_PRECISION_NS f32
#endif

#define UNITMOD_BEGIN_NAMESPACE \
    namespace unitmod {         \
    inline namespace UNITMOD_PRECISION_NS {
#define UNITMOD_END_NAMESPACE \
    }                         \
    }

UNITMOD_BEGIN_NAMESPACE

#ifdef UNITMOD_F64
using real = double;
#else
using real = float;
#endif

constexpr const char* precision_name() { return sizeof(real) == 8 ? "f64" : "f32"; }

/// Tensor shapes or operand layouts that do not line up.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Invalid hyper-parameters or configuration values.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// File system and serialization failures.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A non-finite value appeared somewhere it must not.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

UNITMOD_END_NAMESPACE
