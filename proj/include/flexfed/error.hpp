// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace flexfed {

/// Root of every error raised by the library. Subclasses name the failure
/// class so callers (and tests) can dispatch on it.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define FLEXFED_DECLARE_ERROR(Name)                                   \
    class Name : public Error {                                       \
    public:                                                           \
        explicit Name(const std::string& what) : Error(what) {}       \
    }

FLEXFED_DECLARE_ERROR(DimensionError);
FLEXFED_DECLARE_ERROR(NumericError);
FLEXFED_DECLARE_ERROR(ConfigError);
FLEXFED_DECLARE_ERROR(DegenerateBatchError);
FLEXFED_DECLARE_ERROR(TapeError);
FLEXFED_DECLARE_ERROR(SequenceLengthError);
FLEXFED_DECLARE_ERROR(InputError);
FLEXFED_DECLARE_ERROR(LifecycleError);
FLEXFED_DECLARE_ERROR(DomainError);
FLEXFED_DECLARE_ERROR(CalibrationError);
FLEXFED_DECLARE_ERROR(ProtocolError);
FLEXFED_DECLARE_ERROR(InvariantViolation);
FLEXFED_DECLARE_ERROR(DecodeError);
FLEXFED_DECLARE_ERROR(IoError);
FLEXFED_DECLARE_ERROR(EmptyCorpusError);
FLEXFED_DECLARE_ERROR(StatsError);
FLEXFED_DECLARE_ERROR(CorruptionError);
FLEXFED_DECLARE_ERROR(VersionError);

#undef FLEXFED_DECLARE_ERROR

}  // namespace flexfed
