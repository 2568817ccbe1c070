#pragma once

#include <stdexcept>
#include <string>

namespace aq {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shapes that cannot be combined by an op.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Invalid user-facing configuration: bit-widths out of range, unknown keys, bad modes.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf produced by an op or found in a gradient.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Malformed bytes on disk (IDX files, checkpoints, bundles).
class FormatError : public Error {
public:
    using Error::Error;
};

/// A caller broke an operation's precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

/// The autograd tape is not a DAG in recording order.
class StructuralError : public Error {
public:
    using Error::Error;
};

/// No batch-norm / clipping bank exists for the requested bit-width.
class MissingBankError : public Error {
public:
    explicit MissingBankError(int bits)
        : Error("no precision bank for " + std::to_string(bits) +
                "-bit execution (train with it in the bit-width set or run `calibrate` first)"),
          bits_(bits) {}
    int bits() const noexcept { return bits_; }

private:
    int bits_;
};

}  // namespace aq
