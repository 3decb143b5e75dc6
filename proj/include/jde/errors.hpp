#pragma once

#include <stdexcept>
#include <string>

namespace jde {

enum class ErrorKind {
    InvalidArgument,
    InvalidSampling,
    InvalidParadigm,
    DriftBasisTooRich,
    Nonstationary,
    DimensionMismatch,
    NumericalFailure,
    GraphTooLarge,
    Io,
    Format,
    Shape,
    Version,
    Invariant,
    Config,
    ParcelMismatch,
    UndefinedAuc,
    NoPeak,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidArgument: return "invalid-argument";
        case ErrorKind::InvalidSampling: return "invalid-sampling";
        case ErrorKind::InvalidParadigm: return "invalid-paradigm";
        case ErrorKind::DriftBasisTooRich: return "drift-basis-too-rich";
        case ErrorKind::Nonstationary: return "nonstationary";
        case ErrorKind::DimensionMismatch: return "dimension-mismatch";
        case ErrorKind::NumericalFailure: return "numerical-failure";
        case ErrorKind::GraphTooLarge: return "graph-too-large";
        case ErrorKind::Io: return "io-error";
        case ErrorKind::Format: return "format-error";
        case ErrorKind::Shape: return "shape-error";
        case ErrorKind::Version: return "version-error";
        case ErrorKind::Invariant: return "invariant-violation";
        case ErrorKind::Config: return "config-error";
        case ErrorKind::ParcelMismatch: return "parcel-mismatch";
        case ErrorKind::UndefinedAuc: return "auc-undefined";
        case ErrorKind::NoPeak: return "no-peak";
    }
    return "error";
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
    if (!cond) fail(kind, what);
}

}  // namespace jde
