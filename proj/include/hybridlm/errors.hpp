#pragma once

#include <stdexcept>
#include <string>

namespace hybridlm {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape, rank, or dtype mismatch between operands.
struct DimensionError : Error {
    using Error::Error;
};

// A softmax row with no unmasked entries.
struct DegenerateRowError : Error {
    using Error::Error;
};

// Input rows that are not probability distributions.
struct DistributionError : Error {
    using Error::Error;
};

// Out-of-range index (token target, layer index, ...).
struct IndexError : Error {
    using Error::Error;
};

// Operation invoked in an invalid object state (graph reuse, double
// adapter attach, trainable_parameters before attach, ...).
struct StateError : Error {
    using Error::Error;
};

// Invalid configuration value or file.
struct ConfigError : Error {
    using Error::Error;
};

// Teacher/student models that cannot be paired.
struct PairingError : Error {
    using Error::Error;
};

// Attention trace requested on a layer that cannot produce one.
struct TraceError : Error {
    using Error::Error;
};

// Token stream ran dry before the training budget was met.
struct DataUnderflowError : Error {
    using Error::Error;
};

} // namespace hybridlm
