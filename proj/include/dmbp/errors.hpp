#pragma once

#include <stdexcept>
#include <string>

namespace dmbp {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Caller supplied an out-of-range or otherwise invalid argument.
class ArgumentError : public Error {
public:
    using Error::Error;
};

// NaN/Inf, non-positive variance, divergent optimization.
class NumericError : public Error {
public:
    using Error::Error;
};

// Weight or architecture file could not be turned into a network.
class LoadError : public Error {
public:
    LoadError(const std::string& what, int layer = -1)
      : Error(layer >= 0 ? "layer " + std::to_string(layer) + ": " + what : what)
      , m_layer(layer)
    { }

    int layer() const { return m_layer; }

private:
    int m_layer;
};

// Malformed raw attribution file or image.
class FormatError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

} // namespace dmbp
